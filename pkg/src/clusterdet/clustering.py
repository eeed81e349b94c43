"""K-Means (Lloyd) and DBSCAN over feature vectors, with sklearn-style estimators.

Both estimators expose ``cluster_centers_``, ``labels_`` and ``inertia_`` after
``fit``. The functional entry points :func:`kmeans_fit` / :func:`dbscan_fit`
take a :class:`ClusterSpec` and return a :class:`ClusterModel`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InputError, NumericError
from .validation import check_features

# Float slack allowed when asserting that inertia never goes up.
_MONOTONE_SLACK = 1e-9


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)


@dataclass(frozen=True)
class ClusterSpec:
    method: str = "kmeans"
    k: int = 1
    eps: float = 0.5
    min_samples: int = 5
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0
    n_init: int = 1

    def __post_init__(self):
        if self.method not in ("kmeans", "dbscan"):
            raise InputError(f"unknown clustering method {self.method!r}")
        if self.method == "kmeans" and self.k < 1:
            raise InputError("k must be >= 1")
        if self.method == "dbscan" and (self.eps <= 0 or self.min_samples < 1):
            raise InputError("DBSCAN needs eps > 0 and min_samples >= 1")


def sq_distances(points, centers) -> np.ndarray:
    """Squared Euclidean distances ``(n, k)``, clipped at zero."""
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.maximum(d, 0.0)


def _lloyd(x, k, max_iters, tol, rng):
    n = len(x)
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = sq_distances(x, centers)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(n), labels].sum())
        if history and inertia > history[-1] + _MONOTONE_SLACK * max(1.0, history[-1]):
            raise NumericError(f"inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        counts = np.bincount(labels, minlength=k)
        onehot = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
        new = np.asarray(onehot @ x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        # Empty clusters take the point currently farthest from its own center.
        point_d = d[np.arange(n), labels].copy()
        for j in np.flatnonzero(~filled):
            far = int(point_d.argmax())
            new[j] = x[far]
            point_d[far] = -1.0
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        if shift < tol:
            break
    d = sq_distances(x, centers)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(n), labels].sum())
    if history and inertia > history[-1] + _MONOTONE_SLACK * max(1.0, history[-1]):
        raise NumericError(f"inertia increased: {history[-1]} -> {inertia}")
    history.append(inertia)
    return ClusterModel(centers, labels, inertia, it, history)


def kmeans_runs(points, spec: ClusterSpec) -> list[ClusterModel]:
    """Every one of the ``spec.n_init`` seeded Lloyd runs, in start order.

    Each start picks ``k`` distinct points uniformly without replacement.
    Nearest-center ties go to the lower center index.
    """
    x = check_features(points)
    if len(x) < spec.k:
        raise InputError(f"need at least k={spec.k} points, got {len(x)}")
    rng = np.random.default_rng(spec.seed)
    return [_lloyd(x, spec.k, spec.max_iters, spec.tol, rng) for _ in range(max(1, spec.n_init))]


def kmeans_fit(points, spec: ClusterSpec) -> ClusterModel:
    """Lloyd's algorithm from ``spec.n_init`` seeded random starts; the
    lowest inertia wins (earliest start on ties)."""
    best = None
    for model in kmeans_runs(points, spec):
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _region(d2, i, eps2):
    return np.flatnonzero(d2[i] <= eps2)


def dbscan_fit(points, spec: ClusterSpec) -> ClusterModel:
    """Density-based clustering; noise gets label -1 and no center.

    Points are scanned in input order, so cluster ids follow the order in which
    their first core point appears. A border point joins the first cluster
    that reaches it.
    """
    x = check_features(points)
    if spec.eps <= 0 or spec.min_samples < 1:
        raise InputError("DBSCAN needs eps > 0 and min_samples >= 1")
    n = len(x)
    d2 = sq_distances(x, x)
    eps2 = spec.eps**2
    core = (d2 <= eps2).sum(axis=1) >= spec.min_samples
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(_region(d2, i, eps2))
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(_region(d2, j, eps2))
        cluster += 1
    centers = np.array([x[labels == c].mean(axis=0) for c in range(cluster)]).reshape(
        cluster, x.shape[1]
    )
    member = labels >= 0
    inertia = 0.0
    if member.any():
        inertia = float(((x[member] - centers[labels[member]]) ** 2).sum())
    return ClusterModel(centers, labels, inertia, 1, [inertia])


def fit_clusters(points, spec: ClusterSpec) -> ClusterModel:
    if spec.method == "kmeans":
        return kmeans_fit(points, spec)
    return dbscan_fit(points, spec)


def positive_mean(centers, renormalize: bool = False) -> np.ndarray:
    """Average of the positive cluster centers, optionally rescaled to unit length.

    A mean shorter than 1e-12 cannot be rescaled and comes back as the zero
    vector, the same convention the feature normalisation uses.
    """
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2 or len(c) == 0:
        raise InputError("positive_mean needs at least one center")
    mean = c.mean(axis=0)
    if renormalize:
        norm = np.linalg.norm(mean)
        mean = np.zeros_like(mean) if norm < 1e-12 else mean / norm
    return mean


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd K-Means with uniform distinct-point initialisation.

    Parameters
    ----------
    n_clusters : int
    max_iter : int
        Cap on Lloyd iterations per start.
    tol : float
        Stop once no center moves by more than this (max-abs coordinate).
    n_init : int
        Number of seeded restarts; the lowest-inertia run is kept.
    random_state : int
    """

    def __init__(self, n_clusters=8, max_iter=100, tol=1e-6, n_init=1, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        spec = ClusterSpec(
            "kmeans", k=self.n_clusters, max_iters=self.max_iter, tol=self.tol,
            seed=self.random_state, n_init=self.n_init,
        )
        model = kmeans_fit(X, spec)
        self.cluster_centers_ = model.centers
        self.labels_ = model.assignments
        self.inertia_ = model.inertia
        self.n_iter_ = model.iterations_run
        self.inertia_history_ = model.inertia_history
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return sq_distances(check_features(X), self.cluster_centers_).argmin(axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(sq_distances(check_features(X), self.cluster_centers_))


class DBSCAN(ClusterMixin, BaseEstimator):
    """Density clustering; ``labels_ == -1`` marks noise."""

    def __init__(self, eps=0.5, min_samples=5):
        self.eps = eps
        self.min_samples = min_samples

    def fit(self, X, y=None):
        model = dbscan_fit(X, ClusterSpec("dbscan", eps=self.eps, min_samples=self.min_samples))
        self.cluster_centers_ = model.centers
        self.labels_ = model.assignments
        self.inertia_ = model.inertia
        return self
