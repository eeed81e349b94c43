"""Cluster-contrastive loss, detection losses and their weighted total.

Each function returns the loss together with its gradient w.r.t. the inputs
that carry gradient in training (sample features, logits, predicted deltas).
Empty inputs produce a zero loss with ``skipped=True`` rather than an error.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InputError, NumericError
from .validation import check_positive

INFONCE = "infonce"
NEGATIVES_ONLY = "negatives_only"


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    skipped: bool = False


def clus_logits(samples, pos_mean, neg_centers, tau):
    """Similarity logits ``(n, 1 + N)``; column 0 is the positive."""
    anchors = np.vstack([pos_mean[None, :], neg_centers])
    return samples @ anchors.T / tau, anchors


def clus_loss(samples, pos_mean, neg_centers, tau, denominator: str = INFONCE) -> LossResult:
    """Mean over samples of ``-log(exp(s_pos) / Z)`` with ``s = p . c / tau``.

    With ``denominator="infonce"`` ``Z`` sums the positive and every negative
    term; ``"negatives_only"`` leaves the positive out of ``Z``. Centers are
    constants; the gradient is w.r.t. ``samples`` only.
    """
    tau = check_positive(tau, "tau")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    neg_centers = np.atleast_2d(np.asarray(neg_centers, dtype=np.float64))
    pos_mean = np.asarray(pos_mean, dtype=np.float64).ravel()
    if samples.size == 0 or neg_centers.size == 0:
        return LossResult(0.0, np.zeros_like(samples), skipped=True)
    d = samples.shape[1]
    if pos_mean.shape[0] != d or neg_centers.shape[1] != d:
        raise InputError("sample and center dimensions differ")
    if denominator not in (INFONCE, NEGATIVES_ONLY):
        raise InputError(f"unknown denominator mode {denominator!r}")
    logits, anchors = clus_logits(samples, pos_mean, neg_centers, tau)
    n = len(samples)
    if denominator == INFONCE:
        lse = logsumexp(logits, axis=1)
        soft = np.exp(logits - lse[:, None])
    else:
        lse = logsumexp(logits[:, 1:], axis=1)
        soft = np.zeros_like(logits)
        soft[:, 1:] = np.exp(logits[:, 1:] - lse[:, None])
    per_sample = lse - logits[:, 0]
    # d loss / d logits = softmax - onehot(positive)
    dlogits = soft
    dlogits[:, 0] -= 1.0
    grad = (dlogits @ anchors) / (tau * n)
    value = float(per_sample.mean())
    if not np.isfinite(value):
        raise NumericError("non-finite cluster-contrastive loss")
    return LossResult(value, grad)


def clus_loss_per_sample(samples, pos_mean, neg_centers, tau, denominator=INFONCE):
    logits, _ = clus_logits(
        np.atleast_2d(samples), np.asarray(pos_mean).ravel(), np.atleast_2d(neg_centers), tau
    )
    cols = logits if denominator == INFONCE else logits[:, 1:]
    return logsumexp(cols, axis=1) - logits[:, 0]


def class_loss(logits, targets) -> LossResult:
    """Mean binary cross-entropy on logits; ``targets`` are 0/1."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if z.shape != t.shape:
        raise InputError("logits and targets differ in length")
    if z.size == 0:
        return LossResult(0.0, z.copy(), skipped=True)
    # log(1 + exp(z)) - t z, stable for large |z|
    losses = np.logaddexp(0.0, z) - t * z
    grad = (expit(z) - t) / z.size
    return LossResult(float(losses.mean()), grad)


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def box_loss(pred, target) -> LossResult:
    """Smooth-L1 summed over the 4 deltas, averaged over rows (positive anchors)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    if pred.shape != target.shape:
        raise InputError("prediction and target counts differ")
    n = len(pred)
    if n == 0:
        return LossResult(0.0, pred.copy(), skipped=True)
    diff = pred - target
    grad = np.where(np.abs(diff) < 1.0, diff, np.sign(diff)) / n
    return LossResult(float(smooth_l1(diff).sum() / n), grad)


@dataclass
class LossReport:
    l_clus: float
    l_class: float
    l_box: float
    total: float
    lambdas: tuple
    tau: float
    counts: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def total_loss(l_clus, l_class, l_box, lambdas, tau=1.0, counts=None, skipped=None) -> LossReport:
    """Weighted sum ``l1 * l_clus + l2 * l_class + l3 * l_box``."""
    lam = tuple(float(v) for v in lambdas)
    if len(lam) != 3 or any(v < 0 for v in lam):
        raise InputError(f"lambdas must be three non-negative values; got {lambdas}")
    total = lam[0] * l_clus + lam[1] * l_class + lam[2] * l_box
    if not np.isfinite(total):
        raise NumericError("non-finite total loss")
    return LossReport(
        float(l_clus), float(l_class), float(l_box), float(total), lam, float(tau),
        dict(counts or {}), dict(skipped or {}),
    )
