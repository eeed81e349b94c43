"""Training loop: dual-dataset forward, anchor matching, RoI features,
clustering, loss assembly, backward and SGD.

A step is split in two. :func:`plan_step` does everything that is held
constant under differentiation (anchor labels, regression targets, which
anchors are pooled, cluster centers). :func:`objective` then evaluates the
weighted loss and its exact gradient for given parameters and a fixed plan,
which is what the finite-difference checks perturb.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import netcore
from .clustering import ClusterSpec, fit_clusters, positive_mean
from .errors import InputError, NumericError
from .geometry import (
    AnchorLabel,
    MatchPolicy,
    anchor_max_iou,
    assigned_gt,
    encode_boxes,
    generate_anchors,
    match_anchors,
)
from .losses import INFONCE, NEGATIVES_ONLY, LossReport, box_loss, class_loss, clus_loss, total_loss
from .roipool import l2_normalize, l2_normalize_backward, pool_with, roi_align_backward, roi_align_matrix

log = logging.getLogger(__name__)

DEFAULT_CLUSTER_METHOD = ClusterSpec("kmeans", k=1, eps=12.0, min_samples=5, max_iters=100, tol=1e-6)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambdas: tuple = (1.0, 1.0, 1.0)
    tau: float = 0.1
    n_neg_clusters: int = 63
    m_pos_clusters: int = 3
    obc_count: int = 20
    match_policy: MatchPolicy = MatchPolicy()
    cluster_method: ClusterSpec = DEFAULT_CLUSTER_METHOD
    batch_size: int = 2
    iterations: int = 500
    seed: int = 0
    normalize_features: bool = True
    denominator_mode: str = INFONCE
    anchor_sizes: tuple = (16, 24, 32)
    neg_per_image: int = 256

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("lambdas", tuple(float(v) for v in self.lambdas))
        set_("anchor_sizes", tuple(int(v) for v in self.anchor_sizes))
        if isinstance(self.match_policy, dict):
            set_("match_policy", MatchPolicy(**self.match_policy))
        if isinstance(self.cluster_method, dict):
            merged = {**dataclasses.asdict(DEFAULT_CLUSTER_METHOD), **self.cluster_method}
            set_("cluster_method", ClusterSpec(**merged))
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise InputError("lambdas must be three non-negative numbers")
        if self.lr <= 0 or self.tau <= 0:
            raise InputError("lr and tau must be > 0")
        if min(self.n_neg_clusters, self.m_pos_clusters, self.batch_size) < 1:
            raise InputError("cluster counts and batch_size must be >= 1")
        if self.iterations < 0 or self.neg_per_image < 1:
            raise InputError("iterations must be >= 0 and neg_per_image >= 1")
        if self.lambdas[0] > 0 and self.obc_count < self.m_pos_clusters:
            raise InputError("obc_count must be >= m_pos_clusters")
        if self.denominator_mode not in (INFONCE, NEGATIVES_ONLY):
            raise InputError(f"unknown denominator_mode {self.denominator_mode!r}")

    @property
    def contrastive(self) -> bool:
        return self.lambdas[0] > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["anchor_sizes"] = list(self.anchor_sizes)
        d["match_policy"] = self.match_policy.to_dict()
        cm = dataclasses.asdict(self.cluster_method)
        for unused in ("k", "seed"):
            cm.pop(unused)
        d["cluster_method"] = cm
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("cluster_method"), dict):
            data["cluster_method"] = {
                k: v for k, v in data["cluster_method"].items() if k not in ("k", "seed")
            }
        return cls(**data)


@dataclass
class IterationRecord:
    iteration: int
    report: LossReport
    neg_inertia: float = 0.0
    pos_inertia: float = 0.0
    flags: tuple = ()
    wall_time: float = 0.0

    LOG_COLUMNS = (
        "iteration", "l_clus", "l_class", "l_box", "total",
        "n_samples", "n_pos_centers", "n_neg_centers", "n_pos_anchors", "n_neg_anchors",
        "neg_inertia", "pos_inertia", "flags",
    )

    def log_row(self) -> list:
        r, c = self.report, self.report.counts
        return [
            self.iteration, repr(r.l_clus), repr(r.l_class), repr(r.l_box), repr(r.total),
            c["samples"], c["pos_centers"], c["neg_centers"], c["pos_anchors"], c["neg_anchors"],
            repr(self.neg_inertia), repr(self.pos_inertia), "|".join(self.flags),
        ]


@dataclass
class ImagePlan:
    labels: np.ndarray
    pos_idx: np.ndarray
    neg_idx: np.ndarray
    box_targets: np.ndarray
    sample_matrix: object  # sparse RoI operator for this image's positive anchors


@dataclass
class StepPlan:
    images: list
    pos_mean: np.ndarray | None = None
    neg_centers: np.ndarray | None = None
    neg_inertia: float = 0.0
    pos_inertia: float = 0.0
    n_pos_centers: int = 0
    flags: list = field(default_factory=list)


@lru_cache(maxsize=16)
def _anchor_grid(map_h, map_w, sizes):
    anchors = generate_anchors(map_h, map_w, netcore.STRIDE, sizes)
    mat, _ = roi_align_matrix(anchors, (map_h, map_w))
    return anchors, mat.tocsr()


def _rows(mat, idx, bins=16):
    rows = (np.asarray(idx)[:, None] * bins + np.arange(bins)[None, :]).ravel()
    return mat[rows]


def anchor_features(fmap, idx, mat_all, normalize):
    """Pooled (and optionally normalised) RoI vectors for anchors ``idx``."""
    if len(idx) == 0:
        return np.zeros((0, fmap.shape[0] * 16))
    raw = pool_with(_rows(mat_all, idx), fmap)
    return l2_normalize(raw)[0] if normalize else raw


def flat_objectness(obj):
    """(A, h, w) -> per-anchor vector in anchor order."""
    return obj.transpose(1, 2, 0).reshape(-1)


def flat_deltas(deltas):
    a = deltas.shape[0] // 4
    return deltas.reshape(a, 4, *deltas.shape[1:]).transpose(2, 3, 0, 1).reshape(-1, 4)


def _subsample_negatives(anchors, gt, neg_idx, cap, rng):
    """Up to ``cap`` negatives, lowest max-IoU first; ties broken at random."""
    if len(neg_idx) <= cap:
        return neg_idx
    shuffled = rng.permutation(neg_idx)
    ious = anchor_max_iou(anchors[shuffled], gt)
    return np.sort(shuffled[np.argsort(ious, kind="stable")[:cap]])


def label_image(anchors, gt, policy):
    labels = match_anchors(anchors, gt, policy)
    pos_idx = np.flatnonzero(labels == AnchorLabel.POSITIVE)
    neg_idx = np.flatnonzero(labels == AnchorLabel.NEGATIVE)
    if len(pos_idx):
        # computed over all anchors so forced-best anchors regress to their own gt
        which = assigned_gt(anchors, gt)[pos_idx]
        targets = encode_boxes(anchors[pos_idx], gt[which])
    else:
        targets = np.zeros((0, 4))
    return labels, pos_idx, neg_idx, targets


def _cluster(points, k_wanted, config, rng, what, flags):
    spec = config.cluster_method
    if spec.method == "kmeans":
        k = min(k_wanted, len(points))
        if k < k_wanted:
            flags.append(f"clamped_{what}")
        spec = dataclasses.replace(spec, k=k, seed=int(rng.integers(2**32)))
    model = fit_clusters(points, spec)
    return model.centers, model.inertia


def plan_step(params, fwd, rubbing_batch, font_batch, config: TrainConfig, rng, contrastive=True) -> StepPlan:
    """Matching, negative subsampling and clustering for one iteration."""
    sizes = config.anchor_sizes
    h, w = fwd.fmap.shape[2:]
    anchors, mat_all = _anchor_grid(h, w, sizes)
    plan = StepPlan(images=[])
    neg_feats = []
    for b, sample in enumerate(rubbing_batch):
        labels, pos_idx, neg_idx, targets = label_image(anchors, sample.boxes, config.match_policy)
        plan.images.append(ImagePlan(labels, pos_idx, neg_idx, targets, _rows(mat_all, pos_idx)))
        if contrastive:
            chosen = _subsample_negatives(anchors, sample.boxes, neg_idx, config.neg_per_image, rng)
            neg_feats.append(anchor_features(fwd.fmap[b], chosen, mat_all, config.normalize_features))
    if not contrastive:
        return plan

    n_samples = sum(len(p.pos_idx) for p in plan.images)
    pos_feats = []
    if font_batch:
        font_imgs = np.stack([s.image for s in font_batch])
        ffwd = netcore.forward(params, font_imgs, keep_cache=False)
        fh, fw = ffwd.fmap.shape[2:]
        f_anchors, f_mat = _anchor_grid(fh, fw, sizes)
        for b, sample in enumerate(font_batch):
            labels = match_anchors(f_anchors, sample.boxes, config.match_policy)
            idx = np.flatnonzero(labels == AnchorLabel.POSITIVE)
            pos_feats.append(anchor_features(ffwd.fmap[b], idx, f_mat, config.normalize_features))
    neg = np.concatenate(neg_feats) if neg_feats else np.zeros((0, 1))
    pos = np.concatenate(pos_feats) if pos_feats else np.zeros((0, 1))
    if n_samples == 0:
        plan.flags.append("no_samples")
        return plan
    if len(neg) == 0 or len(pos) == 0:
        plan.flags.append("no_negatives" if len(neg) == 0 else "no_positives")
        return plan
    neg_centers, plan.neg_inertia = _cluster(neg, config.n_neg_clusters, config, rng, "neg", plan.flags)
    pos_centers, plan.pos_inertia = _cluster(pos, config.m_pos_clusters, config, rng, "pos", plan.flags)
    if len(neg_centers) == 0 or len(pos_centers) == 0:
        plan.flags.append("no_clusters")
        return plan
    plan.neg_centers = neg_centers
    plan.n_pos_centers = len(pos_centers)
    plan.pos_mean = positive_mean(pos_centers, renormalize=config.normalize_features)
    if not np.any(plan.pos_mean):
        plan.flags.append("degenerate_pos_mean")
    return plan


@dataclass
class Objective:
    report: LossReport
    grads: dict
    component_grads: dict | None = None


def objective(params, fwd, plan: StepPlan, config: TrainConfig, split: bool = False) -> Objective:
    """Weighted loss and exact parameter gradient for a fixed plan.

    With ``split=True`` also returns per-loss gradients (unweighted) under
    ``component_grads["clus" | "class" | "box"]``.
    """
    lam1, lam2, lam3 = config.lambdas
    fmap = fwd.fmap

    logits, cls_t, pred, box_t = [], [], [], []
    for b, ip in enumerate(plan.images):
        obj = flat_objectness(fwd.objectness[b])
        deltas = flat_deltas(fwd.deltas[b])
        logits += [obj[ip.pos_idx], obj[ip.neg_idx]]
        cls_t += [np.ones(len(ip.pos_idx)), np.zeros(len(ip.neg_idx))]
        pred.append(deltas[ip.pos_idx])
        box_t.append(ip.box_targets)
    cls = class_loss(np.concatenate(logits), np.concatenate(cls_t))
    box = box_loss(np.concatenate(pred), np.concatenate(box_t))

    # scatter detection-loss gradients back onto the head outputs
    d_obj = np.zeros_like(fwd.objectness)
    d_del = np.zeros_like(fwd.deltas)
    a = fwd.objectness.shape[1]
    mh, mw = fmap.shape[2:]
    c_off = b_off = 0
    for b, ip in enumerate(plan.images):
        g = np.zeros(mh * mw * a)
        n_p, n_n = len(ip.pos_idx), len(ip.neg_idx)
        g[ip.pos_idx] += cls.grad[c_off:c_off + n_p]
        g[ip.neg_idx] += cls.grad[c_off + n_p:c_off + n_p + n_n]
        c_off += n_p + n_n
        d_obj[b] = g.reshape(mh, mw, a).transpose(2, 0, 1)
        gd = np.zeros((mh * mw * a, 4))
        gd[ip.pos_idx] = box.grad[b_off:b_off + n_p]
        b_off += n_p
        d_del[b] = gd.reshape(mh, mw, a, 4).transpose(2, 3, 0, 1).reshape(4 * a, mh, mw)

    l_clus, clus_skipped = 0.0, True
    d_fmap = np.zeros_like(fmap)
    n_samples = sum(len(ip.pos_idx) for ip in plan.images)
    if config.contrastive and plan.neg_centers is not None:
        raws = [pool_with(ip.sample_matrix, fmap[b]) for b, ip in enumerate(plan.images)]
        raw = np.concatenate(raws)
        feats = l2_normalize(raw)[0] if config.normalize_features else raw
        res = clus_loss(feats, plan.pos_mean, plan.neg_centers, config.tau, config.denominator_mode)
        l_clus, clus_skipped = res.value, res.skipped
        g = l2_normalize_backward(raw, res.grad) if config.normalize_features else res.grad
        off = 0
        for b, ip in enumerate(plan.images):
            n = len(ip.pos_idx)
            if n:
                d_fmap[b] = roi_align_backward(ip.sample_matrix, g[off:off + n], fmap.shape[1:])
            off += n

    counts = {
        "samples": n_samples,
        "pos_centers": plan.n_pos_centers,
        "neg_centers": 0 if plan.neg_centers is None else len(plan.neg_centers),
        "pos_anchors": sum(len(ip.pos_idx) for ip in plan.images),
        "neg_anchors": sum(len(ip.neg_idx) for ip in plan.images),
    }
    report = total_loss(
        l_clus, cls.value, box.value, config.lambdas, config.tau, counts,
        {"clus": clus_skipped, "class": cls.skipped, "box": box.skipped},
    )
    grads = netcore.backward(
        params, fwd,
        d_fmap=lam1 * d_fmap if lam1 else None,
        d_obj=lam2 * d_obj,
        d_deltas=lam3 * d_del,
    )
    components = None
    if split:
        components = {
            "clus": netcore.backward(params, fwd, d_fmap=d_fmap),
            "class": netcore.backward(params, fwd, d_obj=d_obj),
            "box": netcore.backward(params, fwd, d_deltas=d_del),
        }
    return Objective(report, grads, components)


def iteration_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    """Independent random stream for one iteration (stream 1 draws font images)."""
    return np.random.default_rng([seed, iteration, stream])


def font_draw(config: TrainConfig, n_font: int, rng) -> np.ndarray:
    return rng.integers(0, n_font, size=config.obc_count)


def rubbing_draw(config: TrainConfig, n_rubbing: int, iteration: int) -> list[int]:
    start = iteration * config.batch_size
    return [(start + j) % n_rubbing for j in range(config.batch_size)]


@dataclass
class TrainState:
    params: dict
    optimizer: netcore.SGD
    iteration: int = 0


def init_state(config: TrainConfig, params=None) -> TrainState:
    if params is None:
        params = netcore.init_params(len(config.anchor_sizes), config.seed)
    opt = netcore.SGD(config.lr, config.momentum, config.weight_decay)
    return TrainState(params, opt)


def train_step(state: TrainState, rubbing_batch, font_batch, config: TrainConfig, contrastive=True):
    """One optimisation step; returns ``(state, IterationRecord)``.

    ``contrastive=False`` removes the clustering path entirely (no font
    forward, no clustering, no cluster loss) whatever ``lambdas`` says.
    """
    if not rubbing_batch:
        raise InputError("empty rubbing batch")
    t0 = time.perf_counter()
    use_clus = contrastive and config.contrastive
    run_config = config if use_clus else dataclasses.replace(config, lambdas=(0.0,) + config.lambdas[1:])
    rng = iteration_rng(config.seed, state.iteration)
    images = np.stack([s.image for s in rubbing_batch])
    # A diverging run overflows before anything is non-finite; the checks in
    # forward, the optimizer and train() turn that into an error instead.
    with np.errstate(over="ignore", invalid="ignore"):
        fwd = netcore.forward(state.params, images)
        plan = plan_step(state.params, fwd, rubbing_batch, font_batch if use_clus else [],
                         run_config, rng, use_clus)
        obj = objective(state.params, fwd, plan, run_config)
        params = state.optimizer.step(state.params, obj.grads)
    if use_clus is False:
        # report the configured weights even though the path is off
        obj.report.lambdas = config.lambdas
    record = IterationRecord(
        state.iteration, obj.report, plan.neg_inertia, plan.pos_inertia,
        tuple(plan.flags), time.perf_counter() - t0,
    )
    return TrainState(params, state.optimizer, state.iteration + 1), record


class TrainingAborted(NumericError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


def train(config: TrainConfig, rubbing, font, params=None, contrastive=True, callback=None):
    """Run ``config.iterations`` steps; returns ``(params, records)``.

    Rubbing batches are taken round-robin; ``obc_count`` font images are drawn
    uniformly with replacement each iteration from that iteration's stream.
    """
    if not rubbing:
        raise InputError("rubbing dataset is empty")
    if config.contrastive and contrastive and not font:
        raise InputError("font dataset is empty")
    state = init_state(config, params)
    records = []
    for it in range(config.iterations):
        rub = [rubbing[i] for i in rubbing_draw(config, len(rubbing), it)]
        fnt = []
        if config.contrastive and contrastive:
            fnt = [font[i] for i in font_draw(config, len(font), iteration_rng(config.seed, it, 1))]
        try:
            state, rec = train_step(state, rub, fnt, config, contrastive)
        except NumericError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}", records) from exc
        records.append(rec)
        if callback is not None:
            callback(rec)
        if it % 50 == 0:
            log.debug("iter %d total %.4f", it, rec.report.total)
    return state.params, records
