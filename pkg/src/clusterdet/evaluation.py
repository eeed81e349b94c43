"""Inference, detection metrics (P/R/F1, COCO-style AP/AR) and 2-D embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from . import netcore
from .errors import InputError
from .geometry import box_iou, clip_boxes, decode_boxes, generate_anchors, nms
from .geometry import AnchorLabel, match_anchors
from .trainer import _anchor_grid, _subsample_negatives, anchor_features, flat_deltas, flat_objectness, label_image
from .validation import check_features

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class DetectionResult:
    boxes: np.ndarray  # (n, 4), clipped to the image
    scores: np.ndarray  # (n,), descending


def infer(params, image, anchor_sizes, score_thresh=0.05, nms_thresh=0.5, max_dets=100):
    """Decode, clip and NMS the detections for one ``(H, W)`` image."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    fwd = netcore.forward(params, image, keep_cache=False)
    return _detections(fwd, 0, (h, w), anchor_sizes, score_thresh, nms_thresh, max_dets)


def infer_batch(params, images, anchor_sizes, score_thresh=0.05, nms_thresh=0.5, max_dets=100):
    images = np.asarray(images, dtype=np.float64)
    fwd = netcore.forward(params, images, keep_cache=False)
    hw = images.shape[-2:]
    return [
        _detections(fwd, b, hw, anchor_sizes, score_thresh, nms_thresh, max_dets)
        for b in range(len(images))
    ]


def _detections(fwd, b, hw, anchor_sizes, score_thresh, nms_thresh, max_dets):
    mh, mw = fwd.fmap.shape[2:]
    anchors = generate_anchors(mh, mw, netcore.STRIDE, anchor_sizes)
    scores = expit(flat_objectness(fwd.objectness[b]))
    keep = np.flatnonzero(scores >= score_thresh)
    boxes = clip_boxes(decode_boxes(anchors[keep], flat_deltas(fwd.deltas[b])[keep]), *hw)
    scores = scores[keep]
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[ok], scores[ok]
    kept = nms(boxes, scores, nms_thresh)[:max_dets]
    return DetectionResult(boxes[kept].reshape(-1, 4), scores[kept])


def match_predictions(pred_boxes, gt_boxes, iou_thresh=0.5):
    """Greedy one-to-one matching of score-sorted predictions.

    Returns ``(tp, fp, fn)`` counts and a per-prediction boolean TP mask.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    is_tp = np.zeros(len(pred), dtype=bool)
    if len(pred) and len(gt):
        ious = box_iou(pred, gt)
        taken = np.zeros(len(gt), dtype=bool)
        for i in range(len(pred)):
            cand = np.where(taken, -1.0, ious[i])
            j = int(cand.argmax())
            if cand[j] >= iou_thresh:
                taken[j] = True
                is_tp[i] = True
    tp = int(is_tp.sum())
    return (tp, len(pred) - tp, len(gt) - tp), is_tp


def precision_recall_f1(tp, fp, fn):
    if min(tp, fp, fn) < 0:
        raise InputError("confusion counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def interpolated_ap(is_tp_sorted, n_gt):
    """101-point interpolated AP from a globally score-sorted TP mask."""
    if n_gt == 0 or len(is_tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(is_tp_sorted)
    fp = np.cumsum(~is_tp_sorted)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class MetricsReport:
    AP: float
    AP50: float
    AP75: float
    AR50: float
    precision50: float
    recall50: float
    f1_50: float
    per_iou: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def average_precision(predictions, ground_truth, iou_thresholds=IOU_THRESHOLDS, score_thresh=0.5):
    """Dataset-level metrics.

    ``predictions`` is a list of ``DetectionResult`` (or ``(boxes, scores)``)
    aligned with ``ground_truth``, a list of ``(n, 4)`` arrays. Precision,
    recall and F1 use IoU 0.5 and only predictions scoring ``>= score_thresh``;
    AR50 admits every prediction.
    """
    if len(predictions) != len(ground_truth):
        raise InputError("predictions and ground truth differ in image count")
    preds = []
    for p in predictions:
        boxes, scores = (p.boxes, p.scores) if isinstance(p, DetectionResult) else p
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).ravel()
        order = np.argsort(-scores, kind="stable")
        preds.append((boxes[order], scores[order]))
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in ground_truth]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return MetricsReport(0, 0, 0, 0, 0, 0, 0, {}, ["no_ground_truth"])

    all_scores = np.concatenate([s for _, s in preds]) if preds else np.zeros(0)
    global_order = np.argsort(-all_scores, kind="stable")
    per_iou, ar50 = {}, 0.0
    for thr in iou_thresholds:
        masks = [match_predictions(b, g, thr)[1] for (b, _), g in zip(preds, gts)]
        flat = np.concatenate(masks) if masks else np.zeros(0, dtype=bool)
        per_iou[f"{thr:.2f}"] = interpolated_ap(flat[global_order], n_gt)
        if np.isclose(thr, 0.5):
            ar50 = flat.sum() / n_gt
    tp = fp = fn = 0
    for (b, s), g in zip(preds, gts):
        (t, f, n), _ = match_predictions(b[s >= score_thresh], g, 0.5)
        tp, fp, fn = tp + t, fp + f, fn + n
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    return MetricsReport(
        AP=float(np.mean(list(per_iou.values()))),
        AP50=per_iou.get("0.50", 0.0),
        AP75=per_iou.get("0.75", 0.0),
        AR50=float(ar50),
        precision50=p,
        recall50=r,
        f1_50=f1,
        per_iou=per_iou,
    )


# ---------------------------------------------------------------------------
# 2-D embedding


def _top_directions(x, n_components, tol=1e-9, max_iter=20000):
    """Leading right singular vectors of centred ``x`` by power iteration
    with deflation, iterating on ``x.T @ (x @ v)`` so the covariance is never
    formed."""
    n, d = x.shape
    rng = np.random.default_rng(0)
    comps, variances = [], []
    for _ in range(n_components):
        v = rng.normal(size=d)
        for c in comps:
            v -= (v @ c) * c
        norm = np.linalg.norm(v)
        v /= norm
        lam = 0.0
        for _ in range(max_iter):
            w = x.T @ (x @ v)
            # Two Gram-Schmidt passes: one leaves roundoff along earlier
            # directions that dominates when the remaining variance is ~0.
            for _ in range(2):
                for c in comps:
                    w -= (w @ c) * c
            lam_new = float(np.linalg.norm(w))
            if lam_new == 0.0:
                break
            w /= lam_new
            delta = np.linalg.norm(w - v)
            v = w
            if abs(lam_new - lam) <= tol * max(lam_new, 1e-300) and delta <= np.sqrt(tol):
                lam = lam_new
                break
            lam = lam_new
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        variances.append(lam / max(n - 1, 1))
    return np.array(comps), np.array(variances)


class PCA2D(TransformerMixin, BaseEstimator):
    """Mean-centred projection onto the two leading principal directions.

    Each direction's largest-magnitude coordinate is made positive, so results
    are deterministic. ``degenerate_`` is True when all rows were identical.
    """

    def __init__(self, n_components=2, tol=1e-9):
        self.n_components = n_components
        self.tol = tol

    def fit(self, X, y=None):
        x = check_features(X, min_samples=2)
        self.mean_ = x.mean(axis=0)
        xc = x - self.mean_
        self.degenerate_ = bool(np.all(np.abs(xc) < 1e-15))
        k = self.n_components
        if self.degenerate_:
            self.components_ = np.zeros((k, x.shape[1]))
            self.explained_variance_ = np.zeros(k)
        else:
            self.components_, self.explained_variance_ = _top_directions(xc, k, self.tol)
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (check_features(X) - self.mean_) @ self.components_.T


def embed_2d(features):
    """Project ``[(role, vector), ...]`` to ``[(role, x, y), ...]``."""
    if len(features) < 2:
        raise InputError("embed_2d needs at least two features")
    roles = [r for r, _ in features]
    x = np.array([np.asarray(v, dtype=np.float64) for _, v in features])
    pca = PCA2D().fit(x)
    xy = pca.transform(x)
    return [(r, float(a), float(b)) for r, (a, b) in zip(roles, xy)], pca.degenerate_


# ---------------------------------------------------------------------------
# Feature export and linear probe

SAMPLE, POSITIVE, NEGATIVE = "sample", "positive", "negative"


def collect_features(params, rubbing, font, config, seed=0):
    """Role-tagged pooled features, one image at a time.

    Rubbing images give ``sample`` (positive anchors) and ``negative`` rows,
    the latter capped per image lowest-IoU first exactly as in training.
    Font images give ``positive`` rows. Returns ``(roles, matrix)``.
    """
    rng = np.random.default_rng(seed)
    roles, rows = [], []

    def pooled(sample):
        fwd = netcore.forward(params, sample.image, keep_cache=False)
        anchors, mat = _anchor_grid(*fwd.fmap.shape[2:], config.anchor_sizes)
        return fwd.fmap[0], anchors, mat

    for sample in rubbing:
        fmap, anchors, mat = pooled(sample)
        _, pos_idx, neg_idx, _ = label_image(anchors, sample.boxes, config.match_policy)
        neg_idx = _subsample_negatives(anchors, sample.boxes, neg_idx, config.neg_per_image, rng)
        for role, idx in ((SAMPLE, pos_idx), (NEGATIVE, neg_idx)):
            rows.append(anchor_features(fmap, idx, mat, config.normalize_features))
            roles += [role] * len(idx)
    for sample in font:
        fmap, anchors, mat = pooled(sample)
        labels = match_anchors(anchors, sample.boxes, config.match_policy)
        idx = np.flatnonzero(labels == AnchorLabel.POSITIVE)
        rows.append(anchor_features(fmap, idx, mat, config.normalize_features))
        roles += [POSITIVE] * len(idx)
    dim = netcore.FEATURE_DIM * 16
    matrix = np.concatenate(rows) if rows else np.zeros((0, dim))
    return np.array(roles, dtype=object), matrix


def linear_probe(train_roles, train_x, test_roles, test_x):
    """Balanced accuracy of a logistic-regression probe telling ``sample``
    rows from ``negative`` rows, fitted on one split and scored on another."""
    def pick(roles, x):
        roles = np.asarray(roles)
        keep = (roles == SAMPLE) | (roles == NEGATIVE)
        return x[keep], (roles[keep] == SAMPLE).astype(int)

    xa, ya = pick(train_roles, train_x)
    xb, yb = pick(test_roles, test_x)
    if len(np.unique(ya)) < 2 or len(np.unique(yb)) < 2:
        raise InputError("probe needs both sample and negative rows in each split")
    probe = make_pipeline(
        StandardScaler(), LogisticRegression(max_iter=2000, class_weight="balanced")
    )
    probe.fit(xa, ya)
    return float(balanced_accuracy_score(yb, probe.predict(xb)))
