import numpy as np
import pytest
from hypothesis import given, strategies as st

from clusterdet import netcore
from clusterdet.errors import InputError
from clusterdet.evaluation import (
    PCA2D, DetectionResult, average_precision, collect_features, embed_2d, infer, infer_batch,
    interpolated_ap, linear_probe, match_predictions, precision_recall_f1,
)
from clusterdet.trainer import TrainConfig

from oracles import ap101_naive, greedy_match_naive, top_eigen

GT = np.array([[10.0, 10.0, 30.0, 30.0]])


def iou06_box():
    # [10,10,30,30] vs [10,10,30,35]: 400 / 500 = 0.8 -> tweak height to reach 0.6
    return np.array([[10.0, 10.0, 30.0, 10.0 + 20.0 / 0.6]])


# -- inference ------------------------------------------------------------------

def test_infer_thresholds(small_rubbing):
    params = netcore.init_params(3, 0)
    img = small_rubbing[0].image
    assert len(infer(params, img, (16, 24, 32), score_thresh=1.0 + 1e-9).scores) == 0
    params["head.weight"][:] = 0
    params["head.bias"][:] = 0
    assert len(infer(params, img, (16, 24, 32), score_thresh=0.5 + 1e-9).scores) == 0
    res = infer(params, img, (16, 24, 32), score_thresh=0.5, nms_thresh=0.5)
    assert len(res.scores) > 0 and np.all(res.scores == 0.5)


def test_infer_result_contract(small_rubbing):
    params = netcore.init_params(3, 0)
    params["head.bias"][:3] = 2.0
    images = np.stack([s.image for s in small_rubbing[:3]])
    batch = infer_batch(params, images, (16, 24, 32), 0.05, 0.5)
    for img, res in zip(images, batch):
        one = infer(params, img, (16, 24, 32), 0.05, 0.5)
        assert np.allclose(one.boxes, res.boxes) and np.allclose(one.scores, res.scores)
        assert np.all(np.diff(res.scores) <= 0) and len(res.scores) <= 100
        b = res.boxes
        assert np.all(b[:, 0] >= 0) and np.all(b[:, 2] <= img.shape[1])
        assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])


# -- matching and counts ----------------------------------------------------------

def test_match_examples():
    assert match_predictions(GT, GT)[0] == (1, 0, 0)
    assert match_predictions(np.zeros((0, 4)), np.vstack([GT, GT + 40]))[0] == (0, 0, 2)
    assert match_predictions(np.vstack([GT, GT]), GT)[0] == (1, 1, 0)


boxes_st = st.lists(
    st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(2, 20), st.integers(2, 20)),
    max_size=7,
).map(lambda t: np.array([[x, y, x + w, y + h] for x, y, w, h in t], dtype=float).reshape(-1, 4))


@given(boxes_st, boxes_st, st.sampled_from([0.3, 0.5, 0.75]))
def test_match_against_naive(pred, gt, thr):
    (tp, fp, fn), mask = match_predictions(pred, gt, thr)
    assert mask.tolist() == greedy_match_naive(pred.tolist(), gt.tolist(), thr)
    assert tp <= len(gt) and tp <= len(pred)
    assert tp + fp == len(pred) and tp + fn == len(gt)


def test_prf_examples():
    assert precision_recall_f1(1, 0, 0) == (1, 1, 1)
    assert precision_recall_f1(0, 0, 0) == (0, 0, 0)
    p, r, f = precision_recall_f1(1, 1, 0)
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(InputError):
        precision_recall_f1(-1, 0, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_prf_bounds(tp, fp, fn):
    p, r, f = precision_recall_f1(tp, fp, fn)
    assert 0 <= p <= 1 and 0 <= r <= 1 and 0 <= f <= 1
    m = min(p, r)
    assert f <= 2 * m / (1 + m) + 1e-12
    if p + r:
        assert f == pytest.approx(2 * p * r / (p + r))


# -- AP ---------------------------------------------------------------------------

def test_ap_hand_cases():
    perfect = average_precision([(GT, [0.9])], [GT])
    assert perfect.AP50 == 1.0 and perfect.AP == 1.0
    dup = average_precision([(np.vstack([GT, GT]), [0.9, 0.8])], [GT])
    assert dup.AP50 == 1.0
    assert (dup.precision50, dup.recall50) == (0.5, 1.0)
    box = iou06_box()
    from clusterdet.geometry import iou
    assert iou(box[0], GT[0]) == pytest.approx(0.6)
    part = average_precision([(box, [0.9])], [GT])
    assert part.AP50 == 1.0 and part.AP75 == 0.0
    assert part.per_iou["0.60"] == 1.0 and part.per_iou["0.65"] == 0.0


def test_ap_report_fields():
    rep = average_precision([DetectionResult(GT, np.array([0.3]))], [GT])
    assert rep.AR50 == 1.0
    assert rep.precision50 == 0.0 and rep.f1_50 == 0.0  # below the 0.5 operating point
    assert len(rep.per_iou) == 10
    d = rep.to_dict()
    for k in ("AP", "AP50", "AP75", "AR50", "precision50", "recall50", "f1_50"):
        assert 0.0 <= d[k] <= 1.0


def test_zero_ground_truth():
    rep = average_precision([(GT, [0.9])], [np.zeros((0, 4))])
    assert rep.flags == ["no_ground_truth"] and rep.AP == 0 and rep.AP50 == 0
    with pytest.raises(InputError):
        average_precision([], [GT])


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 12))
def test_interpolated_ap_matches_naive(hits, extra_gt):
    n_gt = sum(hits) + extra_gt
    got = interpolated_ap(np.array(hits, dtype=bool), n_gt)
    assert got == pytest.approx(ap101_naive(hits, n_gt), abs=1e-12)


@given(st.lists(st.booleans(), min_size=1, max_size=20), st.integers(1, 5))
def test_ap_monotonicity(hits, extra_gt):
    n_gt = sum(hits) + extra_gt
    base = interpolated_ap(np.array(hits), n_gt)
    # a new TP ranked first (one more gt found) never lowers AP50
    assert interpolated_ap(np.array([True] + hits), n_gt) >= base - 1e-12
    # a lowest-score FP never raises it
    assert interpolated_ap(np.array(hits + [False]), n_gt) <= base + 1e-12


def test_ap_global_sort_across_images():
    a = GT
    b = GT + 50
    preds = [(np.vstack([a, a + 100]), [0.9, 0.2]), (b, [0.5])]
    rep = average_precision(preds, [a, b])
    # order: TP(0.9), TP(0.5), FP(0.2) -> full recall at precision 1
    assert rep.AP50 == 1.0
    preds = [(np.vstack([a, a + 100]), [0.9, 0.6]), (b, [0.5])]
    rep = average_precision(preds, [a, b])
    assert rep.AP50 == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)


# -- embedding --------------------------------------------------------------------

def test_pca_matches_eigen_oracle(rng):
    x = rng.normal(size=(50, 1024)) * np.linspace(3, 0.1, 1024)
    pca = PCA2D().fit(x)
    vals, vecs = top_eigen(x)
    assert np.allclose(pca.explained_variance_, vals, rtol=1e-6)
    proj = pca.transform(x)
    assert np.allclose(proj.var(axis=0, ddof=1), vals, rtol=1e-6)
    # same top-2 subspace (individual directions may rotate within it)
    overlap = np.linalg.svd(pca.components_ @ vecs.T, compute_uv=False)
    assert np.all(overlap >= 1 - 1e-6)


def test_pca_sign_convention(rng):
    x = rng.normal(size=(30, 6))
    comps = PCA2D().fit(x).components_
    for c in comps:
        assert c[np.argmax(np.abs(c))] > 0
    assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-8)


def test_embed_2d_preserves_planar_distances(rng):
    x = rng.normal(size=(20, 2)) * [3, 1]
    pts, degenerate = embed_2d([("sample", v) for v in x])
    xy = np.array([[a, b] for _, a, b in pts])
    d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d_out = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    assert not degenerate and np.allclose(d_in, d_out, atol=1e-9)


def test_embed_2d_collinear_and_degenerate(rng):
    t = rng.normal(size=15)
    x = np.outer(t, [1.0, 2.0, -1.0, 0.5])
    pts, _ = embed_2d([("negative", v) for v in x])
    assert max(abs(y) for _, _, y in pts) <= 1e-6
    pts, degenerate = embed_2d([("a", np.ones(5)), ("b", np.ones(5))])
    assert degenerate and all(p[1:] == (0.0, 0.0) for p in pts)
    with pytest.raises(InputError):
        embed_2d([("a", np.ones(3))])


@given(st.integers(0, 2**31 - 1))
def test_pca_variance_is_maximal(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(12, 4)) * r.uniform(0.2, 3, 4)
    captured = PCA2D().fit(x).transform(x).var(axis=0, ddof=1).sum()
    q, _ = np.linalg.qr(r.normal(size=(4, 2)))
    other = ((x - x.mean(0)) @ q).var(axis=0, ddof=1).sum()
    assert other <= captured * (1 + 1e-7)
    assert captured == pytest.approx(top_eigen(x)[0].sum(), rel=1e-7)


# -- features and probe ---------------------------------------------------------------

def test_collect_features_roles(small_rubbing, small_font):
    cfg = TrainConfig(neg_per_image=10)
    params = netcore.init_params(3, 0)
    roles, x = collect_features(params, small_rubbing[:3], small_font[:3], cfg)
    assert x.shape == (len(roles), 1024)
    assert set(roles) == {"sample", "negative", "positive"}
    assert (roles == "negative").sum() <= 30
    assert np.allclose(np.linalg.norm(x, axis=1), 1.0)
    again = collect_features(params, small_rubbing[:3], small_font[:3], cfg)
    assert np.array_equal(again[1], x)


def test_linear_probe(rng):
    roles = np.array(["sample"] * 40 + ["negative"] * 60 + ["positive"] * 5, dtype=object)
    x = rng.normal(size=(105, 8))
    x[:40, 0] += 4
    assert linear_probe(roles, x, roles, x) > 0.95
    with pytest.raises(InputError):
        linear_probe(roles[40:], x[40:], roles, x)
