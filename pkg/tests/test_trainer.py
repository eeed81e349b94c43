import dataclasses

import numpy as np
import pytest

from clusterdet import netcore
from clusterdet.dataset import ImageSample, Source
from clusterdet.errors import InputError
from clusterdet.trainer import (
    IterationRecord, TrainConfig, TrainingAborted, font_draw, init_state, iteration_rng,
    objective, plan_step, rubbing_draw, train, train_step,
)


def params_equal(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_config_defaults_and_json_round_trip():
    cfg = TrainConfig()
    assert cfg.lr == 1e-2 and cfg.lambdas == (1.0, 1.0, 1.0) and cfg.batch_size == 2
    assert (cfg.n_neg_clusters, cfg.m_pos_clusters, cfg.obc_count) == (63, 3, 20)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert TrainConfig.from_dict({"lambdas": [1, 5, 1], "tau": 0.005}).lambdas == (1, 5, 1)


@pytest.mark.parametrize("tau", [0.1, 0.05, 0.01, 0.005])
def test_tau_sweep_accepted(tau):
    assert TrainConfig(tau=tau).tau == tau


@pytest.mark.parametrize("bad", [
    {"lr": 0}, {"tau": -1}, {"lambdas": (1, -1, 1)}, {"lambdas": (1, 1)},
    {"n_neg_clusters": 0}, {"obc_count": 2, "m_pos_clusters": 3}, {"denominator_mode": "x"},
    {"iterations": -1},
])
def test_config_validation(bad):
    with pytest.raises(InputError):
        TrainConfig(**bad)


def test_unknown_config_field():
    with pytest.raises(InputError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_draw_schedules():
    cfg = TrainConfig(batch_size=3, obc_count=7)
    assert rubbing_draw(cfg, 5, 0) == [0, 1, 2]
    assert rubbing_draw(cfg, 5, 1) == [3, 4, 0]
    a = font_draw(cfg, 4, iteration_rng(0, 3, 1))
    b = font_draw(cfg, 4, iteration_rng(0, 3, 1))
    assert len(a) == 7 and np.array_equal(a, b) and a.max() < 4


def test_iterations_zero_returns_initial(small_rubbing, small_font, small_config):
    cfg = dataclasses.replace(small_config, iterations=0)
    params, records = train(cfg, small_rubbing, small_font)
    assert records == []
    assert params_equal(params, netcore.init_params(3, cfg.seed))


def test_runs_are_bit_identical(small_rubbing, small_font, small_config):
    p1, r1 = train(small_config, small_rubbing, small_font)
    p2, r2 = train(small_config, small_rubbing, small_font)
    assert params_equal(p1, p2)
    assert [r.log_row() for r in r1] == [r.log_row() for r in r2]


def test_lambda1_zero_is_contrastive_disabled(small_rubbing, small_font, small_config):
    cfg = dataclasses.replace(small_config, lambdas=(0.0, 1.0, 1.0))
    p1, r1 = train(cfg, small_rubbing, small_font)
    p2, r2 = train(small_config, small_rubbing, small_font, contrastive=False)
    p3, r3 = train(cfg, small_rubbing, [])
    assert params_equal(p1, p2) and params_equal(p1, p3)
    totals = [r.report.total for r in r1]
    assert totals == [r.report.total for r in r2] == [r.report.total for r in r3]
    for r in r1:
        assert r.report.l_clus == 0 and r.neg_inertia == 0 and r.report.counts["neg_centers"] == 0
        assert r.report.total == r.report.l_class + r.report.l_box


def _plan(small_rubbing, font, cfg, params):
    batch = small_rubbing[:2]
    fwd = netcore.forward(params, np.stack([s.image for s in batch]))
    plan = plan_step(params, fwd, batch, font, cfg, iteration_rng(cfg.seed, 0))
    return fwd, plan


def _split(small_rubbing, font, cfg, params):
    fwd, plan = _plan(small_rubbing, font, cfg, params)
    return plan, objective(params, fwd, plan, cfg, split=True)


def _same_grads(a, b, part):
    return all(np.array_equal(a.component_grads[part][k], b.component_grads[part][k]) for k in a.grads)


def test_font_isolation_by_zeroing(small_rubbing, small_font, small_config):
    params = netcore.init_params(3, 1)
    zeroed = [ImageSample(np.zeros_like(s.image), s.boxes, Source.FONT) for s in small_font[:4]]
    plan_a, a = _split(small_rubbing, small_font[:4], small_config, params)
    plan_b, b = _split(small_rubbing, zeroed, small_config, params)
    assert "degenerate_pos_mean" in plan_b.flags
    for part in ("class", "box"):
        assert _same_grads(a, b, part)
    assert a.report.l_class == b.report.l_class and a.report.l_box == b.report.l_box
    assert a.report.l_clus != b.report.l_clus


def test_font_swap_leaves_detection_grads(small_rubbing, small_font, small_config):
    params = netcore.init_params(3, 1)
    _, a = _split(small_rubbing, small_font[:4], small_config, params)
    _, b = _split(small_rubbing, small_font[4:8], small_config, params)
    assert _same_grads(a, b, "class") and _same_grads(a, b, "box")
    assert not _same_grads(a, b, "clus")


def test_total_matches_components(small_rubbing, small_font, small_config):
    params = netcore.init_params(3, 2)
    cfg = dataclasses.replace(small_config, lambdas=(0.7, 2.0, 0.3))
    fwd, plan = _plan(small_rubbing, small_font[:4], cfg, params)
    o = objective(params, fwd, plan, cfg, split=True)
    r = o.report
    assert abs(r.total - (0.7 * r.l_clus + 2.0 * r.l_class + 0.3 * r.l_box)) <= 1e-9
    for k in params:
        combo = 0.7 * o.component_grads["clus"][k] + 2.0 * o.component_grads["class"][k] + 0.3 * o.component_grads["box"][k]
        assert np.allclose(o.grads[k], combo, rtol=1e-10, atol=1e-14)


def test_clamped_and_skipped_flags(small_rubbing, small_font, small_config):
    params = netcore.init_params(3, 2)
    cfg = dataclasses.replace(small_config, n_neg_clusters=10_000, m_pos_clusters=4, obc_count=4)
    _, plan = _plan(small_rubbing, small_font[:4], cfg, params)
    assert "clamped_neg" in plan.flags
    assert len(plan.neg_centers) < 10_000

    empty = [ImageSample(s.image, np.zeros((0, 4))) for s in small_rubbing[:2]]
    fwd = netcore.forward(params, np.stack([s.image for s in empty]))
    plan = plan_step(params, fwd, empty, small_font[:4], small_config, iteration_rng(0, 0))
    assert "no_samples" in plan.flags
    o = objective(params, fwd, plan, small_config)
    assert o.report.l_clus == 0 and o.report.skipped["clus"] and o.report.skipped["box"]


def test_negative_cap(small_rubbing, small_font, small_config):
    params = netcore.init_params(3, 2)
    cfg = dataclasses.replace(small_config, neg_per_image=5, n_neg_clusters=3)
    _, plan = _plan(small_rubbing, small_font[:4], cfg, params)
    assert plan.neg_centers.shape[0] == 3
    # class loss still sees every labelled negative
    assert all(len(ip.neg_idx) > 5 for ip in plan.images)


def test_record_is_pure_function_of_state(small_rubbing, small_font, small_config):
    state = init_state(small_config)
    batch = small_rubbing[:2]
    fonts = small_font[:4]
    _, rec1 = train_step(state, batch, fonts, small_config)
    state2 = init_state(small_config)
    _, rec2 = train_step(state2, batch, fonts, small_config)
    assert rec1.log_row() == rec2.log_row()
    assert len(rec1.log_row()) == len(IterationRecord.LOG_COLUMNS)


def test_counts_match_matching(small_rubbing, small_font, small_config):
    _, records = train(small_config, small_rubbing, small_font)
    for r in records:
        c = r.report.counts
        assert c["samples"] == c["pos_anchors"] > 0
        assert c["neg_centers"] == small_config.n_neg_clusters
        assert c["pos_centers"] == small_config.m_pos_clusters


def test_non_finite_aborts(small_rubbing, small_font, small_config):
    cfg = dataclasses.replace(small_config, lr=1e12, iterations=30)
    with pytest.raises(TrainingAborted) as err:
        train(cfg, small_rubbing, small_font)
    assert isinstance(err.value.records, list)


def test_empty_inputs(small_rubbing, small_config):
    with pytest.raises(InputError):
        train(small_config, [], [])
    with pytest.raises(InputError):
        train(small_config, small_rubbing, [])


def _pattern(fwd):
    return [(active.copy(), arg.copy()) for _, _, active, arg in fwd.cache]


def _same_pattern(a, b):
    return all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


@pytest.mark.parametrize("mode", ["infonce", "negatives_only"])
def test_objective_gradient_matches_central_differences(small_rubbing, small_font, small_config, mode):
    cfg = dataclasses.replace(small_config, lambdas=(1.0, 0.5, 2.0), tau=0.05, denominator_mode=mode)
    params = netcore.init_params(3, 4)
    rng = np.random.default_rng(0)
    for k in params:
        if k.endswith("bias"):
            params[k] = rng.normal(0, 0.05, params[k].shape)
    batch = small_rubbing[:2]
    images = np.stack([s.image for s in batch])
    fwd = netcore.forward(params, images)
    plan = plan_step(params, fwd, batch, small_font[:4], cfg, iteration_rng(cfg.seed, 0))
    grads = objective(params, fwd, plan, cfg).grads

    h, checked = 1e-6, 0
    for name in netcore.PARAM_NAMES:
        flat = params[name].ravel()
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            vals, pats = [], []
            for sign in (1, -1):
                p = {k: v.copy() for k, v in params.items()}
                p[name].ravel()[idx] += sign * h
                f = netcore.forward(p, images)
                pats.append(_pattern(f))
                vals.append(objective(p, f, plan, cfg).report.total)
            if not _same_pattern(*pats):
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            an = grads[name].ravel()[idx]
            # floor: central differences of an O(1) loss resolve about 1e-9 at this step
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an), 1e-3), (name, idx, fd, an)
            checked += 1
    assert checked >= 24
