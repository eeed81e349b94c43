import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clusterdet import ClusterContrastDetector, netcore
from clusterdet.errors import InputError


@pytest.fixture
def tiny():
    return dict(iterations=3, obc_count=4, n_neg_clusters=8, m_pos_clusters=2, seed=2)


def test_get_params_and_clone(tiny):
    est = ClusterContrastDetector(tau=0.05, **tiny)
    params = est.get_params()
    assert params["tau"] == 0.05 and params["iterations"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lambdas=(0.0, 1.0, 1.0))
    assert est._config().contrastive is False


def test_invalid_params_raise_on_fit(small_rubbing, small_font):
    with pytest.raises(InputError):
        ClusterContrastDetector(tau=0).fit(small_rubbing, font=small_font)


def test_fit_predict_score(small_rubbing, small_font, tiny, tmp_path):
    est = ClusterContrastDetector(**tiny).fit(small_rubbing, font=small_font)
    assert len(est.history_) == 3
    preds = est.predict(small_rubbing[:2])
    assert len(preds) == 2 and all(np.all(np.diff(p.scores) <= 0) for p in preds)
    assert 0.0 <= est.score(small_rubbing) <= 1.0
    rep = est.evaluate(small_rubbing)
    assert rep.AP50 == est.score(small_rubbing)
    est.save(tmp_path / "m.ckpt")
    loaded = netcore.load_checkpoint(tmp_path / "m.ckpt")
    assert all(np.array_equal(loaded[k], est.params_[k]) for k in loaded)
    assert est.n_parameters_ == netcore.flatten(est.params_).size


def test_raw_arrays_match_samples(small_rubbing, small_font, tiny):
    a = ClusterContrastDetector(**tiny).fit(small_rubbing, font=small_font)
    b = ClusterContrastDetector(**tiny).fit(
        [s.image for s in small_rubbing], [s.boxes for s in small_rubbing],
        font=[s.image for s in small_font], font_boxes=[s.boxes for s in small_font],
    )
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)


def test_errors(small_rubbing, tiny):
    est = ClusterContrastDetector(**tiny)
    with pytest.raises(NotFittedError):
        est.predict([small_rubbing[0].image])
    with pytest.raises(InputError):
        est.fit([s.image for s in small_rubbing])
    with pytest.raises(InputError):
        est.fit([s.image for s in small_rubbing], [s.boxes for s in small_rubbing[:2]])


def test_plain_detector_needs_no_font(small_rubbing, tiny):
    est = ClusterContrastDetector(lambdas=(0.0, 1.0, 1.0), **tiny).fit(small_rubbing)
    assert all(r.report.l_clus == 0 for r in est.history_)
    roles, x = est.features(small_rubbing[:2])
    assert set(roles) <= {"sample", "negative"} and len(x) == len(roles)
