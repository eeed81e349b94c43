"""sklearn-style wrapper around the training loop and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import netcore
from .dataset import ImageSample, Source
from .errors import InputError
from .evaluation import average_precision, collect_features, infer
from .geometry import MatchPolicy
from .trainer import DEFAULT_CLUSTER_METHOD, TrainConfig, train
from .validation import check_boxes, check_image


def _as_samples(X, y, source):
    """Accept a list of ``ImageSample`` or images ``X`` with box lists ``y``."""
    if len(X) and isinstance(X[0], ImageSample):
        return list(X)
    if y is None:
        raise InputError("y (boxes per image) is required when X holds raw images")
    if len(X) != len(y):
        raise InputError(f"X has {len(X)} images but y has {len(y)} box lists")
    return [
        ImageSample(check_image(img)[0], check_boxes(b, "y"), Source(source), f"{source}_{i:05d}")
        for i, (img, b) in enumerate(zip(X, y))
    ]


class ClusterContrastDetector(BaseEstimator):
    """Single-class anchor detector trained with an optional clustering-based
    contrastive term anchored on font-library glyphs.

    Constructor arguments mirror :class:`~clusterdet.trainer.TrainConfig`.
    ``lambdas[0] == 0`` trains the plain detector.

    Attributes after ``fit``: ``params_`` (weight dict), ``history_`` (one
    :class:`~clusterdet.trainer.IterationRecord` per step), ``config_``.
    """

    def __init__(
        self,
        lr=1e-2,
        momentum=0.9,
        weight_decay=1e-4,
        lambdas=(1.0, 1.0, 1.0),
        tau=0.1,
        n_neg_clusters=63,
        m_pos_clusters=3,
        obc_count=20,
        match_policy=MatchPolicy(),
        cluster_method=DEFAULT_CLUSTER_METHOD,
        batch_size=2,
        iterations=500,
        seed=0,
        normalize_features=True,
        denominator_mode="infonce",
        anchor_sizes=(16, 24, 32),
        neg_per_image=256,
        score_thresh=0.05,
        nms_thresh=0.5,
    ):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lambdas = lambdas
        self.tau = tau
        self.n_neg_clusters = n_neg_clusters
        self.m_pos_clusters = m_pos_clusters
        self.obc_count = obc_count
        self.match_policy = match_policy
        self.cluster_method = cluster_method
        self.batch_size = batch_size
        self.iterations = iterations
        self.seed = seed
        self.normalize_features = normalize_features
        self.denominator_mode = denominator_mode
        self.anchor_sizes = anchor_sizes
        self.neg_per_image = neg_per_image
        self.score_thresh = score_thresh
        self.nms_thresh = nms_thresh

    def _config(self) -> TrainConfig:
        params = self.get_params()
        for k in ("score_thresh", "nms_thresh"):
            params.pop(k)
        return TrainConfig(**params)

    def fit(self, X, y=None, font=None, font_boxes=None):
        """Train on rubbing images ``X`` (boxes ``y``) and font images ``font``."""
        config = self._config()
        rubbing = _as_samples(X, y, "rubbing")
        glyphs = [] if font is None else _as_samples(font, font_boxes, "font")
        self.params_, self.history_ = train(config, rubbing, glyphs)
        self.config_ = config
        return self

    def predict(self, X):
        """Detections (a ``DetectionResult``) for each image in ``X``."""
        check_is_fitted(self, "params_")
        images = [s.image if isinstance(s, ImageSample) else s for s in X]
        return [
            infer(self.params_, check_image(img)[0], self.config_.anchor_sizes,
                  self.score_thresh, self.nms_thresh)
            for img in images
        ]

    def score(self, X, y=None):
        """AP at IoU 0.5 over ``X``."""
        samples = _as_samples(X, y, "rubbing")
        report = average_precision(self.predict(samples), [s.boxes for s in samples])
        return report.AP50

    def evaluate(self, X, y=None, score_thresh=0.5):
        """Full :class:`~clusterdet.evaluation.MetricsReport`."""
        samples = _as_samples(X, y, "rubbing")
        return average_precision(
            self.predict(samples), [s.boxes for s in samples], score_thresh=score_thresh
        )

    def features(self, X, y=None, font=None, font_boxes=None, seed=0):
        """Role-tagged pooled anchor features: ``(roles, matrix)``."""
        check_is_fitted(self, "params_")
        rubbing = _as_samples(X, y, "rubbing")
        glyphs = [] if font is None else _as_samples(font, font_boxes, "font")
        return collect_features(self.params_, rubbing, glyphs, self.config_, seed)

    def save(self, path):
        check_is_fitted(self, "params_")
        netcore.save_checkpoint(self.params_, path)

    @property
    def n_parameters_(self) -> int:
        check_is_fitted(self, "params_")
        return int(sum(np.size(v) for v in self.params_.values()))
