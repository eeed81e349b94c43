"""Clustering-guided contrastive representation learning for single-class
glyph detection, in plain numpy.

Main entry points: :class:`ClusterContrastDetector` (fit/predict/score),
:func:`~clusterdet.trainer.train`, the clustering estimators
:class:`KMeans` / :class:`DBSCAN`, and :class:`PCA2D`.
"""

from .clustering import DBSCAN, ClusterSpec, KMeans, fit_clusters
from .dataset import GenSpec, ImageSample, Source, generate, load_dataset, save_dataset
from .errors import FormatError, InputError, NumericError
from .estimator import ClusterContrastDetector
from .evaluation import PCA2D, MetricsReport, average_precision, embed_2d, infer
from .geometry import Box, MatchPolicy, box_iou, iou, nms
from .losses import clus_loss
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DBSCAN", "PCA2D", "Box", "ClusterContrastDetector", "ClusterSpec", "FormatError",
    "GenSpec", "ImageSample", "InputError", "KMeans", "MatchPolicy", "MetricsReport",
    "NumericError", "Source", "TrainConfig", "average_precision", "box_iou", "clus_loss",
    "embed_2d", "fit_clusters", "generate", "infer", "iou", "load_dataset", "nms",
    "save_dataset", "train",
]
