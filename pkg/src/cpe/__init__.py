"""Complementary logit-adjusted experts with classwise batch norm for long-tailed SSL."""

from .data import SplitSpec, SplitResult, build_split, imbalance_ratio, longtail_counts
from .losses import LossBundle, Prior, TauTriple
from .model import ClassGroups, CPEModel, build_model, partition_classes, predict
from .trainer import TrainConfig, TrainData, fit, train_step

__all__ = [
    "ClassGroups", "CPEModel", "LossBundle", "Prior", "SplitResult", "SplitSpec",
    "TauTriple", "TrainConfig", "TrainData", "build_model", "build_split", "fit",
    "imbalance_ratio", "longtail_counts", "partition_classes", "predict", "train_step",
]
