"""Multivariate functional linear discriminant analysis for short, irregular,
incomplete time series."""

from .classify import ClassScores, Embedding, class_scores, embed, predict
from .data import Dataset, Sample, read_dataset, write_dataset
from .model import FitConfig, FittedModel, ModelParams, fit, log_likelihood

__all__ = [
    "ClassScores",
    "Dataset",
    "Embedding",
    "FitConfig",
    "FittedModel",
    "ModelParams",
    "Sample",
    "class_scores",
    "embed",
    "fit",
    "log_likelihood",
    "predict",
    "read_dataset",
    "write_dataset",
]

__version__ = "0.1.0"
