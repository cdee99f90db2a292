"""Deformable 2D image registration with a learned semantic similarity
metric, plus the baselines, synthetic benchmark, and evaluation protocol."""

from .core import DisplacementField, Image, LabelMap, Rng
from .similarity import MetricKind, parse_metric, registration_loss

__all__ = [
    "DisplacementField",
    "Image",
    "LabelMap",
    "MetricKind",
    "Rng",
    "parse_metric",
    "registration_loss",
]
