"""Adversarial heatmap pose estimation with a graph-structured discriminator.

A self-contained desk-scale pipeline: a from-scratch autodiff tensor engine,
a cascade-feature heatmap generator, a gated-graph-network discriminator
over the joint skeleton, alternating adversarial training, synthetic
stick-figure data, and PCK/PCKh/OKS evaluation with occlusion-stratified
reports.
"""

from . import autodiff, checks, data, ggnn, heatmaps, metrics, models, skeleton, trainer
from .autodiff import Tensor

__all__ = [
    "Tensor",
    "autodiff",
    "checks",
    "data",
    "ggnn",
    "heatmaps",
    "metrics",
    "models",
    "skeleton",
    "trainer",
]

__version__ = "0.1.0"
