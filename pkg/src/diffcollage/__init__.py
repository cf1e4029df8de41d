"""Compose small diffusion score models over a factor graph to sample large content."""

from .collage import ComposedScore, NodeBinding, composed_gaussian_oracle, composed_score
from .graph import (
    FactorGraph,
    NodeRef,
    bethe_coefficients,
    bethe_entropy,
    build_chain,
    build_cubemap,
    build_custom,
    build_cycle,
    build_grid,
    validate,
)
from .sampler import SamplerConfig, sample, sample_batch
from .schedule import NoiseSchedule, TimeGrid, karras_grid

__all__ = [
    "ComposedScore",
    "FactorGraph",
    "NodeBinding",
    "NodeRef",
    "NoiseSchedule",
    "SamplerConfig",
    "TimeGrid",
    "bethe_coefficients",
    "bethe_entropy",
    "build_chain",
    "build_cubemap",
    "build_custom",
    "build_cycle",
    "build_grid",
    "composed_gaussian_oracle",
    "composed_score",
    "karras_grid",
    "sample",
    "sample_batch",
    "validate",
]
