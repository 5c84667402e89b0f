"""Multi-antenna IRSA grant-free random access: Monte Carlo + density evolution."""

from .scenario import (
    DegreeDistribution,
    FrameRealization,
    SystemConfig,
    path_loss,
    sample_apm,
    soliton_distribution,
    synthesize_frame,
    transmit_power,
)
from .sic import DecodeOutcome, decode_frame, monte_carlo_throughput

__all__ = [
    "DegreeDistribution",
    "FrameRealization",
    "SystemConfig",
    "DecodeOutcome",
    "path_loss",
    "sample_apm",
    "soliton_distribution",
    "synthesize_frame",
    "transmit_power",
    "decode_frame",
    "monte_carlo_throughput",
]
