"""Adaptive reward-weighting gains for constrained policy learning."""

from .core import (
    AdapterKind,
    AdapterState,
    ChannelSample,
    ConfigError,
    ConstraintSpec,
    GainVector,
    PenaltyEstimate,
    combine_advantages,
    combine_reward,
    estimate_penalties,
    roger_gains,
)
from .triallog import TrialLog

__version__ = "0.1.0"

__all__ = [
    "AdapterKind",
    "AdapterState",
    "ChannelSample",
    "ConfigError",
    "ConstraintSpec",
    "GainVector",
    "PenaltyEstimate",
    "TrialLog",
    "combine_advantages",
    "combine_reward",
    "estimate_penalties",
    "roger_gains",
]
