"""CLI, experiment commands, configuration and plots."""

from .config import RunConfig, load_config
from .commands import (
    affine_clone,
    cmd_aggregate,
    cmd_ard_report,
    cmd_identifiability,
    cmd_plot,
    cmd_sample,
    cmd_synth,
    cmd_train,
)

__all__ = [
    "RunConfig",
    "load_config",
    "affine_clone",
    "cmd_synth",
    "cmd_train",
    "cmd_aggregate",
    "cmd_identifiability",
    "cmd_ard_report",
    "cmd_sample",
    "cmd_plot",
]
