"""Region-controlled 360-degree panorama diffusion orchestration."""

from .backend import MockCodec, MockDenoiser, RemoteDenoiser, Scheduler, init_noise
from .config import PipelineConfig, config_hash
from .fusion import BootstrapPlan, PathSet, assign_bootstrap_colors, md_step, merge_paths
from .geometry import CameraPose, ErpGrid
from .layout import Layout, RegionSpec, background_region, effective_global_prompt, validate
from .mpf import mpf_sample
from .mstd import mstd_sample

__version__ = "0.1.0"

__all__ = [
    "BootstrapPlan",
    "CameraPose",
    "ErpGrid",
    "Layout",
    "MockCodec",
    "MockDenoiser",
    "PathSet",
    "PipelineConfig",
    "RegionSpec",
    "RemoteDenoiser",
    "Scheduler",
    "assign_bootstrap_colors",
    "background_region",
    "config_hash",
    "effective_global_prompt",
    "init_noise",
    "md_step",
    "merge_paths",
    "mpf_sample",
    "mstd_sample",
    "validate",
]
