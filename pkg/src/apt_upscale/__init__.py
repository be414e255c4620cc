"""Patch-based latent upscaling with statistical matching and scale-aware noise schedules."""

from .diffuse import DenoiserSpec, ddim_step, forward_chain, forward_to, gaussian_eps, gmm_eps
from .grid import GridStats, LatentGrid, SeedKey, make_grid, sample_gaussian, stats
from .pipeline import PipelineConfig, RunReport, run_apt
from .resample import dilated_fuse, dilated_split, local_extract, local_fuse, local_layout, upsample
from .schedule import NoiseSchedule, build_schedule, build_substeps
from .statmatch import match_all_dilated, match_stats

__version__ = "0.1.0"

__all__ = [
    "DenoiserSpec",
    "GridStats",
    "LatentGrid",
    "NoiseSchedule",
    "PipelineConfig",
    "RunReport",
    "SeedKey",
    "build_schedule",
    "build_substeps",
    "ddim_step",
    "dilated_fuse",
    "dilated_split",
    "forward_chain",
    "forward_to",
    "gaussian_eps",
    "gmm_eps",
    "local_extract",
    "local_fuse",
    "local_layout",
    "make_grid",
    "match_all_dilated",
    "match_stats",
    "run_apt",
    "sample_gaussian",
    "stats",
    "upsample",
]
