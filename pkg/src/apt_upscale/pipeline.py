"""Progressive patch-based upscaling with statistical matching and scale-aware schedules.

Phase 1 samples a base-resolution reference latent with plain DDIM. Each later
stage ``s`` upsamples the previous latent to ``s`` times the base size per
side, re-normalises its dilated patches to the reference statistics, diffuses
it forward only up to the shortcut timestep under an ``eta``-adjusted
schedule, and then denoises with two patch paths:

* local path: overlapping base-size crops, stepped with the scale-aware
  schedule and fused by coverage averaging;
* dilated path: strided sub-grids, stepped with the pretrained schedule.

The two reconstructions are blended by a cosine-decaying weight, and a skip
residual pulls each step's input towards the forward-diffused latent.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .diffuse import DenoiserSpec, ddim_step, forward_path, forward_trajectory
from .grid import GridStats, LatentGrid, NonFiniteError, Purpose, SeedKey, channel_stats, sample_gaussian, stats
from .resample import (
    DilatedLayout,
    PatchLayout,
    dilated_fuse,
    dilated_layout,
    dilated_split,
    local_extract,
    local_fuse,
    local_layout,
    upsample,
)
from .schedule import (
    DEFAULT_BETA0,
    DEFAULT_BETAT,
    DEFAULT_ETA_TABLE,
    DEFAULT_T,
    NoiseSchedule,
    build_schedule,
    build_substeps,
    eta_for_ratio,
)
from .statmatch import match_all_dilated_flagged

__all__ = [
    "PipelineConfig",
    "PipelineAbort",
    "StageRecord",
    "RunReport",
    "cosine_decay",
    "blend_weights",
    "skip_residual",
    "generate_reference",
    "denoise_window",
    "upscale_stage",
    "run_apt",
    "SCHEMA_VERSION",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class PipelineAbort(RuntimeError):
    """Raised when a run cannot continue; ``report`` holds what was finished."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PipelineConfig:
    height: int = 64
    width: int = 64
    channels: int = 4
    scale: int = 2
    n_steps: int = 50
    t0: int = 30
    overlap: float = 0.5
    beta0: float = DEFAULT_BETA0
    betaT: float = DEFAULT_BETAT
    T: int = DEFAULT_T
    eta_table: dict = field(default_factory=lambda: dict(DEFAULT_ETA_TABLE))
    eta_overrides: dict = field(default_factory=dict)
    lambda1_exponent: float = 1.0
    lambda2_exponent: float = 1.0
    # constant blend weights instead of the cosine decay
    lambda1: Optional[float] = None
    lambda2: Optional[float] = None
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    seed: int = 0
    upsampler: str = "bicubic"
    statistical_matching: bool = True
    per_channel_matching: bool = False
    sm_reference: str = "phase1"
    patch_height: Optional[int] = None
    patch_width: Optional[int] = None
    fusion_weighting: str = "uniform"
    # "chain": one-step Markov chain; "shared": closed form with one noise draw
    trajectory: str = "chain"
    workers: int = 1

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError("base dimensions must be positive")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 1 <= self.t0 <= self.n_steps <= self.T:
            raise ValueError(f"need 1 <= t0 <= n_steps <= T, got t0={self.t0}, n_steps={self.n_steps}, T={self.T}")
        if not 0 < self.overlap < 1:
            raise ValueError("overlap must be in (0, 1)")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lambda1_exponent <= 0 or self.lambda2_exponent <= 0:
            raise ValueError("lambda exponents must be positive")
        if self.sm_reference not in ("phase1", "previous"):
            raise ValueError("sm_reference must be 'phase1' or 'previous'")
        if self.upsampler not in ("bicubic", "nearest"):
            raise ValueError(f"unknown upsampler {self.upsampler!r}")
        if self.trajectory not in ("chain", "shared"):
            raise ValueError("trajectory must be 'chain' or 'shared'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def local_patch(self) -> tuple[int, int]:
        return (self.patch_height or self.height, self.patch_width or self.width)

    def stage_eta(self, s: int) -> float:
        if s in self.eta_overrides:
            return float(self.eta_overrides[s])
        return eta_for_ratio(s / (s - 1), self.eta_table)

    def pretrained_schedule(self) -> NoiseSchedule:
        return build_schedule(self.beta0, self.betaT, self.T, 1.0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        d["eta_table"] = {f"{k:.6g}": v for k, v in self.eta_table.items()}
        d["eta_overrides"] = {str(k): v for k, v in self.eta_overrides.items()}
        return d


@dataclass
class StageRecord:
    stage: int
    dims: tuple[int, int, int]
    eta: float
    ratio: float
    start_timestep: int
    local_patches: int
    dilated_patches: int
    calls_local: int = 0
    calls_dilated: int = 0
    degenerate_patches: list = field(default_factory=list)
    sm_max_deviation: float = 0.0
    step_stats: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def denoiser_calls(self) -> int:
        return self.calls_local + self.calls_dilated

    def to_dict(self, timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["denoiser_calls"] = self.denoiser_calls
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class RunReport:
    config: PipelineConfig
    reference_stats: Optional[GridStats] = None
    phase1: Optional[StageRecord] = None
    stages: list = field(default_factory=list)
    grids: dict = field(default_factory=dict)
    aborted: bool = False
    error: Optional[str] = None

    @property
    def final(self) -> Optional[LatentGrid]:
        return self.grids[max(self.grids)] if self.grids else None

    @property
    def total_denoiser_calls(self) -> int:
        recs = ([self.phase1] if self.phase1 else []) + self.stages
        return sum(r.denoiser_calls for r in recs)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "reference_stats": dataclasses.asdict(self.reference_stats) if self.reference_stats else None,
            "phase1": self.phase1.to_dict(timing) if self.phase1 else None,
            "stages": [s.to_dict(timing) for s in self.stages],
            "total_denoiser_calls": self.total_denoiser_calls,
            "aborted": self.aborted,
            "error": self.error,
        }
        if self.final is not None:
            d["final_stats"] = dataclasses.asdict(stats(self.final))
            d["final_dims"] = list(self.final.shape)
        return d


# -- blend weights -----------------------------------------------------------


def cosine_decay(t: float, T0: float, exponent: float = 1.0) -> float:
    """``((1 + cos(pi (T0 - t) / T0)) / 2) ** exponent``; 1 at ``t = T0``, 0 at ``t = 0``."""
    if T0 <= 0:
        raise ValueError("T0 must be positive")
    if not 0 <= t <= T0:
        raise ValueError(f"t = {t} outside [0, {T0}]")
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    base = (1.0 + math.cos(math.pi * (T0 - t) / T0)) / 2.0
    # cos(pi) is not exactly -1 in floating point
    if t == 0:
        base = 0.0
    return base**exponent


def blend_weights(n: int, exponent: float = 1.0, constant: Optional[float] = None) -> list[float]:
    """Per-iteration weights over an ``n``-step loop, decaying from 1 to 0."""
    if constant is not None:
        return [float(constant)] * n
    if n == 1:
        return [1.0]
    return [cosine_decay(n - 1 - j, n - 1, exponent) for j in range(n)]


def skip_residual(z_diffused: LatentGrid, z_denoised: LatentGrid, lambda1: float) -> LatentGrid:
    if z_diffused.shape != z_denoised.shape:
        raise ValueError(f"shape mismatch {z_diffused.shape} vs {z_denoised.shape}")
    if not 0 <= lambda1 <= 1:
        raise ValueError("lambda1 must lie in [0, 1]")
    if lambda1 == 1.0:
        return z_diffused
    if lambda1 == 0.0:
        return z_denoised
    return LatentGrid(lambda1 * z_diffused.values + (1.0 - lambda1) * z_denoised.values)


# -- phase 1 -----------------------------------------------------------------


def generate_reference(
    config: PipelineConfig,
    key: Optional[SeedKey] = None,
    schedule: Optional[NoiseSchedule] = None,
) -> tuple[LatentGrid, GridStats]:
    z, st, _ = _generate_reference(config, key, schedule)
    return z, st


def _generate_reference(config, key=None, schedule=None):
    t_start = time.perf_counter()
    key = key or SeedKey(config.seed, stage=1, purpose=Purpose.INIT)
    schedule = schedule or config.pretrained_schedule()
    steps = build_substeps(schedule.T, config.n_steps)
    z = sample_gaussian(config.height, config.width, config.channels, key)
    rec = StageRecord(
        stage=1,
        dims=z.shape,
        eta=schedule.eta,
        ratio=1.0,
        start_timestep=steps.timesteps[0],
        local_patches=1,
        dilated_patches=0,
    )
    for t, t_prev in steps.pairs(shortcut=False):
        z = ddim_step(z, config.denoiser(z, t, schedule), schedule, t, t_prev)
        rec.calls_local += 1
        st = stats(z)
        rec.step_stats.append({"t": t_prev, "mean": st.mean, "std": st.std})
    rec.wall_time = time.perf_counter() - t_start
    return z, stats(z), rec


# -- phase 2 -----------------------------------------------------------------


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def denoise_window(
    z_start: LatentGrid,
    diffused: dict,
    pairs: Sequence[tuple[int, int]],
    local: PatchLayout,
    dilated: DilatedLayout,
    local_schedule: NoiseSchedule,
    dilated_schedule: NoiseSchedule,
    denoiser: DenoiserSpec,
    lambda1: Sequence[float],
    lambda2: Sequence[float],
    workers: int = 1,
    record: Optional[StageRecord] = None,
) -> LatentGrid:
    """Dual-path denoising loop over ``pairs`` of ``(t, t_prev)``.

    ``diffused[t]`` is the forward-diffused latent used by the skip residual.
    """
    z = z_start
    for j, (t, t_prev) in enumerate(pairs):
        z_hat = skip_residual(diffused[t], z, lambda1[j])

        def local_step(p, t=t, t_prev=t_prev):
            return ddim_step(p, denoiser(p, t, local_schedule), local_schedule, t, t_prev)

        def dilated_step(p, t=t, t_prev=t_prev):
            return ddim_step(p, denoiser(p, t, dilated_schedule), dilated_schedule, t, t_prev)

        local_patches = local_extract(z_hat, local)
        dilated_patches = dilated_split(z_hat, dilated)
        fused_local = local_fuse(_map(local_step, local_patches, workers), local)
        fused_dilated = dilated_fuse(_map(dilated_step, dilated_patches, workers), dilated)
        w = lambda2[j]
        if w == 0.0:
            z = fused_local
        elif w == 1.0:
            z = fused_dilated
        else:
            z = LatentGrid(w * fused_dilated.values + (1.0 - w) * fused_local.values)
        if record is not None:
            record.calls_local += len(local_patches)
            record.calls_dilated += len(dilated_patches)
            st = stats(z)
            record.step_stats.append(
                {"t": t_prev, "mean": st.mean, "std": st.std, "lambda1": lambda1[j], "lambda2": w}
            )
    return z


def _reference_for(config, ref_stats, z_prev):
    if config.sm_reference == "previous":
        return channel_stats(z_prev) if config.per_channel_matching else stats(z_prev)
    return ref_stats


def upscale_stage(
    z_prev: LatentGrid,
    s: int,
    config: PipelineConfig,
    ref_stats,
    key: Optional[SeedKey] = None,
) -> tuple[LatentGrid, StageRecord]:
    """Upscale ``z_prev`` from ``(s - 1)`` to ``s`` times the base size per side.

    ``ref_stats`` is a :class:`GridStats`, or a list of them when
    ``config.per_channel_matching`` is on.
    """
    if s < 2:
        raise ValueError("stages start at s = 2")
    h, w, c = config.height, config.width, config.channels
    if z_prev.shape != (h * (s - 1), w * (s - 1), c):
        raise ValueError(f"stage {s} expects input {(h * (s - 1), w * (s - 1), c)}, got {z_prev.shape}")
    t_start = time.perf_counter()
    key = key or SeedKey(config.seed, stage=s)
    H, W = h * s, w * s

    up = upsample(z_prev, H, W, config.upsampler)
    dl = dilated_layout(H, W, h, w)
    ph, pw = config.local_patch
    ll = local_layout(H, W, ph, pw, config.overlap, config.fusion_weighting)

    eta = config.stage_eta(s)
    sched_hat = build_schedule(config.beta0, config.betaT, config.T, eta)
    sched_pre = config.pretrained_schedule()
    steps = build_substeps(config.T, config.n_steps, config.t0)
    pairs = steps.pairs()

    rec = StageRecord(
        stage=s,
        dims=(H, W, c),
        eta=eta,
        ratio=s / (s - 1),
        start_timestep=steps.start_timestep,
        local_patches=ll.patch_count,
        dilated_patches=dl.patch_count,
    )

    if config.statistical_matching:
        reference = _reference_for(config, ref_stats, z_prev)
        z0, rec.degenerate_patches = match_all_dilated_flagged(up, dl, reference)
        if isinstance(reference, GridStats):
            rec.sm_max_deviation = max(
                max(abs(p.mean - reference.mean), abs(p.std - reference.std))
                for p in map(stats, dilated_split(z0, dl))
            )
    else:
        z0 = up

    if config.trajectory == "chain":
        _, diffused = forward_trajectory(z0, sched_hat, steps.start_timestep, key, record=steps.window)
    else:
        noise = sample_gaussian(H, W, c, dataclasses.replace(key, purpose=Purpose.FORWARD))
        diffused = forward_path(z0, sched_hat, steps.window, noise)
    n = len(pairs)
    lam1 = blend_weights(n, config.lambda1_exponent, config.lambda1)
    lam2 = blend_weights(n, config.lambda2_exponent, config.lambda2)
    z = denoise_window(
        diffused[steps.start_timestep],
        diffused,
        pairs,
        ll,
        dl,
        sched_hat,
        sched_pre,
        config.denoiser,
        lam1,
        lam2,
        workers=config.workers,
        record=rec,
    )
    rec.wall_time = time.perf_counter() - t_start
    return z, rec


def run_apt(config: PipelineConfig) -> RunReport:
    """Phase 1 followed by stages ``2..config.scale``.

    On failure a :class:`PipelineAbort` is raised carrying the partial report.
    """
    report = RunReport(config)
    stage = 1
    try:
        z, ref, report.phase1 = _generate_reference(config)
        if config.per_channel_matching:
            ref = channel_stats(z)
        report.reference_stats = stats(z)
        report.grids[1] = z
        for stage in range(2, config.scale + 1):
            log.info("stage %d: %dx%d", stage, config.height * stage, config.width * stage)
            z, rec = upscale_stage(z, stage, config, ref)
            report.stages.append(rec)
            report.grids[stage] = z
    except NonFiniteError as exc:
        report.aborted = True
        report.error = f"non-finite values in stage {stage}: {exc}"
        raise PipelineAbort(report.error, report) from exc
    return report
