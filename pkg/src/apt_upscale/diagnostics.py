"""Analysis helpers: pixel self-similarity, dilated-patch statistic drift,
variance-scaling Monte Carlo, schedule curves and parameter sweeps.
"""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffuse import forward_chain
from .grid import GridError, LatentGrid, Purpose, SeedKey, channel_stats, stats
from .pipeline import PipelineConfig, _reference_for, generate_reference, upscale_stage
from .resample import DilatedLayout, dilated_layout, dilated_split, upsample
from .schedule import NoiseSchedule, build_schedule, shifted_alpha_bar
from .statmatch import match_all_dilated

__all__ = [
    "texture_corpus",
    "center_crop",
    "SelfSimReport",
    "self_similarity",
    "ZoomReport",
    "zoom_self_similarity",
    "ShiftReport",
    "dilated_shift_report",
    "VarianceScalingReport",
    "variance_scaling_check",
    "CurveSpec",
    "CurveTable",
    "schedule_curves",
    "curves_csv",
    "eta_sweep",
    "shortcut_sweep",
]


# -- procedural textures -------------------------------------------------------


def _checker(n, cell, noise, rng):
    ii, jj = np.indices((n, n))
    parity = (ii // cell + jj // cell) % 2
    m = -(-n // cell)
    # per-cell brightness jitter; a pure two-level board looks the same at every zoom
    jitter = rng.uniform(-0.25, 0.25, (m, m))[ii // cell, jj // cell]
    return np.clip(0.25 + 0.5 * parity + jitter + noise * rng.standard_normal((n, n)), 0.0, 1.0)


def _value_noise(n, cells, octaves, rng):
    acc = np.zeros((n, n))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        m = cells * 2**o
        lattice = LatentGrid(rng.random((m, m)))
        acc += amp * upsample(lattice, n, n).values[:, :, 0] if m < n else amp * rng.random((n, n))
        total += amp
        amp *= 0.5
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo)


def _ramp(n, rng):
    ii, jj = np.indices((n, n)) / (n - 1)
    phase = rng.random()
    return np.clip(0.5 * (ii + jj) * 0.9 + 0.05 + 0.02 * np.sin(2 * np.pi * (ii * 3 + phase)), 0.0, 1.0)


def texture_corpus(size: int = 64, channels: int = 3, seed: int = 0) -> dict[str, LatentGrid]:
    """Fixed procedural textures with values in [0, 1].

    ``checker`` is a 4-pixel checkerboard with random per-cell brightness and
    additive noise, ``value_noise`` is multi-octave lattice noise and ``ramp``
    is a diagonal gradient with a faint ripple.
    """
    out = {}
    makers = {
        "checker": lambda rng: _checker(size, 4, 0.05, rng),
        "value_noise": lambda rng: _value_noise(size, 4, 4, rng),
        "ramp": lambda rng: _ramp(size, rng),
    }
    for idx, (name, make) in enumerate(makers.items()):
        planes = []
        for c in range(channels):
            rng = SeedKey(seed, stage=idx, patch_index=c, purpose=Purpose.CORPUS).generator()
            planes.append(make(rng))
        out[name] = LatentGrid(np.stack(planes, axis=-1))
    return out


def center_crop(grid: LatentGrid, h: int, w: Optional[int] = None) -> LatentGrid:
    w = h if w is None else w
    H, W, _ = grid.shape
    if h > H or w > W:
        raise GridError(f"crop {h}x{w} larger than grid {H}x{W}")
    i, j = (H - h) // 2, (W - w) // 2
    return LatentGrid(grid.values[i : i + h, j : j + w])


# -- self-similarity -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SelfSimReport:
    sample_n: tuple[int, int]
    matrix: np.ndarray = field(repr=False)
    mean: float

    def to_dict(self) -> dict:
        return {"sample_dims": list(self.sample_n), "mean_similarity": self.mean}


def _nearest_resize(v, n):
    h, w = v.shape[:2]
    ri = (np.arange(n) * h) // n
    ci = (np.arange(n) * w) // n
    return v[ri][:, ci]


def _normalize(v, value_range):
    if value_range is not None:
        lo, hi = value_range
        return np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    lo = v.min(axis=(0, 1), keepdims=True)
    span = v.max(axis=(0, 1), keepdims=True) - lo
    return np.where(span > 0, (v - lo) / np.where(span > 0, span, 1.0), 0.0)


def self_similarity(
    patch: LatentGrid, sample_n: Optional[int] = 32, value_range: Optional[tuple[float, float]] = None
) -> SelfSimReport:
    """Pairwise pixel similarity ``1 - ||x_i - x_j|| / sqrt(C)`` over a patch.

    Values are mapped to [0, 1] either by the fixed ``value_range`` (clipped)
    or by per-channel min-max. The patch is nearest-resampled to
    ``sample_n x sample_n`` first unless ``sample_n`` is None.
    """
    v = patch.values
    if sample_n is not None:
        v = _nearest_resize(v, sample_n)
    v = _normalize(v, value_range)
    h, w, c = v.shape
    x = v.reshape(h * w, c)
    d2 = np.zeros((h * w, h * w))
    for ch in range(c):
        col = x[:, ch]
        d2 += (col[:, None] - col[None, :]) ** 2
    sim = 1.0 - np.sqrt(d2) / math.sqrt(c)
    return SelfSimReport((h, w), sim, float(sim.mean()))


@dataclass(frozen=True)
class ZoomReport:
    factor: int
    mean: float
    tiles: int
    center: SelfSimReport = field(repr=False)

    def to_dict(self) -> dict:
        return {"factor": self.factor, "mean_similarity": self.mean, "tiles": self.tiles}


def zoom_self_similarity(
    texture: LatentGrid,
    factors: Sequence[int] = (1, 2, 4),
    crop: int = 32,
    sample_n: Optional[int] = 32,
    value_range: Optional[tuple[float, float]] = (0.0, 1.0),
) -> dict[int, ZoomReport]:
    """Mean self-similarity of fixed-size crops after bicubic upscaling by each factor.

    The similarity is averaged over every ``crop x crop`` tile of the upscaled
    texture; a single crop at high zoom sees only a handful of source pixels
    and is too noisy to rank. The centre tile's report is kept for plotting.
    """
    out = {}
    H, W, _ = texture.shape
    for f in factors:
        up = upsample(texture, H * f, W * f) if f > 1 else texture
        v = up.values
        means = [
            self_similarity(LatentGrid(v[i : i + crop, j : j + crop]), sample_n, value_range).mean
            for i in range(0, up.height - crop + 1, crop)
            for j in range(0, up.width - crop + 1, crop)
        ]
        centre = self_similarity(center_crop(up, crop), sample_n, value_range)
        out[f] = ZoomReport(int(f), float(np.mean(means)), len(means), centre)
    return out


# -- distribution shift ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShiftReport:
    mean_deltas: np.ndarray
    std_deltas: np.ndarray
    mean_hist: tuple[np.ndarray, np.ndarray] = field(repr=False)
    std_hist: tuple[np.ndarray, np.ndarray] = field(repr=False)

    @property
    def median_std_delta(self) -> float:
        return float(np.median(self.std_deltas))

    @property
    def median_mean_delta(self) -> float:
        return float(np.median(self.mean_deltas))

    def to_dict(self) -> dict:
        return {
            "patches": [
                {"k": k + 1, "mean_delta": float(m), "std_delta": float(s)}
                for k, (m, s) in enumerate(zip(self.mean_deltas, self.std_deltas))
            ],
            "median_mean_delta": self.median_mean_delta,
            "median_std_delta": self.median_std_delta,
            "mean_hist": {"counts": self.mean_hist[0].tolist(), "edges": self.mean_hist[1].tolist()},
            "std_hist": {"counts": self.std_hist[0].tolist(), "edges": self.std_hist[1].tolist()},
        }


def dilated_shift_report(
    reference: LatentGrid, upsampled: LatentGrid, layout: DilatedLayout, bins: int = 20
) -> ShiftReport:
    """Per-dilated-patch ``(mean - mean_ref, std - std_ref)`` of an upsampled latent."""
    if reference.shape[:2] != (layout.h, layout.w):
        raise GridError(f"reference {reference.shape[:2]} does not match patch size {(layout.h, layout.w)}")
    ref = stats(reference)
    ps = [stats(p) for p in dilated_split(upsampled, layout)]
    dm = np.array([p.mean - ref.mean for p in ps])
    ds = np.array([p.std - ref.std for p in ps])
    return ShiftReport(dm, ds, np.histogram(dm, bins=bins), np.histogram(ds, bins=bins))


# -- variance scaling ------------------------------------------------------------


@dataclass(frozen=True)
class VarianceScalingReport:
    k: float
    t: int
    alpha_bar: float
    trials: int
    expected_mean: float
    observed_mean: float
    mean_se: float
    expected_noise_std: float
    observed_noise_std: float
    std_se: float

    @property
    def signal_ratio(self) -> float:
        """Observed signal mean relative to the unscaled (k = 1) expectation."""
        return self.observed_mean / (self.expected_mean * self.k)

    @property
    def mean_ok(self) -> bool:
        return abs(self.observed_mean - self.expected_mean) <= 3 * self.mean_se

    @property
    def std_ok(self) -> bool:
        return abs(self.observed_noise_std - self.expected_noise_std) <= 3 * self.std_se

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.std_ok

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(signal_ratio=self.signal_ratio, mean_ok=self.mean_ok, std_ok=self.std_ok, passed=self.passed)
        return d


def variance_scaling_check(
    z0: LatentGrid, k: float, schedule: NoiseSchedule, t: int, trials: int, key: SeedKey
) -> VarianceScalingReport:
    """Monte Carlo check that forward-diffusing ``z0 / k`` scales the signal by ``1/k``.

    ``trials`` independent copies of the chain are run. The mean of ``z'_t`` is
    compared to ``sqrt(abar_t) * mean(z0) / k`` and the residual noise std to
    ``sqrt(1 - abar_t)``, each at three standard errors.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}]")
    scaled = z0.values / k
    H, W, C = z0.shape
    stacked = LatentGrid(np.tile(scaled, (trials, 1, 1)))
    zt = forward_chain(stacked, schedule, t, dataclasses.replace(key, purpose=Purpose.TRIAL)).values
    ab = float(schedule.alpha_bars[t])
    signal = np.sqrt(ab) * np.tile(scaled, (trials, 1, 1))
    n = zt.size
    noise_std = math.sqrt(1.0 - ab)
    resid = zt - signal
    return VarianceScalingReport(
        k=float(k),
        t=int(t),
        alpha_bar=ab,
        trials=int(trials),
        expected_mean=float(signal.mean()),
        observed_mean=float(zt.mean()),
        mean_se=noise_std / math.sqrt(n),
        expected_noise_std=noise_std,
        observed_noise_std=float(np.sqrt(np.mean(resid**2))),
        std_se=noise_std / math.sqrt(2 * n),
    )


# -- schedule curves -------------------------------------------------------------


@dataclass(frozen=True)
class CurveSpec:
    eta: float = 1.0
    beta0: float = 0.00085
    betaT: float = 0.012
    T: int = 1000
    shift_factor: Optional[float] = None
    label: Optional[str] = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        name = f"eta={self.eta:g}"
        if self.shift_factor is not None:
            name += f",shift={self.shift_factor:g}"
        return name


@dataclass(frozen=True, eq=False)
class CurveTable:
    spec: CurveSpec
    t: np.ndarray
    beta: np.ndarray
    alpha_bar: np.ndarray
    log_snr: np.ndarray


def schedule_curves(configs: Sequence[CurveSpec]) -> list[CurveTable]:
    """Per-timestep ``beta``, ``alpha_bar`` and ``log SNR`` for each curve spec.

    With ``shift_factor`` set, the SNR is multiplied by it at every ``t >= 1``
    and ``beta`` is re-derived from the shifted alpha-bar ratios.
    """
    out = []
    for spec in configs:
        sched = build_schedule(spec.beta0, spec.betaT, spec.T, spec.eta)
        t = np.arange(spec.T + 1)
        if spec.shift_factor is None:
            ab = sched.alpha_bars.copy()
            beta = sched.betas.copy()
        else:
            ab = np.array([1.0] + [shifted_alpha_bar(sched, i, spec.shift_factor) for i in t[1:]])
            beta = np.empty_like(ab)
            beta[0] = sched.betas[0]
            beta[1:] = 1.0 - ab[1:] / ab[:-1]
        with np.errstate(divide="ignore"):
            lsnr = np.log(ab) - np.log1p(-ab)
        lsnr[0] = np.inf
        out.append(CurveTable(spec, t, beta, ab, lsnr))
    return out


def curves_csv(tables: Sequence[CurveTable], labelled: Optional[bool] = None) -> str:
    """CSV text; a leading ``curve`` column is added when there are several tables."""
    labelled = len(tables) > 1 if labelled is None else labelled
    buf = io.StringIO()
    header = ["t", "beta", "alpha_bar", "log_snr"]
    buf.write(",".join((["curve"] if labelled else []) + header) + "\n")
    for tab in tables:
        for i in range(tab.t.size):
            row = [str(int(tab.t[i])), repr(float(tab.beta[i])), repr(float(tab.alpha_bar[i])), repr(float(tab.log_snr[i]))]
            if labelled:
                row.insert(0, tab.spec.name)
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


# -- sweeps ----------------------------------------------------------------------


def _rmse(a: LatentGrid, b: LatentGrid) -> float:
    return float(np.sqrt(np.mean((a.values - b.values) ** 2)))


def eta_sweep(config: PipelineConfig, etas: Sequence[float], stage: int = 2) -> list[dict]:
    """Re-run one upscaling stage for each ``eta``.

    Reports drift of the stage output from its statistically matched start
    point (``rmse_to_start``) and the error of its pooled statistics against the
    reference latent.
    """
    z, pooled = generate_reference(config)
    ref = channel_stats(z) if config.per_channel_matching else pooled
    for s in range(2, stage):
        z, _ = upscale_stage(z, s, config, ref)
    rows = []
    for eta in etas:
        cfg = dataclasses.replace(config, eta_overrides={**config.eta_overrides, stage: eta})
        out, rec = upscale_stage(z, stage, cfg, ref)
        start = _stage_start(z, stage, cfg, ref)
        st = stats(out)
        rows.append(
            {
                "stage": stage,
                "ratio": rec.ratio,
                "eta": float(eta),
                "rmse_to_start": _rmse(out, start),
                "mean_error": st.mean - pooled.mean,
                "std_error": st.std - pooled.std,
                "denoiser_calls": rec.denoiser_calls,
            }
        )
    return rows


def _stage_start(z_prev, s, config, ref):
    H, W = config.height * s, config.width * s
    up = upsample(z_prev, H, W, config.upsampler)
    if not config.statistical_matching:
        return up
    reference = _reference_for(config, ref, z_prev)
    return match_all_dilated(up, dilated_layout(H, W, config.height, config.width), reference)


def shortcut_sweep(config: PipelineConfig, t0s: Sequence[int]) -> list[dict]:
    """Stage-2 outputs for each shortcut ``T0``, compared with the full-length run."""
    z, ref = generate_reference(config)
    full, _ = upscale_stage(z, 2, dataclasses.replace(config, t0=config.n_steps), ref)
    rows = []
    for t0 in t0s:
        out, rec = upscale_stage(z, 2, dataclasses.replace(config, t0=t0), ref)
        st = stats(out)
        rows.append(
            {
                "t0": int(t0),
                "n_steps": config.n_steps,
                "start_timestep": rec.start_timestep,
                "denoiser_calls": rec.denoiser_calls,
                "stage_seconds": rec.wall_time,
                "rmse_vs_full": _rmse(out, full),
                "mean": st.mean,
                "std": st.std,
            }
        )
    return rows
