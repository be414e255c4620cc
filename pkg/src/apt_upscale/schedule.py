r"""Beta / alpha-bar / SNR tables for the power-law schedule family.

The family interpolates :math:`\beta^\eta` linearly in ``t``::

    beta_t = (beta_0**eta + t * (beta_T**eta - beta_0**eta) / T) ** (1 / eta)

``eta = 1`` is the plain linear ramp used by the pretrained model. Larger
``eta`` front-loads noise growth, lowering the SNR at every interior timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScheduleError",
    "NoiseSchedule",
    "SubstepMap",
    "DEFAULT_BETA0",
    "DEFAULT_BETAT",
    "DEFAULT_T",
    "DEFAULT_ETA_TABLE",
    "build_schedule",
    "alpha_bar",
    "log_snr",
    "shifted_alpha_bar",
    "build_substeps",
    "eta_for_ratio",
]

DEFAULT_BETA0 = 0.00085
DEFAULT_BETAT = 0.012
DEFAULT_T = 1000

# incremental per-side upscale ratio -> eta
DEFAULT_ETA_TABLE: dict[float, float] = {2.0: 2.0, 1.5: 3.0, 4.0 / 3.0: 3.5}


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta0: float
    betaT: float
    eta: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas, eta: float = 1.0) -> "NoiseSchedule":
        """Schedule from an explicit ``beta`` table indexed ``0..T``.

        No monotonicity checks are made, so degenerate tables (e.g. all zeros)
        are allowed here for testing limit cases.
        """
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ScheduleError("need beta values for t = 0..T with T >= 1")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.empty_like(betas)
        alpha_bars[0] = 1.0
        alpha_bars[1:] = np.cumprod(alphas[1:])
        for a in (betas, alphas, alpha_bars):
            a.setflags(write=False)
        return cls(
            T=betas.size - 1,
            beta0=float(betas[0]),
            betaT=float(betas[-1]),
            eta=float(eta),
            betas=betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
        )

    def _check_t(self, t):
        if int(t) != t or not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t!r} outside [0, {self.T}]")


def build_schedule(
    beta0: float = DEFAULT_BETA0,
    betaT: float = DEFAULT_BETAT,
    T: int = DEFAULT_T,
    eta: float = 1.0,
) -> NoiseSchedule:
    if not 0 < beta0 < betaT < 1:
        raise ScheduleError(f"need 0 < beta0 < betaT < 1, got {beta0}, {betaT}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not eta > 0:
        raise ScheduleError(f"eta must be positive, got {eta!r}")
    t = np.arange(T + 1, dtype=np.float64)
    lo, hi = beta0**eta, betaT**eta
    betas = (lo + t * (hi - lo) / T) ** (1.0 / eta)
    # pin the endpoints against pow round-off
    betas[0], betas[-1] = beta0, betaT
    sched = NoiseSchedule.from_betas(betas, eta=eta)
    return sched


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    schedule._check_t(t)
    return float(schedule.alpha_bars[int(t)])


def _snr(schedule, t):
    schedule._check_t(t)
    if t == 0:
        raise ScheduleError("SNR is infinite at t = 0")
    ab = schedule.alpha_bars[int(t)]
    return ab / (1.0 - ab)


def log_snr(schedule: NoiseSchedule, t: int) -> float:
    """``ln(abar_t / (1 - abar_t))`` for ``1 <= t <= T``."""
    return float(np.log(_snr(schedule, t)))


def shifted_alpha_bar(schedule: NoiseSchedule, t: int, shift_factor: float) -> float:
    """alpha-bar after multiplying the SNR at ``t`` by ``shift_factor``.

    With ``shift_factor = (s / S)**2`` this is the resolution shift rule used
    by Simple Diffusion.
    """
    if not shift_factor > 0:
        raise ScheduleError(f"shift_factor must be positive, got {shift_factor!r}")
    snr = shift_factor * _snr(schedule, t)
    return float(snr / (1.0 + snr))


@dataclass(frozen=True)
class SubstepMap:
    n_steps: int
    timesteps: tuple[int, ...]
    shortcut_index: int

    @property
    def window(self) -> tuple[int, ...]:
        """The ``shortcut_index`` lowest-noise timesteps, largest first."""
        return self.timesteps[self.n_steps - self.shortcut_index :]

    @property
    def start_timestep(self) -> int:
        return self.window[0]

    def pairs(self, shortcut: bool = True) -> list[tuple[int, int]]:
        """``(t, t_prev)`` pairs for the denoising loop, ending at ``t_prev = 0``."""
        ts = self.window if shortcut else self.timesteps
        return list(zip(ts, ts[1:] + (0,)))


def build_substeps(T: int, n_steps: int, shortcut_T0: int | None = None) -> SubstepMap:
    if not 1 <= n_steps <= T:
        raise ScheduleError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    if shortcut_T0 is None:
        shortcut_T0 = n_steps
    if not 1 <= shortcut_T0 <= n_steps:
        raise ScheduleError(f"need 1 <= T0 <= n_steps, got T0={shortcut_T0}")
    ts = (np.arange(n_steps, 0, -1, dtype=np.int64) * T) // n_steps
    return SubstepMap(n_steps, tuple(int(t) for t in ts), int(shortcut_T0))


def eta_for_ratio(ratio: float, table: dict[float, float] | None = None) -> float:
    """Look up ``eta`` for an incremental upscale ratio by nearest table key."""
    table = DEFAULT_ETA_TABLE if table is None else table
    if not table:
        raise ScheduleError("empty eta table")
    key = min(table, key=lambda r: (abs(r - ratio), r))
    return float(table[key])
