r"""Forward diffusion, deterministic DDIM and analytic epsilon denoisers.

The analytic denoisers stand in for a trained network. For a per-pixel prior
:math:`z_0 \sim \sum_i \pi_i \mathcal{N}(\mu_i, \sigma_i^2)` and
:math:`z_t = \sqrt{\bar\alpha_t} z_0 + \sqrt{1-\bar\alpha_t}\,\epsilon`, the
posterior mean :math:`E[z_0 \mid z_t]` is closed form, and the optimal noise
prediction is :math:`(z_t - \sqrt{\bar\alpha_t} E[z_0 \mid z_t]) / \sqrt{1-\bar\alpha_t}`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import GridError, LatentGrid, Purpose, SeedKey, sample_gaussian
from .schedule import NoiseSchedule, ScheduleError

__all__ = [
    "DenoiserSpec",
    "forward_to",
    "forward_chain",
    "forward_trajectory",
    "forward_path",
    "ddim_step",
    "gaussian_eps",
    "gmm_eps",
    "gmm_posterior_mean",
]


def _same_shape(a: LatentGrid, b: LatentGrid, what: str):
    if a.shape != b.shape:
        raise GridError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_to(z0: LatentGrid, schedule: NoiseSchedule, t: int, noise: LatentGrid) -> LatentGrid:
    """Closed-form marginal sample ``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``."""
    _same_shape(z0, noise, "forward_to")
    schedule._check_t(t)
    ab = schedule.alpha_bars[int(t)]
    if t == 0:
        return z0
    return LatentGrid(np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * noise.values)


def forward_trajectory(
    z0: LatentGrid,
    schedule: NoiseSchedule,
    t_target: int,
    key: SeedKey,
    record=(),
) -> tuple[LatentGrid, dict[int, LatentGrid]]:
    """Run the one-step Markov chain from ``t = 1`` to ``t_target``.

    Step ``t`` draws its noise from ``key`` with ``timestep = t`` and
    ``purpose = FORWARD``, so prefixes of the chain are shared between runs
    with different targets. Returns the final latent and the latents at the
    timesteps listed in ``record``.
    """
    schedule._check_t(t_target)
    record = set(record)
    kept = {0: z0} if 0 in record else {}
    z = z0.values
    h, w, c = z0.shape
    for t in range(1, int(t_target) + 1):
        beta = schedule.betas[t]
        k = dataclasses.replace(key, timestep=t, purpose=Purpose.FORWARD)
        eps = sample_gaussian(h, w, c, k).values
        z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * eps
        if t in record:
            kept[t] = LatentGrid(z)
    return LatentGrid(z), kept


def forward_path(z0: LatentGrid, schedule: NoiseSchedule, timesteps, noise: LatentGrid) -> dict[int, LatentGrid]:
    """Closed-form latents at each of ``timesteps`` sharing a single noise draw."""
    return {int(t): forward_to(z0, schedule, t, noise) for t in timesteps}


def forward_chain(z0: LatentGrid, schedule: NoiseSchedule, t_target: int, key: SeedKey) -> LatentGrid:
    return forward_trajectory(z0, schedule, t_target, key)[0]


def ddim_step(
    z_t: LatentGrid,
    eps_hat: LatentGrid,
    schedule: NoiseSchedule,
    t: int,
    t_prev: int,
) -> LatentGrid:
    """Deterministic DDIM update from ``t`` to ``t_prev < t``."""
    _same_shape(z_t, eps_hat, "ddim_step")
    schedule._check_t(t)
    schedule._check_t(t_prev)
    if not t_prev < t:
        raise ScheduleError(f"t_prev ({t_prev}) must precede t ({t})")
    ab, ab_prev = schedule.alpha_bars[int(t)], schedule.alpha_bars[int(t_prev)]
    if ab <= 0.0:
        raise ScheduleError(f"alpha_bar is zero at t = {t}")
    z0_hat = (z_t.values - np.sqrt(1.0 - ab) * eps_hat.values) / np.sqrt(ab)
    if ab_prev == 1.0:
        return LatentGrid(z0_hat)
    return LatentGrid(np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat.values)


# -- analytic denoisers ----------------------------------------------------


def _noise_level(schedule, t):
    schedule._check_t(t)
    if t == 0:
        raise ScheduleError("epsilon prediction is undefined at t = 0")
    return float(schedule.alpha_bars[int(t)])


def _eps_from_mean(z, ab, post_mean):
    if ab == 1.0:
        # no noise has been added; nothing to predict
        return np.zeros_like(z)
    return (z - np.sqrt(ab) * post_mean) / np.sqrt(1.0 - ab)


def _component_posterior(z, ab, mu, sigma):
    var = ab * sigma**2 + (1.0 - ab)
    return (np.sqrt(ab) * sigma**2 * z + (1.0 - ab) * mu) / var, var


def gmm_posterior_mean(z, ab: float, means, stds, weights) -> np.ndarray:
    """``E[z0 | z_t = z]`` under a 1-D Gaussian-mixture prior, elementwise."""
    z = np.asarray(z, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    zz = z[..., None]
    cond, var = _component_posterior(zz, ab, means, stds)
    logw = np.log(weights) - 0.5 * np.log(2 * np.pi * var) - (zz - np.sqrt(ab) * means) ** 2 / (2 * var)
    logw = logw - logw.max(axis=-1, keepdims=True)
    resp = np.exp(logw)
    resp /= resp.sum(axis=-1, keepdims=True)
    return np.sum(resp * cond, axis=-1)


def gaussian_eps(
    z_t: LatentGrid, t: int, schedule: NoiseSchedule, mean: float = 0.0, std: float = 1.0
) -> LatentGrid:
    ab = _noise_level(schedule, t)
    post, _ = _component_posterior(z_t.values, ab, mean, std)
    return LatentGrid(_eps_from_mean(z_t.values, ab, post))


def gmm_eps(z_t: LatentGrid, t: int, schedule: NoiseSchedule, means, stds, weights) -> LatentGrid:
    ab = _noise_level(schedule, t)
    post = gmm_posterior_mean(z_t.values, ab, means, stds, weights)
    return LatentGrid(_eps_from_mean(z_t.values, ab, post))


EpsFn = Callable[[LatentGrid, int, NoiseSchedule, str], LatentGrid]


@dataclass(frozen=True)
class DenoiserSpec:
    """Epsilon-prediction model description.

    ``kind`` is ``"gaussian_prior"``, ``"gmm_prior"`` or ``"external"``. For
    the analytic kinds the prior is a per-pixel mixture shared by every pixel
    and channel; the conditioning ``label`` is accepted and ignored. An
    external denoiser supplies ``fn(z_t, t, schedule, label)``.
    """

    kind: str = "gaussian_prior"
    means: tuple[float, ...] = (0.0,)
    stds: tuple[float, ...] = (1.0,)
    weights: tuple[float, ...] = (1.0,)
    label: str = ""
    fn: Optional[EpsFn] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("gaussian_prior", "gmm_prior", "external"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        for name in ("means", "stds", "weights"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.kind == "external":
            if self.fn is None:
                raise ValueError("external denoiser needs a callable")
            return
        n = len(self.means)
        if n == 0 or len(self.stds) != n or len(self.weights) != n:
            raise ValueError("mixture needs equal, non-zero numbers of means, stds and weights")
        if self.kind == "gaussian_prior" and n != 1:
            raise ValueError("gaussian_prior takes exactly one component")
        if any(s < 0 for s in self.stds):
            raise ValueError("component stds must be non-negative")
        w = np.asarray(self.weights)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-9):
            raise ValueError("weights must be non-negative and sum to 1")

    def __call__(self, z_t: LatentGrid, t: int, schedule: NoiseSchedule) -> LatentGrid:
        if self.kind == "gaussian_prior":
            return gaussian_eps(z_t, t, schedule, self.means[0], self.stds[0])
        if self.kind == "gmm_prior":
            return gmm_eps(z_t, t, schedule, self.means, self.stds, self.weights)
        return self.fn(z_t, t, schedule, self.label)

    def to_dict(self) -> dict:
        if self.kind == "external":
            return {"kind": "external", "label": self.label}
        return {
            "kind": self.kind,
            "means": list(self.means),
            "stds": list(self.stds),
            "weights": list(self.weights),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        d = dict(d)
        unknown = set(d) - {"kind", "means", "stds", "weights", "label"}
        if unknown:
            raise ValueError(f"unknown denoiser key(s): {', '.join(sorted(unknown))}")
        return cls(**d)
