"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._io import atomic_write_bytes  # noqa: E402

__all__ = [
    "plot_schedule_curves",
    "plot_selfsim",
    "plot_shift",
    "plot_run",
    "plot_eta_sweep",
    "plot_shortcut_sweep",
]

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight")
    plt.close(fig)
    return atomic_write_bytes(Path(path), buf.getvalue())


def plot_schedule_curves(tables, path) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_b, ax_s) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
        for tab in tables:
            solid = tab.spec.eta == 1.0 and tab.spec.shift_factor is None
            ls = "-" if solid else "--"
            ax_b.plot(tab.t, tab.beta, ls, label=tab.spec.name)
            ax_s.plot(tab.t[1:], tab.log_snr[1:], ls, label=tab.spec.name)
        ax_b.set_ylabel(r"$\beta_t$")
        ax_s.set_ylabel("log SNR")
        ax_s.set_xlabel("timestep t")
        ax_b.legend(frameon=False)
        return _save(fig, path)


def plot_selfsim(reports: dict, path, title: str = "") -> Path:
    """Similarity matrices side by side, keyed by upscale factor."""
    with plt.rc_context(STYLE):
        n = len(reports)
        fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
        for ax, (factor, rep) in zip(axes[0], sorted(reports.items())):
            im = ax.imshow(rep.matrix, vmin=0, vmax=1, cmap="viridis")
            ax.set_title(f"x{factor}  mean={rep.mean:.3f}")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_shift(report, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_s, ax_m) = plt.subplots(2, 1, figsize=(5, 5))
        for ax, (counts, edges), label in (
            (ax_s, report.std_hist, "std - std_ref"),
            (ax_m, report.mean_hist, "mean - mean_ref"),
        ):
            ax.stairs(counts, edges, fill=True, alpha=0.6)
            ax.axvline(0.0, color="r", lw=1)
            ax.set_xlabel(label)
            ax.set_ylabel("patches")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_run(report, path) -> Path:
    """Channel 0 of each stage latent, plus pooled std along each denoising loop."""
    grids = report.grids
    with plt.rc_context(STYLE):
        n = len(grids)
        fig, axes = plt.subplots(1, n + 1, figsize=(3 * (n + 1), 3))
        for ax, (s, g) in zip(axes, sorted(grids.items())):
            ax.imshow(g.values[:, :, 0], cmap="gray")
            ax.set_title(f"stage {s}  {g.height}x{g.width}")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        ax = axes[-1]
        recs = ([report.phase1] if report.phase1 else []) + report.stages
        for rec in recs:
            ax.plot([r["std"] for r in rec.step_stats], label=f"stage {rec.stage}")
        ax.set_xlabel("denoising iteration")
        ax.set_ylabel("pooled std")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_eta_sweep(rows, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        etas = np.array([r["eta"] for r in rows])
        ax.plot(etas, [r["rmse_to_start"] for r in rows], "o-", label="rmse to start")
        ax.plot(etas, [abs(r["std_error"]) for r in rows], "s--", label="|std error|")
        ax.set_xlabel(r"$\eta$")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_shortcut_sweep(rows, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        t0 = [r["t0"] for r in rows]
        ax.plot(t0, [r["rmse_vs_full"] for r in rows], "o-", label="rmse vs full")
        ax2 = ax.twinx()
        ax2.plot(t0, [r["denoiser_calls"] for r in rows], "s--", color="C1", label="denoiser calls")
        ax.set_xlabel("shortcut T0")
        ax.set_ylabel("rmse vs full")
        ax2.set_ylabel("denoiser calls")
        return _save(fig, path)
