"""Latent upsampling and the two patch geometries used during denoising.

Dilated patches are strided sub-grids ``z[i::S_h, j::S_w]`` that tile the
latent exactly. Local patches are contiguous base-size crops laid out on an
overlapping raster and fused back by coverage-weighted averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridError, LatentGrid

__all__ = [
    "GeometryError",
    "DilatedLayout",
    "PatchLayout",
    "catmull_rom_weights",
    "cubic_resample_axis",
    "upsample",
    "dilated_layout",
    "dilated_split",
    "dilated_fuse",
    "local_layout",
    "local_extract",
    "local_fuse",
]


class GeometryError(GridError):
    """Patch layout inconsistent with grid dimensions."""


# -- upsampling ------------------------------------------------------------


def catmull_rom_weights(frac: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution weights for taps at offsets -1, 0, 1, 2.

    ``frac`` is the fractional position in [0, 1). Returns shape ``(..., 4)``.
    """
    t = np.asarray(frac, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    w0 = a * (t3 - 2 * t2 + t)
    w1 = (a + 2) * t3 - (a + 3) * t2 + 1
    w2 = -(a + 2) * t3 + (2 * a + 3) * t2 - a * t
    w3 = -a * (t3 - t2)
    return np.stack([w0, w1, w2, w3], axis=-1)


def cubic_resample_axis(values: np.ndarray, positions, axis: int = 0) -> np.ndarray:
    """Sample ``values`` along ``axis`` at fractional source ``positions``.

    Out-of-range taps clamp to the edge. The result is formed as the centre tap
    plus weighted differences, which keeps constant signals exact in floating
    point.
    """
    values = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    n = values.shape[0]
    pos = np.asarray(positions, dtype=np.float64)
    base = np.floor(pos)
    w = catmull_rom_weights(pos - base)
    idx = np.clip(base.astype(np.int64)[:, None] + np.arange(-1, 3), 0, n - 1)
    taps = values[idx]  # (m, 4, ...)
    centre = taps[:, 1]
    diff = taps - centre[:, None]
    w = w.reshape(w.shape + (1,) * (taps.ndim - 2))
    out = centre + np.sum(w * diff, axis=1)
    return np.moveaxis(out, 0, axis)


def _source_positions(n_src: int, n_dst: int) -> np.ndarray:
    # pixel-centre alignment
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def upsample(grid: LatentGrid, target_h: int, target_w: int, method: str = "bicubic") -> LatentGrid:
    h, w, _ = grid.shape
    if target_h < h or target_w < w:
        raise GeometryError(f"downscaling {h}x{w} -> {target_h}x{target_w} is not supported")
    if method == "nearest":
        # pixel-centre nearest; block replication when the factor is an integer
        rows = (2 * np.arange(target_h) + 1) * h // (2 * target_h)
        cols = (2 * np.arange(target_w) + 1) * w // (2 * target_w)
        return LatentGrid(grid.values[rows][:, cols])
    if method == "bicubic":
        v = cubic_resample_axis(grid.values, _source_positions(h, target_h), axis=0)
        v = cubic_resample_axis(v, _source_positions(w, target_w), axis=1)
        return LatentGrid(v)
    raise ValueError(f"unknown upsampling method {method!r}")


# -- dilated patches -------------------------------------------------------


@dataclass(frozen=True)
class DilatedLayout:
    stride_h: int
    stride_w: int
    h: int
    w: int

    @property
    def patch_count(self) -> int:
        return self.stride_h * self.stride_w

    @property
    def full_shape(self) -> tuple[int, int]:
        return self.stride_h * self.h, self.stride_w * self.w

    def offsets(self) -> list[tuple[int, int]]:
        """``(i, j)`` phase of patch ``k - 1``; ``k = i * S_w + j + 1``."""
        return [(i, j) for i in range(self.stride_h) for j in range(self.stride_w)]


def dilated_layout(H: int, W: int, h: int, w: int) -> DilatedLayout:
    if H % h or W % w:
        raise GeometryError(f"{H}x{W} is not an integer multiple of {h}x{w}")
    return DilatedLayout(H // h, W // w, h, w)


def _check_full(grid, layout: DilatedLayout):
    if grid.shape[:2] != layout.full_shape:
        raise GeometryError(f"grid {grid.shape[:2]} does not match dilated layout {layout.full_shape}")


def dilated_split(grid: LatentGrid, layout: DilatedLayout) -> list[LatentGrid]:
    _check_full(grid, layout)
    v = grid.values
    return [LatentGrid(v[i :: layout.stride_h, j :: layout.stride_w]) for i, j in layout.offsets()]


def dilated_fuse(patches, layout: DilatedLayout) -> LatentGrid:
    patches = list(patches)
    if len(patches) != layout.patch_count:
        raise GeometryError(f"expected {layout.patch_count} dilated patches, got {len(patches)}")
    c = patches[0].channels
    H, W = layout.full_shape
    out = np.empty((H, W, c))
    for p, (i, j) in zip(patches, layout.offsets()):
        if p.shape != (layout.h, layout.w, c):
            raise GeometryError(f"dilated patch has shape {p.shape}, expected {(layout.h, layout.w, c)}")
        out[i :: layout.stride_h, j :: layout.stride_w] = p.values
    return LatentGrid(out)


# -- overlapping local patches ---------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchLayout:
    H: int
    W: int
    h: int
    w: int
    overlap: float
    offsets: tuple[tuple[int, int], ...]
    weighting: str = "uniform"
    patch_weight: np.ndarray = field(repr=False, default=None)
    coverage: np.ndarray = field(repr=False, default=None)

    @property
    def patch_count(self) -> int:
        return len(self.offsets)

    def normalized_weights(self) -> list[np.ndarray]:
        """Per-patch ``(h, w)`` weights divided by the summed coverage."""
        return [self.patch_weight / self.coverage[r : r + self.h, c : c + self.w] for r, c in self.offsets]


def _gaussian_window(h, w, sigma_frac=0.5):
    def axis(n):
        x = np.arange(n) - (n - 1) / 2
        return np.exp(-0.5 * (x / (sigma_frac * n)) ** 2)

    return np.outer(axis(h), axis(w))


def _anchors(N, n, r):
    if n > N:
        raise GeometryError(f"patch size {n} exceeds grid size {N}")
    if N == n:
        return [0]
    stride = n * r
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise GeometryError(f"patch stride {n}*{r} = {stride} is not a positive integer")
    stride = int(round(stride))
    if (N - n) % stride:
        raise GeometryError(f"grid size {N} leaves a ragged edge for patch {n} at stride {stride}")
    return list(range(0, N - n + 1, stride))


def local_layout(H: int, W: int, h: int, w: int, r: float = 0.5, weighting: str = "uniform") -> PatchLayout:
    """Overlapping ``h x w`` crops at stride ``(h*r, w*r)`` covering an ``H x W`` grid."""
    if not 0 < r < 1:
        raise GeometryError(f"overlap ratio must be in (0, 1), got {r!r}")
    offsets = tuple((i, j) for i in _anchors(H, h, r) for j in _anchors(W, w, r))
    if weighting == "uniform":
        pw = np.ones((h, w))
    elif weighting == "gaussian":
        pw = _gaussian_window(h, w)
    else:
        raise ValueError(f"unknown patch weighting {weighting!r}")
    cov = np.zeros((H, W))
    for i, j in offsets:
        cov[i : i + h, j : j + w] += pw
    pw.setflags(write=False)
    cov.setflags(write=False)
    return PatchLayout(H, W, h, w, r, offsets, weighting, pw, cov)


def local_extract(grid: LatentGrid, layout: PatchLayout) -> list[LatentGrid]:
    if grid.shape[:2] != (layout.H, layout.W):
        raise GeometryError(f"grid {grid.shape[:2]} does not match layout {(layout.H, layout.W)}")
    v = grid.values
    return [LatentGrid(v[i : i + layout.h, j : j + layout.w]) for i, j in layout.offsets]


def local_fuse(patches, layout: PatchLayout) -> LatentGrid:
    """Coverage-weighted average of overlapping patches."""
    patches = list(patches)
    if len(patches) != layout.patch_count:
        raise GeometryError(f"expected {layout.patch_count} local patches, got {len(patches)}")
    c = patches[0].channels
    acc = np.zeros((layout.H, layout.W, c))
    pw = layout.patch_weight[:, :, None]
    for p, (i, j) in zip(patches, layout.offsets):
        if p.shape != (layout.h, layout.w, c):
            raise GeometryError(f"local patch has shape {p.shape}, expected {(layout.h, layout.w, c)}")
        acc[i : i + layout.h, j : j + layout.w] += pw * p.values
    return LatentGrid(acc / layout.coverage[:, :, None])
