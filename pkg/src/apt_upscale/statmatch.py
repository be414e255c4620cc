"""Statistical matching of dilated patches to a reference latent."""

from __future__ import annotations

import numpy as np

from .grid import GridStats, LatentGrid, channel_stats, stats
from .resample import DilatedLayout, dilated_fuse, dilated_split

__all__ = ["match_stats", "match_all_dilated", "match_all_dilated_flagged"]


def _affine(v: np.ndarray, src: GridStats, ref: GridStats) -> tuple[np.ndarray, bool]:
    if src.mean == ref.mean and src.std == ref.std:
        return v, False
    if src.std == 0.0:
        # constant patch: shift the mean, leave the scale alone
        return (v - src.mean) + ref.mean, True
    return (ref.std / src.std) * (v - src.mean) + ref.mean, False


def _match(patch: LatentGrid, reference) -> tuple[LatentGrid, bool]:
    if isinstance(reference, GridStats):
        v, degenerate = _affine(patch.values, stats(patch), reference)
        return LatentGrid(v), degenerate
    refs = list(reference)
    if len(refs) != patch.channels:
        raise ValueError(f"{len(refs)} per-channel references for {patch.channels} channels")
    out = np.empty(patch.shape)
    degenerate = False
    for c, (src, ref) in enumerate(zip(channel_stats(patch), refs)):
        out[:, :, c], flag = _affine(patch.values[:, :, c], src, ref)
        degenerate |= flag
    return LatentGrid(out), degenerate


def match_stats(patch: LatentGrid, reference: GridStats) -> LatentGrid:
    """Affinely map ``patch`` so its pooled mean/std equal ``reference``.

    ``reference`` may also be a sequence of per-channel :class:`GridStats`, in
    which case each channel is matched separately.

    A constant patch cannot be rescaled; it is only shifted to the reference
    mean (use :func:`match_all_dilated_flagged` to find out when that happens).
    """
    return _match(patch, reference)[0]


def match_all_dilated_flagged(
    upsampled: LatentGrid, layout: DilatedLayout, reference
) -> tuple[LatentGrid, list[int]]:
    """Match every dilated patch; also return the 1-based indices of constant patches."""
    matched, flagged = [], []
    for k, patch in enumerate(dilated_split(upsampled, layout), start=1):
        m, degenerate = _match(patch, reference)
        matched.append(m)
        if degenerate:
            flagged.append(k)
    return dilated_fuse(matched, layout), flagged


def match_all_dilated(upsampled: LatentGrid, layout: DilatedLayout, reference) -> LatentGrid:
    return match_all_dilated_flagged(upsampled, layout, reference)[0]
