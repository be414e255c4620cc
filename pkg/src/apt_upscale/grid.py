"""Latent grid value type, pooled statistics and keyed Gaussian noise.

A :class:`LatentGrid` wraps a read-only ``(H, W, C)`` float64 array. Every
operation in the package takes grids by value and returns new ones, so a grid
can be shared between threads without copying.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes

__all__ = [
    "GridError",
    "NonFiniteError",
    "LatentGrid",
    "GridStats",
    "Purpose",
    "SeedKey",
    "make_grid",
    "stats",
    "channel_stats",
    "sample_gaussian",
    "write_aptg",
    "read_aptg",
    "aptg_bytes",
    "write_pgm_channels",
    "pgm_bytes",
    "read_pnm",
]

APTG_MAGIC = b"APTG"
_U64 = (1 << 64) - 1


class GridError(ValueError):
    """Invalid grid dimensions, shapes or non-finite values."""


class NonFiniteError(GridError):
    pass


@dataclass(frozen=True, eq=False)
class LatentGrid:
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise GridError(f"expected a (H, W, C) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise GridError(f"all dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("grid contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, LatentGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self):
        return f"LatentGrid(shape={self.shape})"


@dataclass(frozen=True)
class GridStats:
    mean: float
    std: float


class Purpose(enum.IntEnum):
    """Tag separating the noise streams used for different jobs."""

    INIT = 1
    FORWARD = 2
    TRIAL = 3
    CORPUS = 4


@dataclass(frozen=True)
class SeedKey:
    run_seed: int
    stage: int = 0
    timestep: int = 0
    patch_index: int = 0
    purpose: Purpose = Purpose.INIT

    def words(self) -> list[int]:
        # SeedSequence wants non-negative integers
        return [
            self.run_seed & _U64,
            self.stage & _U64,
            self.timestep & _U64,
            self.patch_index & _U64,
            int(self.purpose),
        ]

    def generator(self) -> np.random.Generator:
        """Counter-based Philox stream for this key."""
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.words())))


def _check_dims(height, width, channels):
    for name, v in (("height", height), ("width", width), ("channels", channels)):
        if int(v) != v or v < 1:
            raise GridError(f"{name} must be a positive integer, got {v!r}")


def make_grid(height: int, width: int, channels: int, fill: float = 0.0) -> LatentGrid:
    _check_dims(height, width, channels)
    return LatentGrid(np.full((height, width, channels), float(fill)))


def stats(grid: LatentGrid) -> GridStats:
    """Pooled mean and population std over every entry of ``grid``."""
    v = grid.values
    first = v.flat[0]
    if np.all(v == first):
        # exact for constant grids; the summed mean can round away from the value
        return GridStats(float(first), 0.0)
    mean = float(v.mean())
    dev = v - mean
    # scale before squaring so tiny spreads do not underflow to zero
    peak = float(np.abs(dev).max())
    std = peak * float(np.sqrt(np.mean((dev / peak) ** 2))) if peak > 0 else 0.0
    return GridStats(mean, std)


def channel_stats(grid: LatentGrid) -> list[GridStats]:
    return [stats(LatentGrid(grid.values[:, :, c])) for c in range(grid.channels)]


def sample_gaussian(height: int, width: int, channels: int, key: SeedKey) -> LatentGrid:
    _check_dims(height, width, channels)
    return LatentGrid(key.generator().standard_normal((height, width, channels)))


# -- serialization ---------------------------------------------------------


def aptg_bytes(grid: LatentGrid) -> bytes:
    h, w, c = grid.shape
    header = APTG_MAGIC + struct.pack("<III", h, w, c)
    return header + grid.values.astype("<f4").tobytes(order="C")


def write_aptg(grid: LatentGrid, path) -> None:
    """Raw little-endian float32 dump behind a 16-byte ``APTG`` header."""
    atomic_write_bytes(Path(path), aptg_bytes(grid))


def read_aptg(path) -> LatentGrid:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != APTG_MAGIC:
        raise GridError(f"{path}: not an APTG file")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * h * w * c
    if len(data) != expected:
        raise GridError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return LatentGrid(arr.astype(np.float64))


def pgm_bytes(channel: np.ndarray) -> bytes:
    """16-bit binary PGM, values mapped affinely from [min, max] to [0, 65535]."""
    channel = np.asarray(channel, dtype=np.float64)
    lo, hi = float(channel.min()), float(channel.max())
    if hi > lo:
        scaled = (channel - lo) / (hi - lo) * 65535.0
    else:
        scaled = np.zeros_like(channel)
    pix = np.rint(scaled).astype(">u2")
    h, w = channel.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes()


def write_pgm_channels(grid: LatentGrid, stem) -> list[Path]:
    """Write one PGM per channel as ``<stem>_c<i>.pgm``; returns the paths."""
    stem = Path(stem)
    paths = []
    for c in range(grid.channels):
        p = stem.with_name(f"{stem.name}_c{c}.pgm")
        atomic_write_bytes(p, pgm_bytes(grid.values[:, :, c]))
        paths.append(p)
    return paths


def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> LatentGrid:
    """Read a binary PGM (P5) or PPM (P6) image as a grid with values in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pnm_tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise GridError(f"{path}: only binary PGM/PPM are supported")
    w, h, maxval = int(w), int(h), int(maxval)
    c = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=h * w * c, offset=offset)
    return LatentGrid(arr.reshape(h, w, c).astype(np.float64) / maxval)
