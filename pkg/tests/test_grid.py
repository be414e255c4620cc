import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apt_upscale.grid import (
    GridError,
    LatentGrid,
    NonFiniteError,
    Purpose,
    SeedKey,
    aptg_bytes,
    make_grid,
    read_aptg,
    read_pnm,
    sample_gaussian,
    stats,
    write_aptg,
    write_pgm_channels,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
grids = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)), elements=finite)


def test_make_grid_zero():
    g = make_grid(2, 2, 1, 0.0)
    assert g.shape == (2, 2, 1)
    assert g.values.size == 4 and np.all(g.values == 0.0)


def test_make_grid_constant_fill():
    g = make_grid(1, 1, 3, 1.5)
    assert g.values.ravel().tolist() == [1.5, 1.5, 1.5]


def test_make_grid_negative_fill_stats():
    g = make_grid(3, 2, 2, -1.0)
    assert g.values.size == 12
    s = stats(g)
    assert s.mean == -1.0 and s.std == 0.0


@pytest.mark.parametrize("dims", [(0, 2, 1), (2, -1, 1), (2, 2, 0)])
def test_make_grid_rejects_bad_dims(dims):
    with pytest.raises(GridError):
        make_grid(*dims)


def test_grid_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        LatentGrid(np.array([[[np.nan]]]))
    with pytest.raises(NonFiniteError):
        LatentGrid(np.array([[[np.inf]]]))


def test_grid_is_read_only():
    g = make_grid(2, 2, 1)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


def test_stats_two_point():
    s = stats(LatentGrid(np.array([[[-2.0], [6.0]]])))
    assert (s.mean, s.std) == (2.0, 4.0)


def test_stats_constant():
    s = stats(make_grid(3, 3, 2, 7.0))
    assert (s.mean, s.std) == (7.0, 0.0)


def test_stats_one_to_four():
    s = stats(LatentGrid(np.arange(1.0, 5.0).reshape(2, 2, 1)))
    assert s.mean == 2.5
    assert s.std == pytest.approx(math.sqrt(1.25), abs=1e-12)
    assert s.std == pytest.approx(1.118034, abs=1e-6)


@given(grids)
def test_stats_matches_naive_two_pass(v):
    g = LatentGrid(v)
    flat = v.ravel().tolist()
    mean = sum(flat) / len(flat)
    var = sum((x - mean) ** 2 for x in flat) / len(flat)
    s = stats(g)
    scale = max(1.0, max(abs(x) for x in flat))
    assert s.mean == pytest.approx(mean, abs=1e-9 * scale)
    assert s.std == pytest.approx(math.sqrt(var), abs=1e-6 * scale)


@given(grids, st.randoms())
def test_stats_permutation_invariant_and_repeatable(v, rnd):
    flat = v.ravel().copy()
    idx = list(range(flat.size))
    rnd.shuffle(idx)
    a, b = stats(LatentGrid(v)), stats(LatentGrid(flat[idx].reshape(v.shape)))
    scale = max(1.0, float(np.abs(v).max()))
    assert a.mean == pytest.approx(b.mean, abs=1e-9 * scale)
    assert a.std == pytest.approx(b.std, abs=1e-6 * scale)
    assert stats(LatentGrid(v)) == a


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 2)), elements=finite))
def test_std_zero_iff_constant(v):
    s = stats(LatentGrid(v))
    assert (s.std == 0.0) == bool(np.all(v == v.flat[0]))


def test_sample_gaussian_deterministic():
    k = SeedKey(7, stage=2, timestep=3, patch_index=1)
    assert sample_gaussian(4, 5, 2, k) == sample_gaussian(4, 5, 2, k)


def test_sample_gaussian_moments():
    g = sample_gaussian(64, 64, 4, SeedKey(0))
    n = g.values.size
    s = stats(g)
    assert abs(s.mean) < 3 / math.sqrt(n)
    # SE of the sample std for a normal is about 1 / sqrt(2n)
    assert abs(s.std - 1.0) < 3 / math.sqrt(2 * n)


def test_sample_gaussian_distinct_keys_differ():
    a = sample_gaussian(8, 8, 1, SeedKey(1, patch_index=0))
    b = sample_gaussian(8, 8, 1, SeedKey(1, patch_index=1))
    assert a != b
    c = sample_gaussian(8, 8, 1, SeedKey(1, purpose=Purpose.FORWARD))
    assert a != c


def test_sample_gaussian_negative_seed_is_accepted():
    assert sample_gaussian(2, 2, 1, SeedKey(-5)) == sample_gaussian(2, 2, 1, SeedKey(-5))


def test_aptg_round_trip(tmp_path, rng):
    g = LatentGrid(rng.standard_normal((3, 5, 2)).astype(np.float32))
    path = tmp_path / "g.aptg"
    write_aptg(g, path)
    data = path.read_bytes()
    assert data[:4] == b"APTG"
    assert int.from_bytes(data[4:8], "little") == 3
    assert int.from_bytes(data[8:12], "little") == 5
    assert int.from_bytes(data[12:16], "little") == 2
    assert len(data) == 16 + 4 * 30
    assert read_aptg(path) == g


def test_aptg_rejects_garbage(tmp_path):
    p = tmp_path / "bad.aptg"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(GridError):
        read_aptg(p)
    p.write_bytes(aptg_bytes(make_grid(2, 2, 1))[:-1])
    with pytest.raises(GridError):
        read_aptg(p)


def test_pgm_channels_and_read_back(tmp_path):
    v = np.zeros((2, 3, 2))
    v[:, :, 0] = [[0, 1, 2], [3, 4, 5]]
    v[:, :, 1] = 9.0
    paths = write_pgm_channels(LatentGrid(v), tmp_path / "g")
    assert [p.name for p in paths] == ["g_c0.pgm", "g_c1.pgm"]
    assert paths[0].read_bytes().startswith(b"P5\n3 2\n65535\n")
    back = read_pnm(paths[0]).values[:, :, 0]
    np.testing.assert_allclose(back, v[:, :, 0] / 5.0)
    assert np.all(read_pnm(paths[1]).values == 0.0)


def test_read_ppm_8bit(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes([0, 255, 51, 255, 0, 102]))
    g = read_pnm(p)
    assert g.shape == (1, 2, 3)
    np.testing.assert_allclose(g.values[0, 0], [0, 1, 0.2])
