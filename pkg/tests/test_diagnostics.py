import math
from dataclasses import replace

import numpy as np
import pytest

from apt_upscale.diagnostics import (
    CurveSpec,
    center_crop,
    curves_csv,
    dilated_shift_report,
    eta_sweep,
    schedule_curves,
    self_similarity,
    shortcut_sweep,
    texture_corpus,
    variance_scaling_check,
    zoom_self_similarity,
)
from apt_upscale.grid import GridError, LatentGrid, SeedKey, make_grid
from apt_upscale.pipeline import PipelineConfig
from apt_upscale.resample import dilated_layout, upsample
from apt_upscale.schedule import NoiseSchedule, build_schedule


@pytest.fixture(scope="module")
def corpus():
    return texture_corpus()


def test_corpus_fixed_and_in_range(corpus):
    assert set(corpus) == {"checker", "value_noise", "ramp"}
    again = texture_corpus()
    for name, tex in corpus.items():
        assert tex.shape == (64, 64, 3)
        assert tex.values.min() >= 0 and tex.values.max() <= 1
        assert tex == again[name]
    assert texture_corpus(seed=1)["checker"] != corpus["checker"]


def test_center_crop():
    g = LatentGrid(np.arange(36.0).reshape(6, 6))
    assert center_crop(g, 2).values[:, :, 0].tolist() == [[14, 15], [20, 21]]
    with pytest.raises(GridError):
        center_crop(g, 7)


def test_selfsim_constant():
    rep = self_similarity(make_grid(8, 8, 3, 0.4), sample_n=None, value_range=(0, 1))
    assert np.all(rep.matrix == 1.0) and rep.mean == 1.0


def test_selfsim_two_pixel():
    rep = self_similarity(LatentGrid(np.array([[0.0, 1.0]])), sample_n=None)
    np.testing.assert_array_equal(rep.matrix, [[1, 0], [0, 1]])
    assert rep.mean == 0.5


def test_selfsim_bounds(rng):
    rep = self_similarity(LatentGrid(rng.random((20, 20, 3))), sample_n=16, value_range=(0, 1))
    assert rep.matrix.shape == (256, 256)
    assert np.all(rep.matrix <= 1) and np.all(rep.matrix >= 0)
    np.testing.assert_array_equal(np.diag(rep.matrix), 1.0)
    np.testing.assert_array_equal(rep.matrix, rep.matrix.T)


def test_checker_centre_crop_more_similar_after_upscale(corpus):
    tex = corpus["checker"]
    plain = self_similarity(center_crop(tex, 32), value_range=(0, 1)).mean
    up = self_similarity(center_crop(upsample(tex, 128, 128), 32), value_range=(0, 1)).mean
    assert up > plain


def test_zoom_trend(corpus):
    for name, tex in corpus.items():
        reps = zoom_self_similarity(tex, (1, 2, 4))
        means = [reps[f].mean for f in (1, 2, 4)]
        assert means[0] <= means[1] <= means[2], name
        assert [reps[f].tiles for f in (1, 2, 4)] == [4, 16, 64]


def test_shift_nearest_zero(corpus):
    for tex in corpus.values():
        up = upsample(tex, 256, 256, "nearest")
        rep = dilated_shift_report(tex, up, dilated_layout(256, 256, 64, 64))
        assert np.all(rep.std_deltas == 0) and np.all(rep.mean_deltas == 0)


def test_shift_identity_zero(corpus):
    tex = corpus["checker"]
    rep = dilated_shift_report(tex, tex, dilated_layout(64, 64, 64, 64))
    assert rep.std_deltas.tolist() == [0.0] and rep.mean_deltas.tolist() == [0.0]


def test_shift_bicubic_reduces_variance(corpus):
    for name, tex in corpus.items():
        rep = dilated_shift_report(tex, upsample(tex, 256, 256), dilated_layout(256, 256, 64, 64))
        assert rep.median_std_delta < 0, name
        assert len(rep.std_deltas) == 16
        d = rep.to_dict()
        assert len(d["patches"]) == 16 and sum(d["std_hist"]["counts"]) == 16


def test_shift_reference_mismatch(corpus):
    tex = corpus["ramp"]
    with pytest.raises(GridError):
        dilated_shift_report(make_grid(8, 8, 3), tex, dilated_layout(64, 64, 32, 32))


def test_varscale_k1_and_k2():
    sched = NoiseSchedule.from_betas([0.0, 0.19])  # alpha-bar 0.81 at t = 1
    z0 = make_grid(8, 8, 1, 2.0)
    r1 = variance_scaling_check(z0, 1, sched, 1, 2000, SeedKey(0, stage=1))
    assert r1.passed and abs(r1.signal_ratio - 1) <= 3 * r1.mean_se / r1.expected_mean
    r2 = variance_scaling_check(z0, 2, sched, 1, 2000, SeedKey(0, stage=2))
    assert r2.expected_mean == pytest.approx(0.9, abs=1e-15)
    assert r2.passed
    assert r2.expected_noise_std == pytest.approx(math.sqrt(0.19), abs=1e-15)


def test_varscale_rejects():
    s = build_schedule()
    z0 = make_grid(2, 2, 1, 1.0)
    for args in ((0.5, 10, 2000), (2, 10, 10), (2, 0, 2000)):
        with pytest.raises(ValueError):
            variance_scaling_check(z0, args[0], s, args[1], args[2], SeedKey(0))


def test_curves_power_mean_and_shift():
    lo, hi, shifted = schedule_curves([CurveSpec(1.0), CurveSpec(3.5), CurveSpec(1.0, shift_factor=0.25)])
    assert np.all(hi.beta >= lo.beta - 1e-15)
    assert np.all(hi.log_snr[1:] <= lo.log_snr[1:] + 1e-12)
    np.testing.assert_allclose(lo.log_snr[1:] - shifted.log_snr[1:], math.log(4), atol=1e-9)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)
    assert np.isinf(lo.log_snr[0])
    np.testing.assert_allclose(np.cumprod(1 - shifted.beta[1:]), shifted.alpha_bar[1:], rtol=1e-12)


def test_curves_csv_shapes():
    one = curves_csv(schedule_curves([CurveSpec(1.0, T=1000)]))
    lines = one.splitlines()
    assert lines[0] == "t,beta,alpha_bar,log_snr" and len(lines) == 1002
    two = curves_csv(schedule_curves([CurveSpec(2.0, T=10), CurveSpec(3.5, T=10)]))
    rows = two.splitlines()[1:]
    assert two.startswith("curve,") and len(rows) == 22
    assert {r.split(",")[0] for r in rows} == {"eta=2", "eta=3.5"}


SMALL = PipelineConfig(height=8, width=8, channels=2, n_steps=10, t0=6, T=100)


def test_eta_sweep_rows():
    rows = eta_sweep(SMALL, [1.0, 2.0, 3.5])
    assert [r["eta"] for r in rows] == [1.0, 2.0, 3.5]
    assert all(r["stage"] == 2 and r["ratio"] == 2.0 for r in rows)
    assert len({r["rmse_to_start"] for r in rows}) == 3
    rows3 = eta_sweep(replace(SMALL, per_channel_matching=True), [3.0], stage=3)
    assert rows3[0]["ratio"] == 1.5


def test_shortcut_sweep_rows():
    rows = shortcut_sweep(SMALL, [6, 10])
    assert [r["denoiser_calls"] for r in rows] == [6 * 13, 10 * 13]
    assert rows[1]["rmse_vs_full"] == 0.0
    assert rows[0]["rmse_vs_full"] > 0
    assert rows[0]["start_timestep"] == 60
