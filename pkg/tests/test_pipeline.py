import json

import numpy as np
import pytest

from apt_upscale.diffuse import DenoiserSpec, ddim_step, forward_trajectory, gaussian_eps
from apt_upscale.grid import GridStats, LatentGrid, SeedKey, make_grid, sample_gaussian, stats
from apt_upscale.pipeline import (
    PipelineAbort,
    PipelineConfig,
    blend_weights,
    cosine_decay,
    generate_reference,
    run_apt,
    skip_residual,
    upscale_stage,
)
from apt_upscale.resample import dilated_layout, upsample
from apt_upscale.schedule import NoiseSchedule, build_schedule, build_substeps
from apt_upscale.statmatch import match_all_dilated

SMALL = dict(height=8, width=8, channels=2, n_steps=10, t0=6, T=100)


def small(**kw):
    return PipelineConfig(**{**SMALL, **kw})


def test_cosine_decay_points():
    assert cosine_decay(30, 30) == 1.0
    assert cosine_decay(0, 30) == 0.0
    assert cosine_decay(15, 30) == pytest.approx(0.5, abs=1e-15)
    assert cosine_decay(15, 30, exponent=2) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_decay(31, 30)


def test_cosine_decay_monotone():
    vals = [cosine_decay(t, 30, 1.7) for t in range(31)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_blend_weights():
    w = blend_weights(30)
    assert len(w) == 30 and w[0] == 1.0 and w[-1] == 0.0
    assert all(a > b for a, b in zip(w, w[1:]))
    assert blend_weights(1) == [1.0]
    assert blend_weights(4, constant=0.3) == [0.3] * 4


def test_skip_residual_examples():
    a, b = make_grid(2, 2, 1, 2.0), make_grid(2, 2, 1, 4.0)
    assert skip_residual(a, b, 1.0) is a
    assert skip_residual(a, b, 0.0) is b
    assert np.all(skip_residual(a, b, 0.5).values == 3.0)
    with pytest.raises(ValueError):
        skip_residual(a, b, 1.5)
    with pytest.raises(ValueError):
        skip_residual(a, make_grid(2, 3, 1), 0.5)


def test_config_rejects():
    for kw in (
        dict(t0=0),
        dict(t0=11),
        dict(overlap=1.0),
        dict(lambda1=2.0),
        dict(sm_reference="base"),
        dict(upsampler="lanczos"),
        dict(trajectory="ode"),
        dict(workers=0),
        dict(height=0),
    ):
        with pytest.raises(ValueError):
            small(**kw)


def test_stage_eta_lookup_and_override():
    c = PipelineConfig()
    assert [c.stage_eta(s) for s in (2, 3, 4)] == [2.0, 3.0, 3.5]
    assert PipelineConfig(eta_overrides={3: 1.25}).stage_eta(3) == 1.25


def test_phase1_only():
    r = run_apt(small(scale=1))
    assert r.stages == [] and list(r.grids) == [1]
    assert r.phase1.denoiser_calls == 10
    assert r.final.shape == (8, 8, 2)


def test_zero_noise_reference_is_initial_noise():
    c = small()
    flat = NoiseSchedule.from_betas(np.zeros(101))
    key = SeedKey(c.seed, stage=1)
    z, st = generate_reference(c, key=key, schedule=flat)
    init = sample_gaussian(8, 8, 2, key)
    assert z == init and st == stats(init)


def test_call_count_default_geometry():
    # 128x128 stage from a 64x64 base: 9 local + 4 dilated patches per step
    c = PipelineConfig(channels=1)
    z1 = sample_gaussian(64, 64, 1, SeedKey(0))
    _, rec = upscale_stage(z1, 2, c, stats(z1))
    assert (rec.local_patches, rec.dilated_patches) == (9, 4)
    assert rec.denoiser_calls == 30 * 13 == 390
    assert rec.start_timestep == 600


def test_step_accounting():
    r = run_apt(small(scale=3))
    for rec in r.stages:
        assert len(rec.step_stats) == 6
        assert rec.calls_local == 6 * rec.local_patches
        assert rec.calls_dilated == 6 * rec.dilated_patches == 6 * rec.stage**2
        assert rec.step_stats[0]["lambda1"] == 1.0 and rec.step_stats[-1]["lambda2"] == 0.0
        assert rec.step_stats[-1]["t"] == 0
    assert r.total_denoiser_calls == 10 + sum(x.denoiser_calls for x in r.stages)


def test_eta_per_stage():
    r = run_apt(small(scale=4, channels=1, n_steps=5, t0=3))
    assert [(x.stage, x.eta) for x in r.stages] == [(2, 2.0), (3, 3.0), (4, 3.5)]
    assert [x.dims for x in r.stages] == [(16, 16, 1), (24, 24, 1), (32, 32, 1)]


def test_deterministic_across_workers_and_runs():
    a = run_apt(small(scale=3))
    b = run_apt(small(scale=3, workers=4))
    c = run_apt(small(scale=3))
    for s in a.grids:
        assert np.array_equal(a.grids[s].values, b.grids[s].values)
        assert np.array_equal(a.grids[s].values, c.grids[s].values)
    assert a.to_dict(timing=False) != run_apt(small(scale=3, seed=1)).to_dict(timing=False)


def test_sm_precondition_recorded():
    r = run_apt(small(scale=3))
    for rec in r.stages:
        assert rec.sm_max_deviation <= 1e-9
        assert rec.degenerate_patches == []


def test_reduces_to_plain_ddim():
    # one local patch covering the grid, no skip residual, no dilated path
    c = small(channels=1, lambda1=0.0, lambda2=0.0, patch_height=16, patch_width=16)
    z1 = sample_gaussian(8, 8, 1, SeedKey(5))
    ref = stats(z1)
    got, rec = upscale_stage(z1, 2, c, ref)
    assert rec.local_patches == 1

    sched = build_schedule(c.beta0, c.betaT, c.T, 2.0)
    steps = build_substeps(c.T, c.n_steps, c.t0)
    z0 = match_all_dilated(upsample(z1, 16, 16), dilated_layout(16, 16, 8, 8), ref)
    z, _ = forward_trajectory(z0, sched, steps.start_timestep, SeedKey(c.seed, stage=2))
    for t, tp in steps.pairs():
        z = ddim_step(z, gaussian_eps(z, t, sched), sched, t, tp)
    assert np.max(np.abs(got.values - z.values)) <= 1e-9


def test_variants_run():
    # scale 3 so that "previous" differs from the phase-1 reference
    base = run_apt(small(scale=3))
    for kw in (
        dict(trajectory="shared"),
        dict(sm_reference="previous"),
        dict(per_channel_matching=True),
        dict(statistical_matching=False),
        dict(upsampler="nearest"),
        dict(fusion_weighting="gaussian"),
        dict(lambda1=0.3, lambda2=0.6),
        dict(denoiser=DenoiserSpec("gmm_prior", means=(-1, 1), stds=(0.5, 0.5), weights=(0.5, 0.5))),
    ):
        r = run_apt(small(scale=3, **kw))
        assert r.final.shape == (24, 24, 2)
        assert not np.array_equal(r.final.values, base.final.values), kw


def test_nearest_upsampler_sm_is_identity():
    c = small(upsampler="nearest")
    z1 = sample_gaussian(8, 8, 2, SeedKey(3))
    _, rec = upscale_stage(z1, 2, c, stats(z1))
    assert rec.sm_max_deviation == 0.0


def test_report_is_json():
    r = run_apt(small())
    d = json.loads(json.dumps(r.to_dict()))
    assert d["final_dims"] == [16, 16, 2]
    assert "wall_time" in d["stages"][0]
    assert "wall_time" not in r.to_dict(timing=False)["stages"][0]


def test_nan_denoiser_aborts_with_partial_report():
    def eps(z, t, sched, label):
        if z.height > 8 or z.width > 8:
            return LatentGrid(np.full(z.shape, np.nan))
        return gaussian_eps(z, t, sched)

    c = small(denoiser=DenoiserSpec("external", fn=eps), lambda2=0.0, patch_height=16, patch_width=16)
    with pytest.raises(PipelineAbort) as info:
        run_apt(c)
    rep = info.value.report
    assert rep.aborted and "stage 2" in rep.error
    assert list(rep.grids) == [1] and rep.phase1 is not None and rep.stages == []


def test_upscale_stage_input_checks():
    c = small()
    with pytest.raises(ValueError):
        upscale_stage(make_grid(8, 8, 2), 1, c, GridStats(0, 1))
    with pytest.raises(ValueError):
        upscale_stage(make_grid(16, 16, 2), 2, c, GridStats(0, 1))
