import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stvenhance.schedule import (
    build_schedule,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    recover_from_v,
    v_target,
    AugNoiseRange,
    NoiseSchedule,
)

SCHED = build_schedule(1000)


def _fake_schedule(a, s):
    # two-entry schedule with prescribed coefficients at t=1
    return NoiseSchedule(T=1, alpha=np.array([1.0, a]), sigma=np.array([0.0, s]))


def test_schedule_endpoints_and_invariants():
    assert SCHED.alpha[0] == 1.0 and SCHED.sigma[0] == 0.0
    np.testing.assert_allclose(SCHED.alpha**2 + SCHED.sigma**2, 1.0, atol=1e-6)
    assert np.all(np.diff(SCHED.log_snr()[1:]) < 0)
    assert SCHED.alpha[-1] < 1e-3
    assert SCHED.alpha.dtype == np.float64


def test_single_step_schedule():
    s = build_schedule(1)
    assert len(s.alpha) == 2 and s.alpha[1] < 1e-3


def test_cosine_closed_form_at_t5_of_10():
    s = build_schedule(10)
    off = 0.008
    abar = math.cos((0.5 + off) / (1 + off) * math.pi / 2) ** 2 / math.cos(off / (1 + off) * math.pi / 2) ** 2
    assert s.alpha[5] == pytest.approx(math.sqrt(abar), abs=1e-12)


@pytest.mark.parametrize("T,kind", [(0, "cosine"), (-3, "cosine"), (10, "linear")])
def test_build_schedule_rejects(T, kind):
    with pytest.raises(ValueError):
        build_schedule(T, kind)


def test_aug_noise_range():
    AugNoiseRange(300).validate(1000)
    with pytest.raises(ValueError):
        AugNoiseRange(1000).validate(1000)


def test_forward_diffuse_examples():
    z = np.random.default_rng(0).normal(size=(3, 4))
    eps = np.random.default_rng(1).normal(size=(3, 4))
    assert np.array_equal(forward_diffuse(z, 0, eps, SCHED), z)
    fs = _fake_schedule(0.8, 0.6)
    assert forward_diffuse(np.array(1.0), 1, np.array(-0.5), fs) == pytest.approx(0.5)
    zu = np.clip(z, -1, 1)
    assert np.max(np.abs(forward_diffuse(zu, 1000, eps, SCHED) - eps)) < 1e-2
    with pytest.raises(ValueError):
        forward_diffuse(z, 10, eps[:2], SCHED)


def test_v_target_examples():
    z = np.array([0.3, -1.2])
    eps = np.array([0.7, 0.1])
    assert np.array_equal(v_target(z, eps, 0, SCHED), eps)
    np.testing.assert_allclose(v_target(z, eps, 1, _fake_schedule(0.0, 1.0)), -z)
    assert v_target(np.array(1.0), np.array(-0.5), 1, _fake_schedule(0.8, 0.6)) == pytest.approx(-1.0)


def test_recover_from_v_examples():
    zt, v = np.array([0.2, 0.5]), np.array([1.0, -2.0])
    z0, e = recover_from_v(zt, v, 0, SCHED)
    assert np.array_equal(z0, zt) and np.array_equal(e, v)
    z0, e = recover_from_v(np.array(0.5), np.array(-1.0), 1, _fake_schedule(0.8, 0.6))
    assert z0 == pytest.approx(1.0) and e == pytest.approx(-0.5)


@settings(max_examples=200, deadline=None)
@given(t=st.integers(0, 1000), seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(t, seed):
    rng = np.random.default_rng(seed)
    z, eps = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    zt = forward_diffuse(z, t, eps, SCHED)
    z0, e = recover_from_v(zt, v_target(z, eps, t, SCHED), t, SCHED)
    assert np.max(np.abs(z0 - z)) < 1e-6 and np.max(np.abs(e - eps)) < 1e-6


def test_torch_dtype_preserved():
    z = torch.randn(2, 3)
    out = forward_diffuse(z, 500, torch.randn(2, 3), SCHED)
    assert out.dtype == torch.float32


def test_ddim_identity_and_single_jump():
    rng = np.random.default_rng(3)
    z, eps = rng.normal(size=(5,)), rng.normal(size=(5,))
    zt = forward_diffuse(z, 700, eps, SCHED)
    assert ddim_step(zt, rng.normal(size=5), 700, 700, SCHED) is zt
    out = ddim_step(zt, v_target(z, eps, 700, SCHED), 700, 0, SCHED)
    assert np.max(np.abs(out - z)) < 1e-6
    with pytest.raises(ValueError):
        ddim_step(zt, zt, 100, 200, SCHED)


def test_ddim_deterministic():
    zt = torch.randn(4, 4)
    v = torch.randn(4, 4)
    a, b = ddim_step(zt, v, 500, 480, SCHED), ddim_step(zt, v, 500, 480, SCHED)
    assert torch.equal(a, b)


def _gaussian_v(zt, t, mu, var):
    # exact v-prediction when the data are N(mu, var)
    a, s = SCHED.coeffs(t)
    z0 = mu + a * var * (zt - a * mu) / (a * a * var + s * s)
    eps = (zt - a * z0) / s if s > 0 else np.zeros_like(zt)
    return a * eps - s * z0


def _run_ddim(z, steps, mu=0.3, var=1e-6):
    ts = ddim_timesteps(SCHED.T, steps)
    for tc, tn in zip(ts[:-1], ts[1:]):
        z = ddim_step(z, _gaussian_v(z, tc, mu, var), tc, tn, SCHED)
    return z


def test_ddim_50_steps_matches_fine_trajectory():
    # nearly deterministic 1-D data: the denoiser's clean estimate barely moves along the path
    z_T = np.random.default_rng(7).normal(size=64)
    coarse, fine = _run_ddim(z_T, 50), _run_ddim(z_T, 1000)
    assert np.max(np.abs(coarse - fine)) < 1e-3


def test_ddim_first_order_convergence_on_broad_gaussian():
    z_T = np.random.default_rng(7).normal(size=64)
    fine = _run_ddim(z_T, 1000, var=0.25)
    errs = [np.max(np.abs(_run_ddim(z_T, n, var=0.25) - fine)) for n in (25, 50, 100)]
    assert errs[0] > errs[1] > errs[2]
    assert 1.6 < errs[0] / errs[1] < 2.4


def test_ddim_timesteps_shape():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 51
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_cfg_combine():
    vc, vu = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert cfg_combine(vc, vu, 1.0) is vc
    assert cfg_combine(vc, vu, 0.0) is vu
    assert cfg_combine(np.array(1.0), np.array(0.0), 7.5) == pytest.approx(7.5)
    with pytest.raises(ValueError):
        cfg_combine(vc, vu[:1], 2.0)


@given(w=st.floats(0, 20), seed=st.integers(0, 1000))
def test_cfg_fixed_point(w, seed):
    v = np.random.default_rng(seed).normal(size=6)
    assert np.array_equal(cfg_combine(v, v, w), v)
