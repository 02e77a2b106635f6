import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvenhance.augment import (
    AugmentConfig,
    AugmentationSpec,
    admissible_windows,
    bilinear_resize,
    build_training_example,
    degrade_frames,
    noise_augment,
    sample_scale,
    sample_spec,
    select_key_frames,
)
from stvenhance.autoencoder import AutoencoderConfig, VideoClip, pixels_to_model_latents
from stvenhance.schedule import build_schedule
from stvenhance.synthdata import make_clips

SCHED = build_schedule(1000)


def textbook_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Reference resize with half-pixel centres; source coordinates clamped at the border."""
    in_h, in_w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:], np.float64)

    def taps(o, n_in, n_out):
        src = max((o + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    for y in range(out_h):
        y0, y1, wy = taps(y, in_h, out_h)
        for x in range(out_w):
            x0, x1, wx = taps(x, in_w, out_w)
            top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
            bot = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
            out[y, x] = (1 - wy) * top + wy * bot
    return out


def test_sample_spec_deterministic():
    a = sample_spec(np.random.default_rng(11), 9)
    b = sample_spec(np.random.default_rng(11), 9)
    assert a == b
    a.validate(9)


def test_sample_spec_no_admissible_window():
    with pytest.raises(ValueError):
        sample_spec(np.random.default_rng(0), 10, AugmentConfig(windows=(4, 8)))


def test_admissible_windows():
    assert admissible_windows(9, range(1, 9)) == [1, 2, 4, 8]
    assert admissible_windows(25, range(1, 9)) == [1, 2, 3, 4, 6, 8]


def test_scale_sampler_against_rejection_oracle():
    # rejection sampling from the uniform on [1, 8] with acceptance s/8 targets density ∝ s
    rng = np.random.default_rng(1)
    u = rng.uniform(1, 8, 400_000)
    accepted = u[rng.random(u.size) < u / 8]
    ours = sample_scale(np.random.default_rng(2), size=200_000)
    assert accepted.mean() == pytest.approx(1022 / 189, abs=0.02)
    assert ours.mean() == pytest.approx(accepted.mean(), abs=0.03)
    assert ours.min() >= 1 and ours.max() <= 8
    # the quartiles agree as well
    np.testing.assert_allclose(np.quantile(ours, [0.25, 0.5, 0.75]),
                               np.quantile(accepted, [0.25, 0.5, 0.75]), atol=0.05)


@pytest.mark.parametrize("f,m,expected", [(9, 4, [0, 4, 8]), (9, 1, list(range(9))), (25, 8, [0, 8, 16, 24]),
                                          (1, 3, [0])])
def test_select_key_frames(f, m, expected):
    assert select_key_frames(f, m) == expected


def test_select_key_frames_divisibility():
    with pytest.raises(ValueError):
        select_key_frames(10, 4)


@given(k=st.integers(1, 6), m=st.integers(1, 8))
def test_key_frames_property(k, m):
    f = (k - 1) * m + 1
    keys = select_key_frames(f, m)
    assert keys[0] == 0 and keys[-1] == f - 1
    assert all(b - a == m for a, b in zip(keys, keys[1:]))


def test_degrade_identity_and_constant():
    x = np.random.default_rng(0).random((2, 16, 16, 3), dtype=np.float32)
    assert np.array_equal(degrade_frames(x, 1.0), x)
    c = np.full((1, 16, 16, 3), 0.4, np.float32)
    for s in (1.5, 2.0, 3.7, 8.0):
        np.testing.assert_allclose(degrade_frames(c, s), 0.4, atol=1e-6)


def test_degrade_matches_textbook_bilinear():
    ramp = np.tile(np.linspace(0, 1, 4, dtype=np.float32)[None, :, None], (4, 1, 3))
    small = textbook_bilinear(ramp, 2, 2)
    expected = textbook_bilinear(small, 4, 4)
    got = degrade_frames(ramp[None], 2.0)[0]
    np.testing.assert_allclose(got, expected, atol=1e-6)
    # horizontal ramp stays constant along columns
    assert np.allclose(got[0], got[3])


def test_bilinear_resize_non_integer_against_oracle():
    img = np.random.default_rng(4).random((5, 7, 3), dtype=np.float32)
    np.testing.assert_allclose(bilinear_resize(img[None], (11, 3))[0], textbook_bilinear(img, 11, 3), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(s=st.floats(1.0, 8.0), seed=st.integers(0, 100))
def test_degrade_range_preserving(s, seed):
    x = np.random.default_rng(seed).random((1, 16, 16, 3), dtype=np.float32)
    y = degrade_frames(x, s)
    assert y.shape == x.shape
    assert y.min() >= -1e-6 and y.max() <= 1 + 1e-6


def test_degrade_errors():
    x = np.zeros((1, 4, 4, 3), np.float32)
    with pytest.raises(ValueError):
        degrade_frames(x, 0.5)
    with pytest.raises(ValueError):
        degrade_frames(np.zeros((1, 2, 2, 3), np.float32), 8.0)


def test_noise_augment_identity_and_schedule_values():
    z = np.random.default_rng(0).normal(size=(3, 4, 4, 48)).astype(np.float32)
    assert np.array_equal(noise_augment(z, 0, SCHED, np.random.default_rng(1)), z)
    out = noise_augment(z, 300, SCHED, np.random.default_rng(5))
    eps = np.random.default_rng(5).standard_normal(z.shape, dtype=np.float32)
    a, s = SCHED.alpha[300], SCHED.sigma[300]
    np.testing.assert_allclose(out, a * z + s * eps, atol=1e-6)
    with pytest.raises(ValueError):
        noise_augment(z, 301, SCHED, np.random.default_rng(0))


@pytest.mark.parametrize("t_prime", [50, 150, 300])
def test_noise_augment_variance_monte_carlo(t_prime):
    z = np.full((10_000,), 0.3, np.float32)
    out = noise_augment(z, t_prime, SCHED, np.random.default_rng(t_prime))
    assert out.var() == pytest.approx(SCHED.sigma[t_prime] ** 2, rel=0.03)
    assert out.mean() == pytest.approx(SCHED.alpha[t_prime] * 0.3, abs=4 * SCHED.sigma[t_prime] / 100)


def test_noise_deviation_grows_with_level():
    z = np.zeros(20_000, np.float32)
    dev = [np.mean(noise_augment(z, t, SCHED, np.random.default_rng(9)) ** 2) for t in (0, 75, 150, 225, 300)]
    assert all(b > a for a, b in zip(dev, dev[1:]))


@pytest.fixture(scope="module")
def clip():
    return make_clips(1, 3, f=9, H=32, W=32)[0]


def _spec(m, s, tp, f=9, seed=0):
    return AugmentationSpec(m=m, s=s, t_prime=tp, key_indices=tuple(select_key_frames(f, m)), seed=seed)


def test_identity_augmentation(clip):
    full, cond = build_training_example(clip, _spec(1, 1.0, 0), SCHED)
    assert np.array_equal(cond.latents, full)


def test_example_counts(clip):
    full, cond = build_training_example(clip, _spec(4, 4.0, 100), SCHED)
    assert full.shape == (9, 8, 8, 48) and cond.latents.shape == (3, 8, 8, 48)


def test_stagewise_composition(clip):
    spec = _spec(4, 2.5, 120, seed=77)
    ae = AutoencoderConfig()
    full, cond = build_training_example(clip, spec, SCHED, ae, keep_stages=True)
    keys = clip.frames[select_key_frames(9, 4)]
    degraded = degrade_frames(keys, 2.5)
    encoded = pixels_to_model_latents(degraded, ae)
    noisy = noise_augment(encoded, 120, SCHED, np.random.default_rng(77))
    assert np.array_equal(cond.stages["keys"], keys)
    assert np.array_equal(cond.stages["degraded"], degraded)
    assert np.array_equal(cond.stages["encoded"], encoded)
    assert np.array_equal(cond.latents, noisy)
    assert np.array_equal(full, pixels_to_model_latents(clip.frames, ae))


def test_pipeline_deterministic(clip):
    spec = _spec(2, 3.3, 200, seed=5)
    a = build_training_example(clip, spec, SCHED)[1].latents
    b = build_training_example(clip, spec, SCHED)[1].latents
    assert np.array_equal(a, b)


def test_spec_validation(clip):
    bad = AugmentationSpec(m=4, s=2.0, t_prime=10, key_indices=(0, 4), seed=0)
    with pytest.raises(ValueError):
        build_training_example(clip, bad, SCHED)
    with pytest.raises(ValueError):
        _spec(4, 9.0, 10).validate(9)
