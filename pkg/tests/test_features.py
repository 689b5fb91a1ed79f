import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal

from xattn import features as X

SR = 16000


def tone(freq, seconds=1.0, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return X.AudioClip(np.sin(2 * np.pi * freq * t), sr)


def dominant_hz(x, sr=SR):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(spec) * sr / len(x)


@pytest.mark.parametrize("n,T", [(16000, 98), (400, 1), (40000, 248)])
def test_frame_counts(n, T):
    assert X.num_frames(n, SR) == T
    assert X.frame_signal(X.AudioClip(np.zeros(n), SR)).shape == (T, 400)


def test_frame_signal_too_short():
    with pytest.raises(X.TooShortError):
        X.frame_signal(X.AudioClip(np.zeros(399), SR))


def test_frames_are_hann_windowed():
    fr = X.frame_signal(X.AudioClip(np.ones(800), SR))
    np.testing.assert_allclose(fr[0], signal.get_window("hann", 400))


def test_logmel_floor():
    out = X.logmel_energies(np.zeros(400), SR)
    assert out.shape == (80,)
    np.testing.assert_array_equal(out, math.log(1e-10))


def test_logmel_tone_peaks_at_its_band():
    centres = X.band_centers_hz(SR)
    win = signal.get_window("hann", 400)
    t = np.arange(400) / SR
    for k in (5, 20, 40, 60):
        e = X.logmel_energies(win * np.sin(2 * np.pi * centres[k] * t), SR)
        assert e[k] > e[k - 1] and e[k] > e[k + 1], k


def test_logmel_scaling_adds_log4():
    rng = np.random.default_rng(0)
    frame = rng.normal(size=400)
    a = X.logmel_energies(frame, SR)
    b = X.logmel_energies(2 * frame, SR)
    np.testing.assert_allclose(b - a, math.log(4), rtol=0, atol=1e-12)


def test_pitch_sawtooth_200hz():
    t = np.arange(SR) / SR
    clip = X.AudioClip(signal.sawtooth(2 * np.pi * 200 * t), SR)
    f0, _ = X.pitch_track(clip)
    assert 190 <= np.median(f0) <= 210
    pf = X.pitch_features(clip)
    assert np.median(pf[:, 0]) > 0.9


@pytest.mark.parametrize("f", [80.0, 130.0, 250.0, 390.0])
def test_pitch_tones_across_band(f):
    f0, _ = X.pitch_track(tone(f))
    assert abs(np.median(f0) - f) / f < 0.02


def test_white_noise_is_unvoiced():
    rng = np.random.default_rng(1234)
    pf = X.pitch_features(X.AudioClip(rng.normal(size=2 * SR), SR))
    assert pf[:, 0].mean() < 0.3


def test_constant_f0_delta_near_zero():
    pf = X.pitch_features(tone(150.0))
    assert np.abs(pf[1:-1, 2]).max() < 1e-3
    assert pf.shape == (98, 3)
    assert np.all((pf[:, 0] >= 0) & (pf[:, 0] <= 1))
    assert np.all((pf[:, 1] >= math.log(60) - 1e-12) & (pf[:, 1] <= math.log(400) + 1e-12))


def test_cmvn_examples():
    out = X.cmvn(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_allclose(out[:, 0], [-math.sqrt(1.5), 0, math.sqrt(1.5)], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out[:, 1], 0.0)
    with pytest.raises(X.TooShortError):
        X.cmvn(np.ones((1, 3)))


def test_cmvn_moments_and_idempotence():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(3.0, 5.0, size=(rng.integers(2, 300), 83)) * rng.uniform(0.01, 100, 83)
        y = X.cmvn(x)
        assert np.abs(y.mean(axis=0)).max() < 1e-9
        assert np.abs(y.var(axis=0) - 1).max() < 1e-6
        np.testing.assert_allclose(X.cmvn(y), y, rtol=0, atol=1e-9)


def test_extract_shape_and_finite():
    rng = np.random.default_rng(3)
    clip = X.AudioClip(rng.normal(size=SR) * 0.1, SR)
    fm = X.extract(clip)
    assert fm.values.shape == (98, 83)
    assert np.isfinite(fm.values).all()
    silent = X.extract(X.AudioClip(np.zeros(SR), SR))
    assert np.isfinite(silent.values).all()


def test_extract_resamples_other_rates():
    t = np.arange(8000) / 8000
    fm = X.extract(X.AudioClip(np.sin(2 * np.pi * 200 * t), 8000))
    assert fm.n_frames == 98
    assert abs(np.exp(np.median(fm.values[:, 81])) - 200) < 5


def test_speed_perturb_lengths():
    x = X.AudioClip(np.random.default_rng(4).normal(size=16000), SR)
    assert len(X.speed_perturb(x, 0.9).samples) == 17778
    assert len(X.speed_perturb(x, 1.1).samples) == round(16000 / 1.1)
    same = X.speed_perturb(x, 1.0)
    assert len(same.samples) == 16000 and np.abs(same.samples - x.samples).max() < 1e-6
    back = X.speed_perturb(X.speed_perturb(x, 0.9), 1 / 0.9)
    assert abs(len(back.samples) - 16000) <= 2
    with pytest.raises(ValueError):
        X.speed_perturb(x, 0.0)


@given(st.integers(400, 50000), st.sampled_from([0.9, 1.1, 0.5, 1.7, 1.0]))
@settings(max_examples=30, deadline=None)
def test_speed_perturb_length_formula(n, factor):
    out = X.speed_perturb(X.AudioClip(np.zeros(n), SR), factor)
    assert len(out.samples) == round(n / factor)


def test_speed_perturb_shifts_pitch():
    out = X.speed_perturb(tone(440.0), 1.1)
    assert abs(dominant_hz(out.samples) - 484) < 2


def test_spec_augment_determinism_and_noop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 83))
    pol = X.SpecAugmentPolicy()
    a = X.spec_augment(x, pol, np.random.default_rng(9))
    b = X.spec_augment(x, pol, np.random.default_rng(9))
    assert np.array_equal(a, b)
    noop = X.SpecAugmentPolicy(n_time_masks=0, n_feat_masks=0)
    assert np.array_equal(X.spec_augment(x, noop, rng), x)


def test_spec_augment_mean_fraction():
    rng = np.random.default_rng(6)
    fracs = []
    for _ in range(1000):
        T = int(rng.integers(100, 600))
        x = rng.normal(size=(T, 83)) + 5.0  # no exact zeros before masking
        fracs.append(np.mean(X.spec_augment(x, X.SpecAugmentPolicy(), rng) == 0))
    assert 0.08 <= np.mean(fracs) <= 0.14


def test_spec_augment_clips_large_masks():
    pol = X.SpecAugmentPolicy(max_time_mask_frames=500, max_feat_mask_bins=500)
    out = X.spec_augment(np.ones((5, 4)), pol, np.random.default_rng(0))
    assert out.shape == (5, 4)


@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.integers(1, 20)), elements=st.floats(0.5, 9.0)),
       st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_spec_augment_leaves_unmasked_cells(x, seed):
    out = X.spec_augment(x, X.SpecAugmentPolicy(), np.random.default_rng(seed))
    kept = out != 0
    assert np.array_equal(out[kept], x[kept])


def test_cache_round_trip(tmp_path):
    x = np.random.default_rng(7).normal(size=(17, 83))
    X.save_features(tmp_path / "a.xaf", x)
    assert np.array_equal(X.load_features(tmp_path / "a.xaf"), x)
    (tmp_path / "b.xaf").write_bytes(b"junk")
    with pytest.raises(ValueError):
        X.load_features(tmp_path / "b.xaf")
