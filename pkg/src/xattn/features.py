"""Filterbank + pitch front-end, CMVN, speed perturbation and SpecAugment.

Frames are 25 ms Hann windows advanced by 10 ms. Each frame yields 80 log
mel energies and 3 pitch features (voicing confidence, log-f0, delta log-f0),
giving 83 columns.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.signal import get_window, resample_poly

log = logging.getLogger(__name__)

TARGET_SR = 16000
N_MELS = 80
N_PITCH = 3
N_FEATS = N_MELS + N_PITCH
LOG_FLOOR = 1e-10
F0_MIN = 60.0
F0_MAX = 400.0

CACHE_MAGIC = b"XAF1"


class TooShortError(ValueError):
    """Input has fewer samples or frames than the operation needs."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip expects mono samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray
    window_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("FeatureMatrix values must be 2-D (T, F)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_feats(self) -> int:
        return self.values.shape[1]


@dataclass
class SpecAugmentPolicy:
    max_time_mask_frames: int = 20
    max_feat_mask_bins: int = 10
    n_time_masks: int = 2
    n_feat_masks: int = 1
    target_mask_fraction_range: Tuple[float, float] = (0.10, 0.12)
    # draws whose masked fraction lands outside the target range widened by
    # `slack` are redrawn, up to `max_draws` times
    slack: float = 0.02
    max_draws: int = 50

    def __post_init__(self):
        lo, hi = self.target_mask_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad target range {self.target_mask_fraction_range}")
        for name in ("max_time_mask_frames", "max_feat_mask_bins", "n_time_masks", "n_feat_masks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def is_noop(self) -> bool:
        return (self.n_time_masks == 0 or self.max_time_mask_frames == 0) and (
            self.n_feat_masks == 0 or self.max_feat_mask_bins == 0
        )


# ---------------------------------------------------------------------------
# framing and spectra


def _samples(ms: float, sr: int) -> int:
    return int(round(ms * sr / 1000.0))


def num_frames(n_samples: int, sr: int, window_ms: float = 25.0, hop_ms: float = 10.0) -> int:
    W, H = _samples(window_ms, sr), _samples(hop_ms, sr)
    if n_samples < W:
        return 0
    return 1 + (n_samples - W) // H


def _frame_view(x: np.ndarray, W: int, H: int) -> np.ndarray:
    T = 1 + (len(x) - W) // H
    return np.lib.stride_tricks.as_strided(
        x, shape=(T, W), strides=(H * x.strides[0], x.strides[0]), writeable=False
    )


def frame_signal(clip: AudioClip, window_ms: float = 25.0, hop_ms: float = 10.0, window: bool = True) -> np.ndarray:
    """Slice a clip into ``(T, W)`` frames, Hann-windowed unless ``window=False``."""
    W, H = _samples(window_ms, clip.sample_rate), _samples(hop_ms, clip.sample_rate)
    if len(clip.samples) < W:
        raise TooShortError(f"clip of {len(clip.samples)} samples is shorter than one {W}-sample window")
    frames = _frame_view(np.ascontiguousarray(clip.samples), W, H)
    if not window:
        return frames.copy()
    return frames * get_window("hann", W)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_FBANK_CACHE: dict = {}


def mel_filterbank(sr: int, n_fft: int, n_mels: int = N_MELS, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular HTK-mel filters on the rfft bin grid, shape ``(n_mels, n_fft//2+1)``."""
    fmax = sr / 2.0 if fmax is None else fmax
    key = (sr, n_fft, n_mels, fmin, fmax)
    if key in _FBANK_CACHE:
        return _FBANK_CACHE[key]
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    _FBANK_CACHE[key] = fb
    return fb


def band_centers_hz(sr: int, n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))[1:-1]


def logmel_energies(frame, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Log mel energies of one windowed frame (or a ``(T, W)`` stack of frames)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    frame = np.asarray(frame, dtype=np.float64)
    n_fft = next_pow2(frame.shape[-1])
    power = np.abs(np.fft.rfft(frame, n=n_fft, axis=-1)) ** 2
    energies = power @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


# ---------------------------------------------------------------------------
# pitch


def _nccf(frames: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """Normalised cross-correlation of each frame with its own lagged copy."""
    T, W = frames.shape
    x = frames - frames.mean(axis=1, keepdims=True)
    n_fft = next_pow2(2 * W)
    spec = np.fft.rfft(x, n=n_fft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=n_fft, axis=1)[:, : lag_max + 1]
    cum = np.concatenate([np.zeros((T, 1)), np.cumsum(x * x, axis=1)], axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    e_head = cum[:, W - lags]  # energy of x[0:W-lag]
    e_tail = cum[:, W:W + 1] - cum[:, lags]  # energy of x[lag:W]
    denom = np.sqrt(e_head * e_tail)
    return np.where(denom > 1e-12, acf[:, lags] / np.maximum(denom, 1e-12), 0.0)


def pitch_track(clip: AudioClip, window_ms: float = 25.0, hop_ms: float = 10.0):
    """Per-frame ``(f0_hz, nccf_peak)`` from an autocorrelation tracker.

    The chosen lag is the shortest one whose correlation is within 10% of the
    best peak, which suppresses octave-down errors.
    """
    sr = clip.sample_rate
    frames = frame_signal(clip, window_ms, hop_ms, window=False)
    # one extra lag each side so band-edge periods can still be local maxima
    lag_min = max(1, int(np.floor(sr / F0_MAX)) - 1)
    lag_max = min(int(np.ceil(sr / F0_MIN)) + 1, frames.shape[1] - 2)
    r = _nccf(frames, lag_min, lag_max)
    best = r.max(axis=1)
    # local maxima only
    peak = np.zeros_like(r, dtype=bool)
    peak[:, 1:-1] = (r[:, 1:-1] >= r[:, :-2]) & (r[:, 1:-1] >= r[:, 2:])
    good = peak & (r >= 0.9 * best[:, None])
    idx = np.where(good.any(axis=1), good.argmax(axis=1), r.argmax(axis=1))
    lag = idx + lag_min
    # parabolic refinement around the chosen lag
    i0 = np.clip(idx, 1, r.shape[1] - 2)
    rows = np.arange(len(idx))
    ym, y0, yp = r[rows, i0 - 1], r[rows, i0], r[rows, i0 + 1]
    den = ym - 2 * y0 + yp
    shift = np.where(np.abs(den) > 1e-12, 0.5 * (ym - yp) / np.where(den == 0, 1, den), 0.0)
    shift = np.where(idx == i0, np.clip(shift, -0.5, 0.5), 0.0)
    f0 = np.clip(sr / (lag + shift), F0_MIN, F0_MAX)
    return f0, np.clip(r[rows, idx], 0.0, 1.0)


def voicing_confidence(nccf_peak: np.ndarray) -> np.ndarray:
    """Map correlation peak to [0, 1]; random signals peak well below 0.45."""
    return np.clip((np.asarray(nccf_peak) - 0.45) / 0.45, 0.0, 1.0)


def pitch_features(clip: AudioClip, window_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """``(T, 3)``: voicing confidence, log-f0, delta log-f0.

    Log-f0 of frames with confidence below 0.5 is linearly interpolated from
    voiced neighbours (or held at the band's geometric centre when nothing is
    voiced).
    """
    f0, peak = pitch_track(clip, window_ms, hop_ms)
    conf = voicing_confidence(peak)
    logf0 = np.log(f0)
    voiced = conf >= 0.5
    t = np.arange(len(f0))
    if voiced.any():
        logf0 = np.interp(t, t[voiced], logf0[voiced])
    else:
        logf0 = np.full(len(f0), 0.5 * (np.log(F0_MIN) + np.log(F0_MAX)))
    padded = np.concatenate([logf0[:1], logf0, logf0[-1:]])
    delta = 0.5 * (padded[2:] - padded[:-2])
    return np.stack([conf, logf0, delta], axis=1)


# ---------------------------------------------------------------------------
# normalisation and extraction


def cmvn(fm, eps: float = 1e-10):
    """Per-column standardisation (population variance). Constant columns become 0."""
    values = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm, dtype=np.float64)
    if values.shape[0] < 2:
        raise TooShortError("CMVN needs at least 2 frames")
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    ok = sd > eps * np.maximum(1.0, np.abs(mu))
    out = np.where(ok, (values - mu) / np.where(ok, sd, 1.0), 0.0)
    if isinstance(fm, FeatureMatrix):
        return FeatureMatrix(out, fm.window_ms, fm.hop_ms)
    return out


def apply_global_cmvn(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Normalise with corpus-level statistics (see :func:`corpus_stats`)."""
    ok = std > 1e-10
    return np.where(ok, (values - mean) / np.where(ok, std, 1.0), 0.0)


def corpus_stats(matrices) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled per-column mean and population std over a list of ``(T, F)`` arrays."""
    n = 0
    s = s2 = None
    for m in matrices:
        m = np.asarray(m, dtype=np.float64)
        s = m.sum(axis=0) if s is None else s + m.sum(axis=0)
        s2 = (m * m).sum(axis=0) if s2 is None else s2 + (m * m).sum(axis=0)
        n += m.shape[0]
    if not n:
        raise ValueError("no frames to pool")
    mean = s / n
    return mean, np.sqrt(np.maximum(s2 / n - mean * mean, 0.0))


def resample_to(clip: AudioClip, sr: int = TARGET_SR) -> AudioClip:
    if clip.sample_rate == sr:
        return clip
    frac = Fraction(sr, clip.sample_rate)
    y = resample_poly(clip.samples, frac.numerator, frac.denominator)
    return AudioClip(y, sr)


def extract(clip: AudioClip, window_ms: float = 25.0, hop_ms: float = 10.0, n_mels: int = N_MELS) -> FeatureMatrix:
    """Raw (un-normalised) ``(T, n_mels + 3)`` features of a clip at 16 kHz."""
    clip = resample_to(clip, TARGET_SR)
    frames = frame_signal(clip, window_ms, hop_ms)
    fb = logmel_energies(frames, clip.sample_rate, n_mels)
    pf = pitch_features(clip, window_ms, hop_ms)
    values = np.concatenate([fb, pf], axis=1)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite features")
    return FeatureMatrix(values, window_ms, hop_ms)


# ---------------------------------------------------------------------------
# augmentation


def speed_perturb(clip: AudioClip, factor: float) -> AudioClip:
    """Play the clip ``factor`` times faster (tempo and pitch) at the same sample rate.

    Output length is ``round(N / factor)``.
    """
    if not factor > 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    n = len(clip.samples)
    n_out = int(round(n / factor))
    if factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    frac = Fraction(factor).limit_denominator(1000)
    y = resample_poly(clip.samples, frac.denominator, frac.numerator)
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return AudioClip(y, clip.sample_rate)


def spec_augment(fm, policy: SpecAugmentPolicy, rng: np.random.Generator):
    """Zero random time strands and feature strands.

    Returns a new matrix (or :class:`FeatureMatrix` when given one); cells
    outside the masks are untouched. Mask extents larger than the matrix are
    clipped.
    """
    values = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm, dtype=np.float64)
    T, F = values.shape
    if T == 0 or F == 0:
        raise ValueError("spec_augment on an empty matrix")
    out_mask = np.zeros((T, F), dtype=bool)
    if not policy.is_noop:
        lo, hi = policy.target_mask_fraction_range
        lo, hi = lo - policy.slack, hi + policy.slack
        best, best_gap = None, np.inf
        for _ in range(max(1, policy.max_draws)):
            m = _draw_masks(T, F, policy, rng)
            frac = m.mean()
            gap = max(lo - frac, frac - hi, 0.0)
            if gap < best_gap:
                best, best_gap = m, gap
            if gap == 0.0:
                break
        out_mask = best
    out = np.where(out_mask, 0.0, values)
    if isinstance(fm, FeatureMatrix):
        return FeatureMatrix(out, fm.window_ms, fm.hop_ms)
    return out


def _draw_masks(T: int, F: int, policy: SpecAugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    m = np.zeros((T, F), dtype=bool)
    for _ in range(policy.n_time_masks):
        w = min(int(rng.integers(0, policy.max_time_mask_frames + 1)), T)
        t0 = int(rng.integers(0, T - w + 1))
        m[t0:t0 + w, :] = True
    for _ in range(policy.n_feat_masks):
        w = min(int(rng.integers(0, policy.max_feat_mask_bins + 1)), F)
        f0 = int(rng.integers(0, F - w + 1))
        m[:, f0:f0 + w] = True
    return m


# ---------------------------------------------------------------------------
# feature cache files: "XAF1", uint32 T, uint32 F, then T*F little-endian float64


def save_features(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    T, F = values.shape
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", T, F))
        fh.write(values.tobytes())
    tmp.replace(path)


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        T, F = struct.unpack("<II", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != T * F:
        raise ValueError(f"{path}: expected {T * F} values, found {data.size}")
    return data.reshape(T, F).astype(np.float64)
