"""Synthetic speaker corpus with planted height and age cues.

Each utterance is a string of phone-like segments. Vowels are harmonic
tones with fundamental ``300 - height_cm`` Hz and a spectral tilt that
steepens linearly with age; stops, fricatives and silences are shaped noise
that never depends on the speaker. Alignments record every segment, so a
model that learns the cues should attend to vowels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SILENCE = "h#"

# first three formants (Hz) of the synthetic vowels
VOWEL_FORMANTS = {
    "iy": (270, 2290, 3010),
    "ih": (390, 1990, 2550),
    "eh": (530, 1840, 2480),
    "ae": (660, 1720, 2410),
    "aa": (730, 1090, 2440),
    "ah": (520, 1190, 2390),
    "ao": (570, 840, 2410),
    "uh": (440, 1020, 2240),
    "uw": (300, 870, 2240),
    "er": (490, 1350, 1690),
    "ey": (480, 2100, 2700),
    "ay": (700, 1400, 2600),
    "aw": (700, 1100, 2500),
    "ow": (500, 900, 2400),
}
# noise bands (Hz) of consonant segments; stops get a closure before the burst
FRICATIVE_BANDS = {
    "s": (4000, 7500),
    "sh": (2200, 5000),
    "f": (1200, 7800),
    "th": (1500, 7000),
    "z": (3800, 7200),
    "v": (800, 4000),
}
STOP_BANDS = {
    "p": (500, 2500),
    "b": (200, 1500),
    "t": (3000, 6500),
    "d": (2000, 5000),
    "k": (1500, 3500),
    "g": (1000, 3000),
}

CLASS_PROBS = (("vowel", 0.45), ("fricative", 0.30), ("stop", 0.25))
DURATIONS_MS = {"vowel": (80, 200), "fricative": (60, 150), "stop": (40, 90), "silence": (80, 200)}
LEVELS = {"vowel": 0.10, "fricative": 0.03, "stop": 0.05, "silence": 0.002}
BACKGROUND = 5e-4

MANIFEST_FIELDS = ("path", "speaker_id", "gender", "height_cm", "age_years", "split", "alignment_path")


@dataclass
class SyntheticSpec:
    n_speakers: int = 60
    utterances_per_speaker: int = 10
    height_range_cm: Tuple[float, float] = (145.0, 204.0)
    age_range_yr: Tuple[float, float] = (21.0, 76.0)
    male_fraction: float = 2.0 / 3.0
    duration_range_s: Tuple[float, float] = (1.0, 6.0)
    mean_duration_s: float = 2.5
    test_fraction: float = 0.25
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("height_range_cm", "age_range_yr", "duration_range_s"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("male_fraction", "test_fraction", "val_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.duration_range_s
        if not lo < self.mean_duration_s < hi and lo != hi:
            raise ValueError("mean_duration_s must lie strictly inside duration_range_s")
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("need at least one speaker and one utterance")


@dataclass
class Speaker:
    speaker_id: str
    gender: str
    height_cm: float
    age_years: float
    split: str = "train"


# ---------------------------------------------------------------------------
# segment synthesis


def vowel_f0(height_cm: float) -> float:
    return 300.0 - height_cm


def tilt_db_per_octave(age_years: float) -> float:
    return 2.0 + 0.2 * (age_years - 21.0)


def _envelope(freqs: np.ndarray, formants) -> np.ndarray:
    env = np.full_like(freqs, 0.05)
    for k, F in enumerate(formants):
        bw = 60.0 + 0.06 * F
        env += (1.0 / (k + 1)) / (1.0 + ((freqs - F) / bw) ** 2)
    return env


def _ramp(x: np.ndarray, sr: int) -> np.ndarray:
    n = min(len(x) // 2, int(0.005 * sr))
    if n > 0:
        r = np.sin(np.linspace(0, np.pi / 2, n)) ** 2
        x[:n] *= r
        x[-n:] *= r[::-1]
    return x


def _rms_normalise(x: np.ndarray, level: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x))
    return x * (level / rms) if rms > 0 else x


def synth_vowel(phone: str, n: int, height_cm: float, age_years: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    f0 = vowel_f0(height_cm)
    ks = np.arange(1, int((0.47 * sr) // f0) + 1)
    freqs = ks * f0
    amps = _envelope(freqs, VOWEL_FORMANTS[phone]) * 10.0 ** (-tilt_db_per_octave(age_years) * np.log2(ks) / 20.0)
    phases = rng.uniform(0, 2 * np.pi, size=len(ks))
    # sum_k a_k sin(k w t + phi_k) = Im(sum_k a_k e^{i phi_k} z^k), z = e^{i w t}
    z = np.exp(2j * np.pi * f0 * np.arange(n) / sr)
    coef = amps * np.exp(1j * phases)
    acc = np.zeros(n, dtype=complex)
    for ck in coef[::-1]:
        acc = (acc + ck) * z
    x = acc.imag
    return _ramp(_rms_normalise(x, LEVELS["vowel"]), sr)


def _band_noise(n: int, band, rng: np.random.Generator, sr: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    lo, hi = band
    centre, width = 0.5 * (lo + hi), 0.5 * (hi - lo)
    spec *= np.exp(-0.5 * ((f - centre) / width) ** 4)
    return np.fft.irfft(spec, n=n)


def synth_noise_segment(phone: str, klass: str, n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    if klass == "silence":
        return rng.standard_normal(n) * LEVELS["silence"]
    if klass == "fricative":
        return _ramp(_rms_normalise(_band_noise(n, FRICATIVE_BANDS[phone], rng, sr), LEVELS["fricative"]), sr)
    # stop: quiet closure then a decaying burst
    closure = n // 2
    burst = _band_noise(n - closure, STOP_BANDS[phone], rng, sr)
    burst *= np.exp(-np.arange(len(burst)) / (0.012 * sr))
    x = np.concatenate([rng.standard_normal(closure) * LEVELS["silence"], _rms_normalise(burst, LEVELS["stop"])])
    return _ramp(x, sr)


def phone_class(phone: str) -> str:
    if phone in VOWEL_FORMANTS:
        return "vowel"
    if phone in FRICATIVE_BANDS:
        return "fricative"
    if phone in STOP_BANDS:
        return "stop"
    return "silence"


def plan_utterance(duration_s: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> List[Tuple[int, int, str]]:
    """Phone segments ``(start, end, label)`` covering ``duration_s`` seconds."""
    total = int(round(duration_s * sr))
    inventory = {"vowel": sorted(VOWEL_FORMANTS), "fricative": sorted(FRICATIVE_BANDS), "stop": sorted(STOP_BANDS)}
    classes = [c for c, _ in CLASS_PROBS]
    probs = np.array([p for _, p in CLASS_PROBS])
    segs = []
    lo, hi = DURATIONS_MS["silence"]
    pos = int(rng.uniform(lo, hi) * sr / 1000)
    segs.append((0, pos, SILENCE))
    tail = int(rng.uniform(lo, hi) * sr / 1000)
    prev = None
    while True:
        klass = classes[rng.choice(len(classes), p=probs)]
        if klass == prev and klass != "vowel":
            klass = "vowel"
        phone = inventory[klass][rng.integers(len(inventory[klass]))]
        lo, hi = DURATIONS_MS[klass]
        n = int(rng.uniform(lo, hi) * sr / 1000)
        if pos + n > total - tail:
            break
        segs.append((pos, pos + n, phone))
        pos += n
        prev = klass
    segs.append((pos, total, SILENCE))
    return segs


def synth_utterance(speaker: Speaker, duration_s: float, seed, sr: int = SAMPLE_RATE):
    """Render one utterance; returns ``(samples, alignment)``.

    Timing, vowel phases and noise use independent streams derived from
    ``seed``, so two speakers rendered with the same seed share segment
    timing and identical noise segments.
    """
    ss = np.random.SeedSequence(seed)
    r_plan, r_vowel, r_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    segs = plan_utterance(duration_s, r_plan, sr)
    out = np.zeros(segs[-1][1])
    for start, end, phone in segs:
        klass = phone_class(phone)
        n = end - start
        if klass == "vowel":
            out[start:end] = synth_vowel(phone, n, speaker.height_cm, speaker.age_years, r_vowel, sr)
        else:
            out[start:end] = synth_noise_segment(phone, klass, n, r_noise, sr)
    out += r_noise.standard_normal(len(out)) * BACKGROUND
    return np.clip(out, -1.0, 1.0), segs


# ---------------------------------------------------------------------------
# corpus


def draw_speakers(spec: SyntheticSpec) -> List[Speaker]:
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.n_speakers
    n_male = int(round(n * spec.male_fraction))
    genders = np.array(["M"] * n_male + ["F"] * (n - n_male))
    rng.shuffle(genders)
    hlo, hhi = spec.height_range_cm
    alo, ahi = spec.age_range_yr
    speakers = []
    for i, g in enumerate(genders):
        mu, sd = (176.0, 7.0) if g == "M" else (163.0, 6.5)
        h = float(np.clip(rng.normal(mu, sd), hlo, hhi))
        a = float(np.clip(alo + rng.gamma(2.0, 7.0), alo, ahi))
        speakers.append(Speaker(f"{g}S{i:03d}", str(g), round(h, 1), round(a, 1)))
    # speaker-disjoint splits, stratified by gender
    for g in ("M", "F"):
        idx = [i for i, s in enumerate(speakers) if s.gender == g]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        n_test = int(round(len(idx) * spec.test_fraction))
        rest = idx[n_test:]
        n_val = int(round(len(rest) * spec.val_fraction))
        for i in idx[:n_test]:
            speakers[i].split = "test"
        for i in rest[:n_val]:
            speakers[i].split = "val"
    # tiny corpora: rounding per gender can leave a split empty
    for split, frac in (("test", spec.test_fraction), ("val", spec.val_fraction)):
        train = [s for s in speakers if s.split == "train"]
        if frac > 0 and len(train) > 1 and not any(s.split == split for s in speakers):
            train[int(rng.integers(len(train)))].split = split
    return speakers


def draw_duration(spec: SyntheticSpec, rng: np.random.Generator) -> float:
    lo, hi = spec.duration_range_s
    if lo == hi:
        return lo
    m = (spec.mean_duration_s - lo) / (hi - lo)
    k = 10.0
    return lo + (hi - lo) * rng.beta(m * k, (1 - m) * k)


def write_alignment(path, segs) -> None:
    with open(path, "w") as fh:
        for start, end, label in segs:
            fh.write(f"{start} {end} {label}\n")


def generate(spec: SyntheticSpec, out_dir) -> Path:
    """Write wavs, alignments and ``manifest.tsv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(parents=True, exist_ok=True)
    rows = []
    for si, spk in enumerate(draw_speakers(spec)):
        for ui in range(spec.utterances_per_speaker):
            utt = f"{spk.speaker_id}_U{ui:02d}"
            dur = draw_duration(spec, np.random.default_rng([spec.seed, 1, si, ui]))
            x, segs = synth_utterance(spk, dur, [spec.seed, 2, si, ui])
            wav_rel = f"wav/{utt}.wav"
            ali_rel = f"align/{utt}.phn"
            wavfile.write(out / wav_rel, SAMPLE_RATE, np.round(x * 32767).astype("<i2"))
            write_alignment(out / ali_rel, segs)
            rows.append({
                "path": wav_rel, "speaker_id": spk.speaker_id, "gender": spk.gender,
                "height_cm": f"{spk.height_cm:.1f}", "age_years": f"{spk.age_years:.1f}",
                "split": spk.split, "alignment_path": ali_rel,
            })
    manifest = out / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    log.info("wrote %d utterances to %s", len(rows), out)
    return manifest


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
