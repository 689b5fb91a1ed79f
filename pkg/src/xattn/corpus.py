"""Manifests, audio loading, the on-disk feature cache and utterance records."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

from . import features as feats
from .datagen import MANIFEST_FIELDS

log = logging.getLogger(__name__)

TRAIN_SPEEDS = (1.0, 0.9, 1.1)


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    gender: str
    height: float
    age: float
    split: str
    audio_path: Optional[Path] = None
    alignment_path: Optional[Path] = None
    speed: float = 1.0
    features: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def key(self) -> str:
        return self.utt_id if self.speed == 1.0 else f"{self.utt_id}_sp{self.speed:g}"


class ManifestError(ValueError):
    pass


def read_manifest(path) -> List[UtteranceRecord]:
    path = Path(path)
    root = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                gender = row["gender"].strip().upper()
                if gender not in ("M", "F"):
                    raise ValueError(f"gender must be M or F, got {row['gender']!r}")
                split = row["split"].strip()
                if split not in ("train", "val", "test"):
                    raise ValueError(f"unknown split {split!r}")
                ali = row["alignment_path"].strip()
                out.append(UtteranceRecord(
                    utt_id=Path(row["path"]).stem,
                    speaker_id=row["speaker_id"].strip(),
                    gender=gender,
                    height=float(row["height_cm"]),
                    age=float(row["age_years"]),
                    split=split,
                    audio_path=root / row["path"].strip(),
                    alignment_path=(root / ali) if ali else None,
                ))
            except (ValueError, TypeError, AttributeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    ids = [r.utt_id for r in out]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate utterance ids")
    return out


def read_audio(path) -> feats.AudioClip:
    sr, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype.kind == "i":
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    elif data.dtype.kind == "u":  # 8-bit PCM
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    return feats.AudioClip(x, int(sr))


def read_alignment(path) -> List[Tuple[int, int, str]]:
    """``start end label`` lines; sample indices at the audio's own rate."""
    segs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'start end label'")
            segs.append((int(parts[0]), int(parts[1]), parts[2]))
    return segs


# ---------------------------------------------------------------------------
# feature cache


def cache_path(cache_dir, rec: UtteranceRecord) -> Path:
    return Path(cache_dir) / f"{rec.key}.xaf"


def expand_speeds(records: Sequence[UtteranceRecord], augment: bool) -> List[UtteranceRecord]:
    """One record per cached item: train utterances get every speed copy when ``augment``."""
    out = []
    for r in records:
        speeds = TRAIN_SPEEDS if (augment and r.split == "train") else (1.0,)
        out.extend(replace(r, speed=s) for s in speeds)
    return out


def _extract_one(args) -> Tuple[str, Optional[str], bool]:
    rec, dest = args
    try:
        clip = feats.resample_to(read_audio(rec.audio_path), feats.TARGET_SR)
        if rec.speed != 1.0:
            clip = feats.speed_perturb(clip, rec.speed)
        fm = feats.extract(clip)
        feats.save_features(dest, fm.values)
        return rec.key, None, True
    except Exception as exc:  # reported per file
        return rec.key, f"{type(exc).__name__}: {exc}", False


def extract_to_cache(records: Sequence[UtteranceRecord], cache_dir, augment: bool = False, workers: int = 1):
    """Extract raw (un-normalised) features for every record and speed copy.

    Up-to-date cache files are skipped. Returns ``(written, skipped, errors)``
    where ``errors`` maps item key to message.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    jobs, skipped = [], []
    for rec in expand_speeds(records, augment):
        dest = cache_path(cache_dir, rec)
        try:
            fresh = dest.exists() and dest.stat().st_mtime >= Path(rec.audio_path).stat().st_mtime
        except OSError:
            fresh = False
        if fresh:
            skipped.append(rec.key)
        else:
            jobs.append((rec, dest))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_extract_one, jobs, chunksize=4))
    else:
        results = [_extract_one(j) for j in jobs]
    written = [k for k, _, ok in results if ok]
    errors = {k: msg for k, msg, ok in results if not ok}
    return written, skipped, errors


@dataclass
class FeatureNorm:
    """How raw cached features become model inputs."""

    cmvn: str = "utterance"  # utterance | global | none
    gender_feature: bool = False
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.cmvn not in ("utterance", "global", "none"):
            raise ValueError(f"unknown cmvn mode {self.cmvn!r}")

    @property
    def n_feats(self) -> int:
        return feats.N_FEATS + int(self.gender_feature)

    def apply(self, raw: np.ndarray, gender: str) -> np.ndarray:
        if self.cmvn == "utterance":
            x = feats.cmvn(raw)
        elif self.cmvn == "global":
            if self.mean is None:
                raise ValueError("global CMVN needs corpus statistics; call fit() first")
            x = feats.apply_global_cmvn(raw, self.mean, self.std)
        else:
            x = np.array(raw, dtype=np.float64)
        if self.gender_feature:
            # appended after normalisation: a constant column would otherwise vanish
            x = np.concatenate([x, np.full((len(x), 1), 1.0 if gender == "M" else 0.0)], axis=1)
        return x

    def fit(self, raws: Iterable[np.ndarray]) -> "FeatureNorm":
        if self.cmvn == "global":
            self.mean, self.std = feats.corpus_stats(raws)
        return self


def load_features(records: Sequence[UtteranceRecord], cache_dir, norm: FeatureNorm, fit_norm: bool = False) -> List[UtteranceRecord]:
    """Attach normalised features from the cache to each record (returns copies)."""
    raws = [feats.load_features(cache_path(cache_dir, r)) for r in records]
    if fit_norm:
        norm.fit(raws)
    return [replace(r, features=norm.apply(x, r.gender)) for r, x in zip(records, raws)]


def split_records(records: Sequence[UtteranceRecord]) -> Dict[str, List[UtteranceRecord]]:
    out: Dict[str, List[UtteranceRecord]] = {"train": [], "val": [], "test": []}
    for r in records:
        out[r.split].append(r)
    return out


def speakers(records: Iterable[UtteranceRecord]) -> set:
    return {r.speaker_id for r in records}


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
