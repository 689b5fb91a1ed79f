"""End-to-end steps shared by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

from . import analysis, checkpoint, corpus, datagen, evaluation, training
from .config import RunConfig
from .corpus import FeatureNorm, UtteranceRecord

log = logging.getLogger(__name__)


def synth(cfg: RunConfig) -> Path:
    return datagen.generate(cfg.synth, cfg.paths.corpus_dir)


def extract(cfg: RunConfig, augment: Optional[bool] = None):
    records = corpus.read_manifest(cfg.manifest)
    aug = cfg.features.speed_perturb if augment is None else augment
    return corpus.extract_to_cache(records, cfg.cache_dir, augment=aug, workers=cfg.features.workers)


def load_splits(cfg: RunConfig, norm: Optional[FeatureNorm] = None, speed_perturb: Optional[bool] = None):
    """Records of each split with normalised features; returns ``(splits, norm)``.

    Training speed copies are included only if their cache files exist and
    ``speed_perturb`` is on. Global CMVN statistics come from the
    un-perturbed training split.
    """
    records = corpus.read_manifest(cfg.manifest)
    by_split = corpus.split_records(records)
    fit = norm is None
    if norm is None:
        norm = FeatureNorm(cfg.features.cmvn, cfg.train.gender_feature)
    out = {}
    if fit:
        out["train"] = corpus.load_features(by_split["train"], cfg.cache_dir, norm, fit_norm=True)
    else:
        out["train"] = corpus.load_features(by_split["train"], cfg.cache_dir, norm)
    sp = cfg.features.speed_perturb if speed_perturb is None else speed_perturb
    if sp:
        extra = [r for r in corpus.expand_speeds(by_split["train"], True) if r.speed != 1.0]
        extra = [r for r in extra if corpus.cache_path(cfg.cache_dir, r).exists()]
        out["train"] += corpus.load_features(extra, cfg.cache_dir, norm)
    for s in ("val", "test"):
        out[s] = corpus.load_features(by_split[s], cfg.cache_dir, norm)
    return out, norm


def input_hash(cfg: RunConfig) -> str:
    """Content hash of the manifest and every cache file it references."""
    h = hashlib.sha256(Path(cfg.manifest).read_bytes())
    for p in sorted(Path(cfg.cache_dir).glob("*.xaf")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_run_meta(out_dir: Path, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(cfg.to_text())
    meta = {"seed": cfg.train.seed, "input_sha256": input_hash(cfg), "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    meta.update(extra or {})
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def gender_handling(cfg: RunConfig) -> str:
    return "binary_feature" if cfg.train.gender_feature else "none"


def train(cfg: RunConfig, splits=None, norm=None, out_dir: Optional[Path] = None):
    """Fit a model, write checkpoint + history under ``out_dir``; returns ``(reg, hist, norm)``."""
    if splits is None:
        splits, norm = load_splits(cfg)
    reg, hist = training.fit(cfg.train, splits["train"], splits["val"], cfg.augment)
    reg.meta.update(technique=cfg.train.mode, gender_handling=gender_handling(cfg))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_run_meta(out_dir, cfg, {"selected_epoch": hist.selected_epoch, "selected_a": hist.selected_a,
                                      "a_scores": {repr(k): v for k, v in hist.a_scores.items()}})
        checkpoint.save_regressor(out_dir / "model.xamp", reg, norm)
        (out_dir / "history.jsonl").write_text(hist.to_jsonl())
    return reg, hist, norm


def evaluate(reg, records: Sequence[UtteranceRecord], gender_partition: bool = True) -> List[evaluation.EvalRow]:
    return evaluation.evaluate(reg, records, gender_partition)


def write_table(rows, out_dir: Path, stem: str = "eval") -> Tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, tsv = out_dir / f"{stem}.txt", out_dir / f"{stem}.tsv"
    txt.write_text(evaluation.format_table(rows))
    tsv.write_text(evaluation.to_tsv(rows))
    return txt, tsv


def alignment_for(rec: UtteranceRecord) -> analysis.PhoneAlignment:
    sr, _ = wavfile.read(rec.audio_path, mmap=True)
    return analysis.PhoneAlignment(corpus.read_alignment(rec.alignment_path), int(sr))


def phone_attention(reg, records: Sequence[UtteranceRecord], window_ms: float = 25.0, hop_ms: float = 10.0,
                    batch_size: int = 32) -> analysis.PhoneAttentionTable:
    """Accumulate frame attention per phone over ``records`` (which need alignments)."""
    if reg.config.mode == "last_hidden":
        raise ValueError("the last-hidden-state model has no frame attention to analyse")
    _, traces = training.predict(reg, records, batch_size, with_traces=True)
    table = analysis.PhoneAttentionTable()
    for rec, tr in zip(records, traces):
        if rec.alignment_path is None:
            raise ValueError(f"{rec.utt_id}: no alignment")
        labels = analysis.frames_to_phones(alignment_for(rec), len(tr.alpha), window_ms, hop_ms)
        analysis.accumulate_attention(tr.alpha, labels, table)
    return table


# ---------------------------------------------------------------------------
# the full comparison grid


GRID = (
    # (label, mode, multitask, task, gender_feature)
    ("last_hidden/multi", "last_hidden", True, None, False),
    ("conventional/multi", "conventional", True, None, False),
    ("cross/single", "cross", False, None, False),
    ("cross/multi", "cross", True, None, False),
    ("cross/multi/gender", "cross", True, None, True),
)


def run_grid(cfg: RunConfig, out_dir: Path, with_literature: bool = True) -> List[evaluation.EvalRow]:
    """Train and score every comparison setting; single-task rows pair a height and an age model."""
    rows: List[evaluation.EvalRow] = []
    cache: Dict[bool, tuple] = {}
    for label, mode, multitask, _, gfeat in GRID:
        if gfeat not in cache:
            c = replace(cfg, train=replace(cfg.train, gender_feature=gfeat))
            cache[gfeat] = load_splits(c)
        splits, norm = cache[gfeat]
        test = splits["test"]
        if multitask:
            c = replace(cfg, train=replace(cfg.train, mode=mode, multitask=True, gender_feature=gfeat))
            reg, _, _ = train(c, splits, norm, out_dir / label.replace("/", "_"))
            preds = reg.predict(test)
        else:
            preds = {}
            for task in ("height", "age"):
                c = replace(cfg, train=replace(cfg.train, mode=mode, multitask=False, task=task, gender_feature=gfeat))
                reg, _, _ = train(c, splits, norm, out_dir / f"{label.replace('/', '_')}_{task}")
                preds[task] = reg.predict(test)[task]
        rows += evaluation.evaluate_predictions(test, preds, mode, multitask,
                                                "binary_feature" if gfeat else "none")
    if with_literature:
        rows += evaluation.literature_rows()
    write_table(rows, out_dir, "table")
    return rows
