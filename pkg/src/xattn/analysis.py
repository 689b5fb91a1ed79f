"""Which phones does frame attention favour?

Frame weights are mapped to phone labels through time alignments and pooled
over utterances; phones are then ranked by mean weight per frame.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SILENCE = "h#"


@dataclass
class PhoneAlignment:
    entries: List[Tuple[int, int, str]]
    sample_rate: int = 16000

    def __post_init__(self):
        prev_end = None
        for start, end, _ in self.entries:
            if not start < end:
                raise ValueError(f"segment [{start}, {end}) is empty or reversed")
            if prev_end is not None and start < prev_end:
                raise ValueError("alignment segments overlap or are out of order")
            prev_end = end


def frames_to_phones(align: PhoneAlignment, T: int, window_ms: float = 25.0, hop_ms: float = 10.0) -> List[str]:
    """Label frame ``t`` by the half-open segment containing its centre sample ``t*hop + window/2``.

    Frames whose centre falls in no segment are labelled silence.
    """
    if not align.entries:
        raise ValueError("empty alignment")
    sr = align.sample_rate
    W = window_ms * sr / 1000.0
    H = hop_ms * sr / 1000.0
    centres = np.arange(T) * H + W / 2.0
    starts = np.array([s for s, _, _ in align.entries], dtype=float)
    ends = np.array([e for _, e, _ in align.entries], dtype=float)
    labels = [lab for _, _, lab in align.entries]
    idx = np.searchsorted(starts, centres, side="right") - 1
    out = []
    for c, i in zip(centres, idx):
        out.append(labels[i] if i >= 0 and c < ends[i] else SILENCE)
    return out


@dataclass
class PhoneAttentionTable:
    total: Dict[str, float] = field(default_factory=dict)
    count: Dict[str, int] = field(default_factory=dict)
    n_utterances: int = 0

    def mean(self, phone: str) -> float:
        return self.total[phone] / self.count[phone]

    @property
    def phones(self) -> List[str]:
        return sorted(self.count)

    def merge(self, other: "PhoneAttentionTable") -> "PhoneAttentionTable":
        out = PhoneAttentionTable(dict(self.total), dict(self.count), self.n_utterances + other.n_utterances)
        for p in other.count:
            out.total[p] = out.total.get(p, 0.0) + other.total[p]
            out.count[p] = out.count.get(p, 0) + other.count[p]
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["phone", "class", "total", "count", "mean"])
        classes = phone_classes()
        for p in self.phones:
            w.writerow([p, classes.get(p, "other"), repr(self.total[p]), self.count[p], repr(self.mean(p))])
        return buf.getvalue()


def accumulate_attention(alpha, labels: Sequence[Optional[str]], table: PhoneAttentionTable,
                         mask=None) -> PhoneAttentionTable:
    """Add one utterance's frame weights to ``table`` (in place; also returned).

    Frames with ``mask`` false or label ``None`` are padding and are skipped.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != len(labels):
        raise ValueError(f"{len(alpha)} weights but {len(labels)} labels")
    if mask is not None and len(mask) != len(alpha):
        raise ValueError("mask length differs from weights")
    for t, (a, lab) in enumerate(zip(alpha, labels)):
        if lab is None or (mask is not None and not mask[t]):
            continue
        table.total[lab] = table.total.get(lab, 0.0) + float(a)
        table.count[lab] = table.count.get(lab, 0) + 1
    table.n_utterances += 1
    return table


def rank_phones(table: PhoneAttentionTable, top_k: int = 10, by: str = "mean"):
    """``(top, bottom)`` lists of ``(phone, value)``; ties break alphabetically.

    ``by`` is ``"mean"`` (weight per frame) or ``"total"`` (accumulated mass).
    """
    if not table.count:
        raise ValueError("empty phone table")
    value = table.mean if by == "mean" else (lambda p: table.total[p])
    top = sorted(table.phones, key=lambda p: (-value(p), p))[:top_k]
    bottom = sorted(table.phones, key=lambda p: (value(p), p))[:top_k]
    return [(p, value(p)) for p in top], [(p, value(p)) for p in bottom]


_CLASSES: Optional[Dict[str, str]] = None


def phone_classes() -> Dict[str, str]:
    """Static phone -> broad class lookup shipped with the package."""
    global _CLASSES
    if _CLASSES is None:
        text = resources.files("xattn").joinpath("data/phone_classes.tsv").read_text()
        _CLASSES = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                phone, klass = line.split()
                _CLASSES[phone] = klass
    return _CLASSES


def report(table: PhoneAttentionTable, top_k: int = 10) -> str:
    """Top/bottom-k text report, by mean weight and by total mass."""
    classes = phone_classes()
    lines = [f"utterances: {table.n_utterances}   phones: {len(table.count)}"]
    for by in ("mean", "total"):
        top, bottom = rank_phones(table, top_k, by)
        lines.append("")
        lines.append(f"highest {len(top)} by {by}:")
        lines += [f"  {p:<6} {classes.get(p, 'other'):<10} {v:.6g}" for p, v in top]
        lines.append(f"lowest {len(bottom)} by {by}:")
        lines += [f"  {p:<6} {classes.get(p, 'other'):<10} {v:.6g}" for p, v in bottom]
    return "\n".join(lines) + "\n"
