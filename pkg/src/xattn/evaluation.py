"""RMSE/MAE per target and gender, and comparison tables in the Table-1 layout."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

TECHNIQUE_NAMES = {
    "last_hidden": "Last hidden state",
    "conventional": "Conventional-Attention",
    "cross": "Cross-Attention",
}
GENDER_NAMES = {"M": "Male", "F": "Female", "all": "All"}


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("metrics of an empty set")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


@dataclass
class EvalRow:
    technique: str
    multitask: bool
    gender_handling: str  # none | binary_feature | separate_models
    gender: str  # M | F | all
    rmse_height_cm: Optional[float]
    mae_height_cm: Optional[float]
    rmse_age_yr: Optional[float]
    mae_age_yr: Optional[float]
    n: int = 0
    source: str = "measured"

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def evaluate_predictions(
    records: Sequence,
    preds: Dict[str, np.ndarray],
    technique: str,
    multitask: bool,
    gender_handling: str = "none",
    gender_partition: bool = True,
) -> List[EvalRow]:
    """Score utterance-level predictions; one row per gender present (or one pooled row)."""
    genders = np.array([r.gender for r in records])
    y = {"height": np.array([r.height for r in records], dtype=float),
         "age": np.array([r.age for r in records], dtype=float)}
    groups = [("M", genders == "M"), ("F", genders == "F")] if gender_partition else [("all", np.ones(len(records), bool))]
    rows = []
    for g, sel in groups:
        if not sel.any():
            continue
        rows.append(EvalRow(
            technique=technique, multitask=multitask, gender_handling=gender_handling, gender=g,
            rmse_height_cm=rmse(y["height"][sel], preds["height"][sel]),
            mae_height_cm=mae(y["height"][sel], preds["height"][sel]),
            rmse_age_yr=rmse(y["age"][sel], preds["age"][sel]),
            mae_age_yr=mae(y["age"][sel], preds["age"][sel]),
            n=int(sel.sum()),
        ))
    return rows


def evaluate(model, records: Sequence, gender_partition: bool = True, technique: Optional[str] = None,
             multitask: Optional[bool] = None, gender_handling: Optional[str] = None) -> List[EvalRow]:
    """Run ``model.predict`` on ``records`` and score it.

    ``model`` is anything with ``predict(records) -> {"height": ..., "age": ...}``;
    table labels default to the model's own attributes when it has them.
    """
    preds = model.predict(records)
    meta = getattr(model, "meta", {}) or {}
    cfg = getattr(model, "config", None)
    technique = technique or (cfg.mode if cfg is not None else "stub")
    multitask = bool(getattr(model, "multitask", False)) if multitask is None else multitask
    gender_handling = gender_handling or meta.get("gender_handling", "none")
    return evaluate_predictions(records, preds, technique, multitask, gender_handling, gender_partition)


# reported numbers of earlier systems, for side-by-side display only
LITERATURE_ROWS = [
    ("Singh et al.", False, "M", 6.9, 5.2, 8.0, 5.7),
    ("Singh et al.", False, "F", 6.3, 5.1, 8.8, 6.1),
    ("Kalluri et al.", True, "M", 6.85, None, 7.60, None),
    ("Kalluri et al.", True, "F", 6.29, None, 8.63, None),
    ("Mporas et al.", False, "M", 6.8, 5.3, None, None),
    ("Mporas et al.", False, "F", 6.3, 5.1, None, None),
    ("Williams et al.", False, "M", None, 5.37, None, None),
    ("Williams et al.", False, "F", None, 5.49, None, None),
]


def literature_rows() -> List[EvalRow]:
    return [
        EvalRow(name, mt, "separate_models", g, rh, mh, ra, ma, 0, "reported")
        for name, mt, g, rh, mh, ra, ma in LITERATURE_ROWS
    ]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "Yes" if v else "No"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def format_table(rows: Iterable[EvalRow]) -> str:
    """Aligned plain-text table with one line per row."""
    header = ["Technique", "Multi-task?", "Gender handling", "Gender", "H-RMSE", "H-MAE", "A-RMSE", "A-MAE", "N", "Source"]
    body = []
    for r in rows:
        body.append([
            TECHNIQUE_NAMES.get(r.technique, r.technique), _fmt(r.multitask),
            {"none": "Not considered", "binary_feature": "As a binary feature",
             "separate_models": "Separate models"}.get(r.gender_handling, r.gender_handling),
            GENDER_NAMES.get(r.gender, r.gender),
            _fmt(r.rmse_height_cm), _fmt(r.mae_height_cm), _fmt(r.rmse_age_yr), _fmt(r.mae_age_yr),
            str(r.n) if r.n else "-", r.source,
        ])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def to_tsv(rows: Iterable[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EvalRow.columns(), delimiter="\t", lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in d.items()})
    return buf.getvalue()


def read_tsv(text: str) -> List[EvalRow]:
    rows = []
    for d in csv.DictReader(io.StringIO(text), delimiter="\t"):
        num = lambda s: float(s) if s != "" else None  # noqa: E731
        rows.append(EvalRow(
            technique=d["technique"], multitask=d["multitask"] == "True", gender_handling=d["gender_handling"],
            gender=d["gender"], rmse_height_cm=num(d["rmse_height_cm"]), mae_height_cm=num(d["mae_height_cm"]),
            rmse_age_yr=num(d["rmse_age_yr"]), mae_age_yr=num(d["mae_age_yr"]), n=int(d["n"]), source=d["source"],
        ))
    return rows
