"""Mini-batch Adam training with on-the-fly SpecAugment, early stopping and
validation selection of the multi-task weight."""
from __future__ import annotations

import copy
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .corpus import UtteranceRecord, speakers
from .features import SpecAugmentPolicy, spec_augment
from .model import apply_dropout  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


class DivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, a: Optional[float] = None):
        self.epoch, self.batch, self.a = epoch, batch, a
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}" + (f" (a={a})" if a is not None else ""))


@dataclass
class TrainConfig:
    mode: str = "cross"
    multitask: bool = True
    task: str = "height"  # single-task target
    gender_feature: bool = False
    n_units: int = 128
    d_att: int = 128
    n_frames_max: int = 600
    dropout: float = 0.2
    recurrent_dropout: float = 0.2
    head_dropout: float = 0.2
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    max_epochs: int = 100
    patience: int = 10
    a_grid: Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    spec_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in M.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.task not in M.TARGETS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("dropout", "recurrent_dropout", "head_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        self.a_grid = tuple(float(a) for a in self.a_grid)
        if self.multitask and not self.a_grid:
            raise ValueError("a_grid must be non-empty for multi-task training")
        if any(not 0.0 <= a <= 1.0 for a in self.a_grid):
            raise ValueError("a_grid values must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")

    @property
    def dropout_spec(self) -> M.DropoutSpec:
        return M.DropoutSpec(self.dropout, self.recurrent_dropout, self.head_dropout)

    @property
    def technique(self) -> str:
        return self.mode


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss_height: List[float] = field(default_factory=list)
    val_loss_age: List[float] = field(default_factory=list)
    selected_epoch: int = 0
    selected_a: Optional[float] = None
    a_scores: Dict[float, float] = field(default_factory=dict)

    def records(self) -> List[dict]:
        return [
            {"epoch": i + 1, "train_loss": t, "val_loss_height": vh, "val_loss_age": va}
            for i, (t, vh, va) in enumerate(zip(self.train_loss, self.val_loss_height, self.val_loss_age))
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


@dataclass
class Regressor:
    """A trained network plus what is needed to run it on new records."""

    config: M.ModelConfig
    params: M.Params
    multitask: bool = True
    task: str = "height"
    a: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def predict(self, records: Sequence[UtteranceRecord], batch_size: int = 32, with_traces: bool = False):
        return predict(self, records, batch_size, with_traces)


class Adam:
    def __init__(self, params: M.Params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: M.Params, grads: M.Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= lr_t * m / (np.sqrt(v) + self.eps)


def clip_by_global_norm(grads: M.Params, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# batching


def make_batch(records: Sequence[UtteranceRecord], n_frames_max: int, augment: Optional[SpecAugmentPolicy] = None,
               epoch: int = 0, seed: int = 0):
    """Pad (and tail-truncate) features into ``(B, T, F)``; returns ``(x, lengths, targets)``."""
    mats = []
    for r in records:
        x = r.features[:n_frames_max]
        if augment is not None:
            x = spec_augment(x, augment, augment_rng(seed, epoch, r.key))
        mats.append(x)
    lengths = np.array([len(m) for m in mats], dtype=np.int64)
    T = int(lengths.max())
    x = np.zeros((len(mats), T, mats[0].shape[1]))
    for i, m in enumerate(mats):
        x[i, : len(m)] = m
    targets = {
        "height": np.array([r.height for r in records], dtype=np.float64),
        "age": np.array([r.age for r in records], dtype=np.float64),
    }
    return x, lengths, targets


def augment_rng(seed: int, epoch: int, key: str) -> np.random.Generator:
    """Per (utterance, epoch) stream so results do not depend on batch layout."""
    return np.random.default_rng([seed, epoch, zlib.crc32(key.encode())])


def bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator, bucket: int = 8) -> List[np.ndarray]:
    """Shuffle, sort within windows of ``bucket`` batches by length, then shuffle batch order."""
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * bucket
    for s in range(0, len(order), span):
        chunk = order[s:s + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _length_order(records: Sequence[UtteranceRecord]) -> np.ndarray:
    return np.argsort([len(r.features) for r in records], kind="stable")


# ---------------------------------------------------------------------------
# inference


def predict(reg: Regressor, records: Sequence[UtteranceRecord], batch_size: int = 32, with_traces: bool = False):
    """Infer-mode predictions in record order: ``{"height": (N,), "age": (N,)}`` (+ traces)."""
    N = len(records)
    out = {k: np.zeros(N) for k in M.TARGETS}
    traces: List[Optional[M.AttentionTrace]] = [None] * N
    order = _length_order(records)
    for s in range(0, N, batch_size):
        idx = order[s:s + batch_size]
        x, L, _ = make_batch([records[i] for i in idx], reg.config.n_frames_max)
        preds, cache = M.forward(reg.params, reg.config, x, L)
        for k in M.TARGETS:
            out[k][idx] = preds[k]
        if with_traces:
            for i, tr in zip(idx, M.traces(cache, reg.config)):
                traces[i] = tr
    return (out, traces) if with_traces else out


def mse_per_target(reg: Regressor, records: Sequence[UtteranceRecord], batch_size: int = 32) -> Dict[str, float]:
    preds = predict(reg, records, batch_size)
    return {
        "height": float(np.mean((preds["height"] - [r.height for r in records]) ** 2)),
        "age": float(np.mean((preds["age"] - [r.age for r in records]) ** 2)),
    }


# ---------------------------------------------------------------------------
# fitting


def _check_splits(train_set, val_set):
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    overlap = speakers(train_set) & speakers(val_set)
    if overlap:
        raise ValueError(f"speakers in both train and validation: {sorted(overlap)[:5]}")
    if any(r.speed != 1.0 for r in val_set):
        raise ValueError("speed-perturbed copies must not appear in validation")
    for r in list(train_set) + list(val_set):
        if r.features is None:
            raise ValueError(f"{r.key}: features not loaded")


def model_config_for(config: TrainConfig, train_set: Sequence[UtteranceRecord]) -> M.ModelConfig:
    return M.ModelConfig(
        mode=config.mode,
        n_feats=train_set[0].features.shape[1],
        n_units=config.n_units,
        d_att=config.d_att,
        n_frames_max=config.n_frames_max,
        height_scale=float(np.mean([r.height for r in train_set])),
        age_scale=float(np.mean([r.age for r in train_set])),
    )


def train_once(config: TrainConfig, train_set: Sequence[UtteranceRecord], val_set: Sequence[UtteranceRecord],
               weights: Dict[str, float], augment: Optional[SpecAugmentPolicy] = None,
               a: Optional[float] = None) -> Tuple[Regressor, TrainHistory]:
    """One training run with fixed loss weights; restores the best validation epoch."""
    rng = np.random.default_rng(config.seed)
    mcfg = model_config_for(config, train_set)
    params = M.init_params(mcfg, rng)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    dspec = config.dropout_spec
    lengths = np.array([min(len(r.features), mcfg.n_frames_max) for r in train_set])
    hist = TrainHistory(selected_a=a)
    reg = Regressor(mcfg, params, config.multitask, config.task, a)
    best, best_params, wait = np.inf, copy.deepcopy(params), 0
    for epoch in range(1, config.max_epochs + 1):
        losses, sizes = [], []
        for bi, idx in enumerate(bucketed_batches(lengths, config.batch_size, rng)):
            batch = [train_set[i] for i in idx]
            x, L, y = make_batch(batch, mcfg.n_frames_max, augment, epoch, config.seed)
            loss, _, grads, _ = M.loss_and_grad(params, mcfg, x, L, y, weights, train=True, dropout=dspec, rng=rng)
            if not np.isfinite(loss):
                raise DivergedError(epoch, bi, a)
            clip_by_global_norm(grads, config.clip_norm)
            opt.step(params, grads)
            losses.append(loss)
            sizes.append(len(idx))
        hist.train_loss.append(float(np.average(losses, weights=sizes)))
        val = mse_per_target(reg, val_set, config.batch_size)
        hist.val_loss_height.append(val["height"])
        hist.val_loss_age.append(val["age"])
        score = sum(w * val[k] for k, w in weights.items())
        log.info("epoch %d train %.4f val_h %.4f val_a %.4f", epoch, hist.train_loss[-1], val["height"], val["age"])
        if not np.isfinite(score):
            raise DivergedError(epoch, -1, a)
        if score < best:
            best, best_params, wait = score, copy.deepcopy(params), 0
            hist.selected_epoch = epoch
        else:
            wait += 1
            if wait > config.patience:
                break
    reg.params = best_params
    return reg, hist


def selection_score(reg: Regressor, val_set: Sequence[UtteranceRecord], batch_size: int = 32) -> float:
    """Sum of per-target validation RMSEs, each divided by that target's validation std.

    A target whose validation labels are all equal (one speaker) is left
    unscaled.
    """
    preds = predict(reg, val_set, batch_size)
    total = 0.0
    for k in M.TARGETS:
        y = np.array([getattr(r, k) for r in val_set])
        rmse = float(np.sqrt(np.mean((preds[k] - y) ** 2)))
        sd = float(np.std(y))
        total += rmse / sd if sd > 1e-9 else rmse
    return total


def fit(config: TrainConfig, train_set: Sequence[UtteranceRecord], val_set: Sequence[UtteranceRecord],
        augment: Optional[SpecAugmentPolicy] = None) -> Tuple[Regressor, TrainHistory]:
    """Train per ``config``; multi-task runs pick ``a`` from ``a_grid`` on validation."""
    _check_splits(train_set, val_set)
    aug = augment if config.spec_augment else None
    if not config.multitask:
        reg, hist = train_once(config, train_set, val_set, M.task_weights(False, task=config.task), aug)
        return reg, hist
    best = None
    scores = {}
    for a in config.a_grid:
        reg, hist = train_once(config, train_set, val_set, M.task_weights(True, a), aug, a)
        scores[a] = selection_score(reg, val_set, config.batch_size)
        log.info("a=%.2f selection score %.4f", a, scores[a])
        if best is None or scores[a] < best[0]:
            best = (scores[a], reg, hist)
    _, reg, hist = best
    hist.a_scores = scores
    return reg, hist


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["a_grid"] = list(config.a_grid)
    return d
