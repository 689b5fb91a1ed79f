"""LSTM encoder with frame- and unit-axis soft attention and ReLU regression heads.

Everything is batched over utterances. A batch is a zero-padded array
``x`` of shape ``(B, T, F)`` plus integer ``lengths``; ``T`` never exceeds
``n_frames_max``. Gradients are derived by hand (see :func:`backward`) and
checked against central differences in the test suite.

Parameter tensors live in a flat ``dict[str, np.ndarray]``:

=================  ==========================  ======================
name               shape                       used by
=================  ==========================  ======================
``lstm.W_ih``      ``(4n, F)``                 all modes
``lstm.W_hh``      ``(4n, n)``                 all modes
``lstm.bias``      ``(4n,)``                   all modes
``frame.W``        ``(d_att, n)``              conventional, cross
``frame.b``        ``(d_att,)``                conventional, cross
``frame.v``        ``(d_att,)``                conventional, cross
``unit.W``         ``(d_att, n_frames_max)``   cross
``unit.b``         ``(d_att,)``                cross
``unit.v``         ``(d_att,)``                cross
``head.height``    ``(dim f,)``                all modes
``head.age``       ``(dim f,)``                all modes
=================  ==========================  ======================

Gate blocks in the LSTM matrices are ordered input, forget, candidate, output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .numerics import sigmoid, softmax, softmax_backward

MODES = ("last_hidden", "conventional", "cross")
TARGETS = ("height", "age")

Params = Dict[str, np.ndarray]


class CacheError(RuntimeError):
    """Backward called without a usable forward cache."""


@dataclass
class ModelConfig:
    mode: str = "cross"
    n_feats: int = 83
    n_units: int = 128
    d_att: int = 128
    n_frames_max: int = 600
    # fixed output multipliers: yhat = scale * relu(v.f), a reparametrisation
    # of a bias-free ReLU head that keeps v at unit scale
    height_scale: float = 1.0
    age_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("n_feats", "n_units", "d_att", "n_frames_max"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def f_dim(self) -> int:
        if self.mode == "cross":
            return self.n_units + self.n_frames_max
        return self.n_units

    def scale(self, target: str) -> float:
        return float(self.height_scale if target == "height" else self.age_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        kinds = {"mode": str, "height_scale": float, "age_scale": float}
        return cls(**{k: kinds.get(k, int)(v) for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class DropoutSpec:
    """Inverted-dropout rates; only applied in train mode."""

    input: float = 0.0
    recurrent: float = 0.0
    head: float = 0.0

    def __post_init__(self):
        for name in ("input", "recurrent", "head"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {name}={r} outside [0, 1)")


@dataclass
class AttentionTrace:
    """Per-utterance attention weights and contexts (real frames only for alpha)."""

    alpha: Optional[np.ndarray]
    beta: Optional[np.ndarray]
    c: np.ndarray
    c_star: Optional[np.ndarray]
    f: np.ndarray


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    n, F, d = cfg.n_units, cfg.n_feats, cfg.d_att
    shapes: Dict[str, Tuple[int, ...]] = {
        "lstm.W_ih": (4 * n, F),
        "lstm.W_hh": (4 * n, n),
        "lstm.bias": (4 * n,),
    }
    if cfg.mode in ("conventional", "cross"):
        shapes.update({"frame.W": (d, n), "frame.b": (d,), "frame.v": (d,)})
    if cfg.mode == "cross":
        shapes.update({"unit.W": (d, cfg.n_frames_max), "unit.b": (d,), "unit.v": (d,)})
    shapes["head.height"] = (cfg.f_dim,)
    shapes["head.age"] = (cfg.f_dim,)
    return shapes


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out, fan_in = shape
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    n = cfg.n_units
    p: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "lstm.W_hh":
            # orthogonal recurrent blocks
            blocks = []
            for _ in range(4):
                q, r = np.linalg.qr(rng.standard_normal((n, n)))
                blocks.append(q * np.sign(np.diag(r)))
            p[name] = np.concatenate(blocks, axis=0)
        elif name == "lstm.bias":
            b = np.zeros(shape)
            b[n:2 * n] = 1.0  # forget gate open at start
            p[name] = b
        elif name.endswith(".W") or name == "lstm.W_ih":
            p[name] = _glorot(rng, shape)
        elif name.endswith(".b"):
            p[name] = np.zeros(shape)
        elif name.endswith(".v"):
            p[name] = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(shape[0])
        else:
            # frame-context block: positive so the ReLU starts active; the
            # unit-context block starts at zero so its length-dependent sum
            # does not swamp early predictions
            v = np.zeros(shape)
            v[:n] = np.abs(rng.normal(0.0, 1.0 / np.sqrt(n), size=n))
            p[name] = v
    return p


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    want = param_shapes(cfg)
    if set(params) != set(want):
        raise ValueError(f"parameter names {sorted(params)} != expected {sorted(want)}")
    for name, shape in want.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != {shape}")


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate: float, rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
    if rate == 0.0:
        return None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def apply_dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Inverted dropout: kept entries are scaled by ``1/(1-rate)``; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    if not train or rate == 0.0:
        return x.copy()
    return x * dropout_mask(x.shape, rate, rng)


# ---------------------------------------------------------------------------
# batched forward / backward


def frame_mask(lengths, T: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return np.arange(T)[None, :] < lengths[:, None]


def _lstm_forward(params: Params, x: np.ndarray, mx, mh):
    B, T, _ = x.shape
    W_hh = params["lstm.W_hh"]
    n = W_hh.shape[1]
    xd = x if mx is None else x * mx
    # time-major storage keeps every per-step write contiguous
    pre_x = np.ascontiguousarray((xd @ params["lstm.W_ih"].T + params["lstm.bias"]).transpose(1, 0, 2))
    gates = np.empty((T, B, 4 * n))  # i, f, g, o after their nonlinearities
    cs = np.empty((T, B, n))
    tcs = np.empty((T, B, n))
    hs = np.empty((T, B, n))
    h = np.zeros((B, n))
    c = np.zeros((B, n))
    W_hh_T = W_hh.T
    for t in range(T):
        hd = h if mh is None else h * mh
        a = pre_x[t] + hd @ W_hh_T
        gt = gates[t]
        gt[:] = sigmoid(a)
        gt[:, 2 * n:3 * n] = np.tanh(a[:, 2 * n:3 * n])
        c = gt[:, n:2 * n] * c + gt[:, :n] * gt[:, 2 * n:3 * n]
        cs[t] = c
        tc = np.tanh(c)
        tcs[t] = tc
        h = gt[:, 3 * n:] * tc
        hs[t] = h
    return hs.transpose(1, 0, 2), dict(xd=xd, gates=gates, c=cs, tc=tcs, h=hs, mx=mx, mh=mh)


def _lstm_backward(params: Params, lc: dict, dh: np.ndarray, grads: Params) -> None:
    B, T, n = dh.shape
    W_hh = params["lstm.W_hh"]
    mh = lc["mh"]
    gates, c, tc, h = lc["gates"], lc["c"], lc["tc"], lc["h"]
    dh = np.ascontiguousarray(dh.transpose(1, 0, 2))
    da = np.empty((T, B, 4 * n))
    dh_next = np.zeros((B, n))
    dc_next = np.zeros((B, n))
    zeros = np.zeros((B, n))
    for t in range(T - 1, -1, -1):
        dht = dh[t] + dh_next
        tct = tc[t]
        g4 = gates[t]
        it, ft, gt, ot = g4[:, :n], g4[:, n:2 * n], g4[:, 2 * n:3 * n], g4[:, 3 * n:]
        dct = dht * ot * (1.0 - tct * tct) + dc_next
        c_prev = c[t - 1] if t > 0 else zeros
        dat = da[t]
        dat[:, :n] = dct * gt * it * (1.0 - it)
        dat[:, n:2 * n] = dct * c_prev * ft * (1.0 - ft)
        dat[:, 2 * n:3 * n] = dct * it * (1.0 - gt * gt)
        dat[:, 3 * n:] = dht * tct * ot * (1.0 - ot)
        dc_next = dct * ft
        dh_next = dat @ W_hh
        if mh is not None:
            dh_next = dh_next * mh
    flat = da.reshape(T * B, 4 * n)
    xd = np.ascontiguousarray(lc["xd"].transpose(1, 0, 2))
    grads["lstm.W_ih"] = flat.T @ xd.reshape(T * B, -1)
    grads["lstm.bias"] = flat.sum(axis=0)
    if T > 1:
        hp = h[:-1] if mh is None else h[:-1] * mh[None, :, :]
        grads["lstm.W_hh"] = da[1:].reshape(-1, 4 * n).T @ hp.reshape(-1, n)
    else:
        grads["lstm.W_hh"] = np.zeros_like(W_hh)


def _attend(H: np.ndarray, W: np.ndarray, b: np.ndarray, v: np.ndarray, mask=None):
    """Score rows of ``H`` (..., L, D) and return (weights, context, tanh activations)."""
    A = np.tanh(H @ W.T + b)
    e = A @ v
    w = softmax(e, mask=mask, axis=-1)
    ctx = np.einsum("bl,bld->bd", w, H)
    return w, ctx, A


def _attend_backward(H, W, v, w, A, dctx, gW, gb, gv):
    """Backward of :func:`_attend`; accumulates into gW/gb/gv and returns dH."""
    dw = np.einsum("bld,bd->bl", H, dctx)
    dH = w[:, :, None] * dctx[:, None, :]
    de = softmax_backward(w, dw)
    gv += np.einsum("bl,blk->k", de, A)
    dP = (de[:, :, None] * v) * (1.0 - A * A)
    gW += np.einsum("blk,bld->kd", dP, H)
    gb += dP.sum(axis=(0, 1))
    dH += dP @ W
    return dH


def forward(
    params: Params,
    cfg: ModelConfig,
    x: np.ndarray,
    lengths,
    train: bool = False,
    dropout: Optional[DropoutSpec] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Run the network on a padded batch.

    Returns ``(preds, cache)`` where ``preds`` maps each target name to a
    ``(B,)`` array of non-negative predictions.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.n_feats:
        raise ValueError(f"expected input (B, T, {cfg.n_feats}), got {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T, F = x.shape
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ValueError("lengths must be in [1, T] for every utterance")
    if T > cfg.n_frames_max:
        raise ValueError(f"T={T} exceeds n_frames_max={cfg.n_frames_max}; truncate first")
    n = cfg.n_units

    mx = mh = mf = None
    if train and dropout is not None:
        # input mask drawn per frame; recurrent mask fixed per sequence
        mx = dropout_mask((B, T, F), dropout.input, rng)
        mh = dropout_mask((B, n), dropout.recurrent, rng)
        mf = dropout_mask((B, cfg.f_dim), dropout.head, rng)

    mask = frame_mask(lengths, T)
    h_raw, lc = _lstm_forward(params, x, mx, mh)
    h = h_raw * mask[:, :, None]
    cache = dict(lstm=lc, mask=mask, lengths=lengths, h=h, mf=mf, T=T)

    if cfg.mode == "last_hidden":
        f = h[np.arange(B), lengths - 1]
    else:
        alpha, c, A = _attend(h, params["frame.W"], params["frame.b"], params["frame.v"], mask)
        cache.update(alpha=alpha, c=c, A_frame=A)
        f = c
        if cfg.mode == "cross":
            # columns of the padded hidden-state matrix; rows past T are zero so
            # only the first T columns of unit.W contribute
            Hu = h.transpose(0, 2, 1)
            Wu = params["unit.W"][:, :T]
            beta, cs, Au = _attend(Hu, Wu, params["unit.b"], params["unit.v"])
            c_star = np.zeros((B, cfg.n_frames_max))
            c_star[:, :T] = cs
            cache.update(beta=beta, c_star=c_star, A_unit=Au, Hu=Hu)
            f = np.concatenate([c, c_star], axis=1)
    cache["f"] = f
    fd = f if mf is None else f * mf
    cache["fd"] = fd
    preds, zs = {}, {}
    for k in TARGETS:
        z = fd @ params["head." + k]
        zs[k] = z
        preds[k] = cfg.scale(k) * np.maximum(z, 0.0)
    cache["z"] = zs
    return preds, cache


def backward(params: Params, cfg: ModelConfig, cache: Optional[dict], dpreds: Mapping[str, np.ndarray]) -> Params:
    """Gradients of a scalar loss given ``dL/dpred`` per target.

    Targets absent from ``dpreds`` contribute nothing. The ReLU subgradient
    at 0 is 0.
    """
    if not cache or "fd" not in cache:
        raise CacheError("backward needs the cache returned by forward")
    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
    fd, mask, T = cache["fd"], cache["mask"], cache["T"]
    B = fd.shape[0]
    dfd = np.zeros_like(fd)
    for k, dp in dpreds.items():
        dz = np.asarray(dp, dtype=np.float64) * cfg.scale(k) * (cache["z"][k] > 0)
        grads["head." + k] = dz @ fd
        dfd += dz[:, None] * params["head." + k]
    df = dfd if cache["mf"] is None else dfd * cache["mf"]

    n = cfg.n_units
    h = cache["h"]
    if cfg.mode == "last_hidden":
        dh = np.zeros_like(h)
        dh[np.arange(B), cache["lengths"] - 1] = df
    else:
        dc = df[:, :n]
        if cfg.mode == "cross":
            gWu = np.zeros((cfg.d_att, T))
            dHu = _attend_backward(
                cache["Hu"], params["unit.W"][:, :T], params["unit.v"], cache["beta"],
                cache["A_unit"], df[:, n:n + T], gWu, grads["unit.b"], grads["unit.v"],
            )
            grads["unit.W"][:, :T] = gWu
            dh_extra = dHu.transpose(0, 2, 1)
        else:
            dh_extra = 0.0
        dh = _attend_backward(
            h, params["frame.W"], params["frame.v"], cache["alpha"], cache["A_frame"], dc,
            grads["frame.W"], grads["frame.b"], grads["frame.v"],
        )
        dh = dh + dh_extra
    dh = dh * mask[:, :, None]
    _lstm_backward(params, cache["lstm"], dh, grads)
    return grads


def loss_and_grad(
    params: Params,
    cfg: ModelConfig,
    x: np.ndarray,
    lengths,
    targets: Mapping[str, np.ndarray],
    weights: Mapping[str, float],
    train: bool = False,
    dropout: Optional[DropoutSpec] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Weighted sum of per-target MSE losses and its gradient.

    ``weights`` maps target name to its loss weight; zero-weight targets are
    dropped from the graph. Returns ``(loss, per_target_mse, grads, preds)``.
    """
    preds, cache = forward(params, cfg, x, lengths, train=train, dropout=dropout, rng=rng)
    total = 0.0
    per = {}
    dpreds = {}
    for k, w in weights.items():
        if w == 0.0:
            continue
        y = np.asarray(targets[k], dtype=np.float64)
        r = preds[k] - y
        per[k] = float(np.mean(r * r))
        total += w * per[k]
        dpreds[k] = w * (2.0 / r.size) * r
    grads = backward(params, cfg, cache, dpreds)
    return total, per, grads, preds


def task_weights(multitask: bool, a: float = 0.5, task: str = "height") -> Dict[str, float]:
    """Loss weights per target: ``{height: a, age: 1-a}`` or a single task."""
    if multitask:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"multi-task weight a={a} outside [0, 1]")
        return {"height": a, "age": 1.0 - a}
    if task not in TARGETS:
        raise ValueError(f"unknown task {task!r}")
    return {task: 1.0}


# ---------------------------------------------------------------------------
# single-utterance building blocks


def lstm_forward(
    params: Params,
    x: np.ndarray,
    dropout: Optional[DropoutSpec] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Encode one ``(T, F)`` utterance; returns ``(h, cache)`` with ``h`` of shape ``(T, n)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params["lstm.W_ih"].shape[1]:
        raise ValueError(f"input width {x.shape} does not match W_ih {params['lstm.W_ih'].shape}")
    n = params["lstm.W_hh"].shape[1]
    mx = mh = None
    if train and dropout is not None:
        mx = dropout_mask((1,) + x.shape, dropout.input, rng)
        mh = dropout_mask((1, n), dropout.recurrent, rng)
    h, cache = _lstm_forward(params, x[None], mx, mh)
    return h[0], cache


def last_hidden_state(h: np.ndarray, length: Optional[int] = None) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("last_hidden_state needs a non-empty (T, n) matrix")
    t = h.shape[0] if length is None else int(length)
    if not 1 <= t <= h.shape[0]:
        raise ValueError(f"length {t} outside [1, {h.shape[0]}]")
    return h[t - 1].copy()


def attention_scores(H: np.ndarray, W: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``e_r = v . tanh(W H_r + b)`` for every row ``H_r``."""
    return np.tanh(np.asarray(H, dtype=np.float64) @ np.asarray(W).T + b) @ v


def frame_attention(h: np.ndarray, W, b, v, mask=None):
    """Attention across time: returns ``(alpha (T,), c (n,))``. Masked rows get alpha = 0."""
    h = np.asarray(h, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("frame_attention with every frame masked")
    alpha, c, _ = _attend(h[None], np.asarray(W), np.asarray(b), np.asarray(v),
                          None if mask is None else mask[None])
    return alpha[0], c[0]


def unit_attention(h_pad: np.ndarray, W, b, v, n_frames_max: Optional[int] = None):
    """Attention across encoder units of a padded ``(n_frames_max, n)`` matrix.

    Each unit's column is scored like a frame; returns ``(beta (n,), c_star (n_frames_max,))``.
    """
    h_pad = np.asarray(h_pad, dtype=np.float64)
    rows = np.asarray(W).shape[1] if n_frames_max is None else n_frames_max
    if h_pad.ndim != 2 or h_pad.shape[0] != rows:
        raise ValueError(f"unit_attention expects {rows} rows, got {h_pad.shape}")
    beta, c_star, _ = _attend(h_pad.T[None], np.asarray(W), np.asarray(b), np.asarray(v))
    return beta[0], c_star[0]


def pad_frames(h: np.ndarray, n_frames_max: int) -> np.ndarray:
    """Zero-pad or tail-truncate a ``(T, n)`` matrix to exactly ``n_frames_max`` rows."""
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros((n_frames_max, h.shape[1]))
    t = min(h.shape[0], n_frames_max)
    out[:t] = h[:t]
    return out


def cross_attention(h: np.ndarray, params: Params, cfg: ModelConfig, mask=None) -> AttentionTrace:
    """Frame context ``c`` and (in cross mode) unit context ``c*``, joined into ``f``."""
    h_pad = pad_frames(h, cfg.n_frames_max)
    if mask is None:
        mask = np.arange(cfg.n_frames_max) < min(len(h), cfg.n_frames_max)
    else:
        mask = pad_frames(np.asarray(mask, dtype=float)[:, None], cfg.n_frames_max)[:, 0] > 0
    h_pad = h_pad * mask[:, None]
    alpha, c = frame_attention(h_pad, params["frame.W"], params["frame.b"], params["frame.v"], mask)
    if cfg.mode != "cross":
        return AttentionTrace(alpha=alpha, beta=None, c=c, c_star=None, f=c.copy())
    beta, c_star = unit_attention(h_pad, params["unit.W"], params["unit.b"], params["unit.v"])
    return AttentionTrace(alpha=alpha, beta=beta, c=c, c_star=c_star, f=np.concatenate([c, c_star]))


def regression_head(f, v) -> float:
    f = np.asarray(f, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if f.shape != v.shape or f.ndim != 1:
        raise ValueError(f"head length mismatch: f{f.shape} v{v.shape}")
    return max(float(v @ f), 0.0)


def mse_loss(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("mse of an empty batch")
    r = y - yhat
    return float(np.mean(r * r))


def multitask_loss(loss_h: float, loss_a: float, a: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"multi-task weight a={a} outside [0, 1]")
    return a * loss_h + (1.0 - a) * loss_a


def traces(cache: dict, cfg: ModelConfig) -> list:
    """Split a forward cache into per-utterance :class:`AttentionTrace` objects."""
    out = []
    for b, L in enumerate(cache["lengths"]):
        if cfg.mode == "last_hidden":
            f = cache["f"][b].copy()
            out.append(AttentionTrace(alpha=None, beta=None, c=f, c_star=None, f=f))
            continue
        out.append(AttentionTrace(
            alpha=cache["alpha"][b, :L].copy(),
            beta=cache["beta"][b].copy() if "beta" in cache else None,
            c=cache["c"][b].copy(),
            c_star=cache["c_star"][b].copy() if "c_star" in cache else None,
            f=cache["f"][b].copy(),
        ))
    return out
