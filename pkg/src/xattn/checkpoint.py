"""Checkpoint files.

Layout (little-endian)::

    b"XAMP"  uint32 version  uint32 n_bytes  <n_bytes of "key=value" lines, UTF-8>
    uint32 n_tensors
    per tensor: uint16 name_len  name  uint8 ndim  uint32 dims[ndim]  float64 data[prod(dims)]
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .corpus import FeatureNorm
from .model import ModelConfig, check_params
from .training import Regressor

MAGIC = b"XAMP"
VERSION = 1


def write_checkpoint(path, config: Dict[str, str], tensors: Dict[str, np.ndarray]) -> None:
    text = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(text)) + text)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = {}
    for line in data[pos:pos + n].decode().splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return config, tensors


def save_regressor(path, reg: Regressor, norm: FeatureNorm) -> None:
    cfg = {f"model.{k}": repr(v) if isinstance(v, float) else str(v) for k, v in reg.config.to_dict().items()}
    cfg.update({
        "multitask": str(reg.multitask),
        "task": reg.task,
        "a": "" if reg.a is None else repr(reg.a),
        "norm.cmvn": norm.cmvn,
        "norm.gender_feature": str(norm.gender_feature),
    })
    for k, v in reg.meta.items():
        cfg[f"meta.{k}"] = str(v)
    tensors = {f"param.{k}": v for k, v in reg.params.items()}
    if norm.mean is not None:
        tensors["norm.mean"] = norm.mean
        tensors["norm.std"] = norm.std
    write_checkpoint(path, cfg, tensors)


def load_regressor(path) -> Tuple[Regressor, FeatureNorm]:
    cfg, tensors = read_checkpoint(path)
    mcfg = ModelConfig.from_dict({k[6:]: v for k, v in cfg.items() if k.startswith("model.")})
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    check_params(params, mcfg)
    norm = FeatureNorm(cmvn=cfg["norm.cmvn"], gender_feature=cfg["norm.gender_feature"] == "True",
                       mean=tensors.get("norm.mean"), std=tensors.get("norm.std"))
    reg = Regressor(
        config=mcfg, params=params, multitask=cfg["multitask"] == "True", task=cfg["task"],
        a=float(cfg["a"]) if cfg.get("a") else None,
        meta={k[5:]: v for k, v in cfg.items() if k.startswith("meta.")},
    )
    return reg, norm
