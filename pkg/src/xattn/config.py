"""Run configuration: sectioned ``key = value`` text, CLI overrides, defaults.

Precedence is command line > file > built-in defaults. Every parse or value
error carries the file name and line number it came from.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .datagen import SyntheticSpec
from .features import SpecAugmentPolicy
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration text or value; maps to exit status 2."""


@dataclass
class FeatureConfig:
    cmvn: str = "utterance"  # utterance | global | none
    speed_perturb: bool = True
    workers: int = 1


@dataclass
class PathConfig:
    corpus_dir: str = "corpus"
    manifest: str = ""  # defaults to <corpus_dir>/manifest.tsv
    cache_dir: str = ""  # defaults to <corpus_dir>/cache
    out_dir: str = "runs/default"


@dataclass
class AnalysisConfig:
    top_k: int = 10
    split: str = "test"


SECTIONS = {
    "synth": SyntheticSpec,
    "train": TrainConfig,
    "augment": SpecAugmentPolicy,
    "features": FeatureConfig,
    "paths": PathConfig,
    "analysis": AnalysisConfig,
}


@dataclass
class RunConfig:
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def manifest(self) -> Path:
        return Path(self.paths.manifest or Path(self.paths.corpus_dir) / "manifest.tsv")

    @property
    def cache_dir(self) -> Path:
        return Path(self.paths.cache_dir or Path(self.paths.corpus_dir) / "cache")

    def to_text(self) -> str:
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                out.append(f"{f.name} = {format_value(getattr(getattr(self, name), f.name))}")
            out.append("")
        return "\n".join(out)


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, Tuple[str, int]]]:
    """``{section: {key: (raw value, line number)}}``; '#' and ';' start comments."""
    out: Dict[str, Dict[str, Tuple[str, int]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        out[section][key.strip()] = (value.strip(), lineno)
    return out


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build(cls, base, values: Dict[str, Tuple[str, str]], section: str):
    """Apply ``{key: (raw, where)}`` on top of ``base`` and re-validate."""
    kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for key, (raw, where) in values.items():
        if key not in kwargs:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        kwargs[key] = _convert(raw, kwargs[key], where)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        where = ", ".join(sorted({w for _, w in values.values()})) or section
        raise ConfigError(f"{where}: invalid [{section}]: {exc}") from None


def load_config(path: Optional[str] = None, overrides=(), base: Optional[RunConfig] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    cfg = base or RunConfig()
    layers = []
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        parsed = parse_text(text, str(p))
        layers.append({s: {k: (v, f"{p}:{ln}") for k, (v, ln) in kv.items()} for s, kv in parsed.items()})
    cli: Dict[str, Dict[str, Tuple[str, str]]] = {}
    for item in overrides:
        name, eq, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not eq or not dot:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"--set {item!r}: unknown section [{section}]")
        cli.setdefault(section, {})[key] = (value.strip(), f"--set {name.strip()}")
    layers.append(cli)
    for layer in layers:
        for section, values in layer.items():
            setattr(cfg, section, _build(SECTIONS[section], getattr(cfg, section), values, section))
    return cfg
