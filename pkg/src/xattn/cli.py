"""Command line entry point: ``xattn <subcommand> ...``.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import analysis, checkpoint, corpus, evaluation, pipeline
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("xattn")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="sectioned key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xattn", description="Cross-attention LSTM speaker height/age regression")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("spec", nargs="?", help="config file holding a [synth] section (same as --config)")
    p.add_argument("--out", help="corpus directory (paths.corpus_dir)")

    p = sub.add_parser("extract-features", help="fill the feature cache")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--cache-dir")
    p.add_argument("--augment", action="store_true", help="also cache 0.9x/1.1x speed copies of training audio")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir")
    p.add_argument("--mode", choices=["last_hidden", "conventional", "cross"])
    p.add_argument("--seed", type=int)

    for name, helptext in (("evaluate", "score a checkpoint"), ("analyze-attention", "rank phones by attention")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint")
        src.add_argument("--run-dir", help="run directory written by train (uses its stored config)")
        p.add_argument("--manifest")
        p.add_argument("--cache-dir")
        p.add_argument("--out-dir")
        p.add_argument("--split", choices=["train", "val", "test"])
        p.add_argument("--mode", choices=["last_hidden", "conventional", "cross"],
                       help="expected architecture; a mismatch with the checkpoint is an error")
        p.add_argument("--gender-feature", choices=["yes", "no"], help="expected gender-feature setting")
        if name == "evaluate":
            p.add_argument("--with-literature", action="store_true", help="append reported literature rows")
            p.add_argument("--pooled", action="store_true", help="one pooled row instead of per-gender rows")
        else:
            p.add_argument("--top-k", type=int)

    p = sub.add_parser("run", help="synth-data (if needed), extract-features, train, evaluate, analyze-attention")
    _common(p)
    p.add_argument("--out-dir")

    p = sub.add_parser("grid", help="train and score every comparison setting into one table")
    _common(p)
    p.add_argument("--out-dir")
    p.add_argument("--no-literature", action="store_true")
    return ap


def _resolve(args) -> RunConfig:
    sets: List[str] = list(args.set)
    for attr, key in (("manifest", "paths.manifest"), ("cache_dir", "paths.cache_dir"), ("out_dir", "paths.out_dir"),
                      ("out", "paths.corpus_dir"), ("mode", "train.mode"), ("seed", "train.seed"),
                      ("workers", "features.workers"), ("top_k", "analysis.top_k"), ("split", "analysis.split")):
        v = getattr(args, attr, None)
        if v is not None and not (attr == "mode" and args.command in ("evaluate", "analyze-attention")):
            sets.append(f"{key}={v}")
    config = args.config or getattr(args, "spec", None)
    run_dir = getattr(args, "run_dir", None)
    if run_dir and not config:
        config = str(Path(run_dir) / "config.ini")
    return load_config(config, sets)


def _load_model(args, cfg: RunConfig):
    ck = args.checkpoint or str(Path(args.run_dir) / "model.xamp")
    reg, norm = checkpoint.load_regressor(ck)
    problems = []
    if args.mode and args.mode != reg.config.mode:
        problems.append(f"mode: checkpoint={reg.config.mode} flag={args.mode}")
    if args.gender_feature and (args.gender_feature == "yes") != norm.gender_feature:
        problems.append(f"gender_feature: checkpoint={norm.gender_feature} flag={args.gender_feature}")
    if any(s.startswith("train.") for s in args.set) or args.config:
        t = cfg.train
        for name, want in (("mode", reg.config.mode), ("n_units", reg.config.n_units),
                           ("n_frames_max", reg.config.n_frames_max), ("gender_feature", norm.gender_feature)):
            if getattr(t, name) != want:
                problems.append(f"{name}: checkpoint={want} config={getattr(t, name)}")
    if problems:
        raise UsageError("checkpoint/config architecture mismatch:\n  " + "\n  ".join(problems))
    return reg, norm


def _records(cfg: RunConfig, norm, split: str):
    recs = [r for r in corpus.read_manifest(cfg.manifest) if r.split == split]
    if not recs:
        raise UsageError(f"no {split} utterances in {cfg.manifest}")
    return corpus.load_features(recs, cfg.cache_dir, norm)


def cmd_synth(args, cfg: RunConfig) -> int:
    manifest = pipeline.synth(cfg)
    print(f"wrote {manifest}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    records = corpus.read_manifest(cfg.manifest)
    written, skipped, errors = corpus.extract_to_cache(records, cfg.cache_dir, augment=args.augment,
                                                       workers=cfg.features.workers)
    print(f"cache {cfg.cache_dir}: {len(written)} written, {len(skipped)} up to date, {len(errors)} failed")
    for key, msg in sorted(errors.items()):
        print(f"  FAILED {key}: {msg}", file=sys.stderr)
    return 1 if errors else 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.paths.out_dir)
    reg, hist, _ = pipeline.train(cfg, out_dir=out)
    print(f"trained {cfg.train.mode} (a={hist.selected_a}, epoch {hist.selected_epoch}); checkpoint {out / 'model.xamp'}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    reg, norm = _load_model(args, cfg)
    records = _records(cfg, norm, cfg.analysis.split)
    rows = evaluation.evaluate(reg, records, gender_partition=not args.pooled)
    if args.with_literature:
        rows += evaluation.literature_rows()
    out = Path(args.out_dir) if args.out_dir else Path(args.run_dir or Path(args.checkpoint).parent)
    txt, tsv = pipeline.write_table(rows, out, "eval")
    print(evaluation.format_table(rows), end="")
    print(f"wrote {txt} and {tsv}")
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    reg, norm = _load_model(args, cfg)
    records = _records(cfg, norm, cfg.analysis.split)
    table = pipeline.phone_attention(reg, records)
    total = sum(table.total.values())
    if abs(total - table.n_utterances) > 1e-9 * max(1, table.n_utterances):
        print(f"attention mass {total} != utterance count {table.n_utterances}", file=sys.stderr)
        return 1
    out = Path(args.out_dir) if args.out_dir else Path(args.run_dir or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "phones.tsv").write_text(table.to_tsv())
    text = analysis.report(table, cfg.analysis.top_k)
    (out / "phones.txt").write_text(text)
    print(text, end="")
    print(f"wrote {out / 'phones.tsv'} and {out / 'phones.txt'}")
    return 0


def cmd_run(args, cfg: RunConfig) -> int:
    if not cfg.manifest.exists():
        pipeline.synth(cfg)
    _, _, errors = pipeline.extract(cfg)
    if errors:
        for key, msg in sorted(errors.items()):
            print(f"  FAILED {key}: {msg}", file=sys.stderr)
        return 1
    out = Path(cfg.paths.out_dir)
    splits, norm = pipeline.load_splits(cfg)
    reg, hist, _ = pipeline.train(cfg, splits, norm, out)
    rows = pipeline.evaluate(reg, splits["test"])
    pipeline.write_table(rows, out, "eval")
    print(evaluation.format_table(rows), end="")
    if reg.config.mode != "last_hidden":
        table = pipeline.phone_attention(reg, splits["test"])
        (out / "phones.tsv").write_text(table.to_tsv())
        text = analysis.report(table, cfg.analysis.top_k)
        (out / "phones.txt").write_text(text)
        print(text, end="")
    print(f"run directory: {out}")
    return 0


def cmd_grid(args, cfg: RunConfig) -> int:
    _, _, errors = pipeline.extract(cfg)
    if errors:
        return 1
    rows = pipeline.run_grid(cfg, Path(cfg.paths.out_dir), with_literature=not args.no_literature)
    print(evaluation.format_table(rows), end="")
    return 0


COMMANDS = {
    "synth-data": cmd_synth,
    "extract-features": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze-attention": cmd_analyze,
    "run": cmd_run,
    "grid": cmd_grid,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, corpus.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
