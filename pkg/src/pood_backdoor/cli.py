"""Command-line entry point: ``pood-backdoor <verb> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 missing or stale dependency,
4 any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, dry_run, load_config, load_preset
from .pipeline import DependencyError, load_pood, load_victim_split, run_pipeline, upstream
from .store import StaleArtifactError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4

STAGE_VERBS = {
    "binarize": "binarize",
    "train-decoder": "decoder",
    "train-encoder": "encoder",
    "make-trigger": "trigger",
    "poison": "poison",
    "train-victim": "victim",
    "evaluate": "evaluate",
    "defend": "defend",
}


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        raise ConfigError("a config is required (--config FILE or --preset NAME)")
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    for key, value in _verb_overrides(args).items():
        overrides[key] = value
    if overrides:
        try:
            cfg = cfg.replace(**overrides)
        except KeyError as exc:
            raise ConfigError(f"unknown config field {exc.args[0]!r}") from exc
    return cfg


def _verb_overrides(args) -> dict:
    out = {}
    if getattr(args, "mode", None):
        out["attack.mode"] = args.mode
    if getattr(args, "trigger", None):
        out["attack.mode"] = args.trigger
    if getattr(args, "ratio", None) is not None:
        out["attack.ratio"] = args.ratio
    if getattr(args, "target", None) is not None:
        t = args.target
        out["target_class"] = int(t) if t.isdigit() else t
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _run_stage(args) -> None:
    cfg = _config(args)
    stage = STAGE_VERBS[args.verb]
    stages = upstream(stage) if args.with_deps else [stage]
    m = run_pipeline(cfg, stages, force=args.force)
    _emit({"manifest": str(m.path), "events": m.events, "metrics": m.metrics})


def _run(args) -> None:
    cfg = _config(args)
    m = run_pipeline(cfg, None, force=args.force)
    _emit({"manifest": str(m.path), "events": m.events, "metrics": m.metrics})


def _ingest(args) -> None:
    from .data import save_archive

    cfg = _config(args)
    splits = {
        "train": load_victim_split(cfg, "victim_train"),
        "test": load_victim_split(cfg, "victim_test"),
        "pood": load_pood(cfg),
    }
    out = Path(args.out) if args.out else Path(cfg.artifact_root) / "datasets" / cfg.data.name
    manifest = save_archive(splits, out, seed=cfg.seeds.data, provenance={"source": cfg.data.source, "pood_source": cfg.data.pood_source})
    _emit({"archive": str(out), "splits": {k: v["n"] for k, v in manifest["splits"].items()}})


def _sweep(args) -> None:
    from .sweeps import run_sweep

    cfg = _config(args)
    values = [yaml.safe_load(v) for v in args.values.split(",")]
    out = args.out or str(Path(cfg.artifact_root) / "results" / f"sweep-{args.axis}-{cfg.hash()[:12]}.jsonl")
    reports = run_sweep(args.axis, values, cfg, workers=args.workers, out=out)
    _emit({"results": out, "runs": [{"label": r.label, "acc": r.acc, "tar_acc": r.tar_acc, "asr": r.asr} for r in reports]})


def _ablate(args) -> None:
    from .sweeps import run_ablation

    cfg = _config(args)
    values = [yaml.safe_load(v) for v in args.values.split(",")] if args.values else None
    out = args.out or str(Path(cfg.artifact_root) / "results" / f"ablation-{args.kind}-{cfg.hash()[:12]}.jsonl")
    reports = run_ablation(args.kind, cfg, values=values, out=out)
    _emit({"results": out, "runs": {k: {"acc": r.acc, "tar_acc": r.tar_acc, "asr": r.asr} for k, r in reports.items()}})


def _report(args) -> None:
    from .report import build_report

    if not args.inputs:
        raise ConfigError("report needs at least one manifest or results file")
    for p in args.inputs:
        if not Path(p).exists():
            raise DependencyError(f"{p} does not exist")
    path = build_report(args.inputs, args.out)
    print(path)


def _validate(args) -> None:
    cfg = _config(args)
    if args.dry_run:
        _emit(dry_run(cfg))
    else:
        _emit({"valid": True, "config_hash": cfg.hash()})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pood-backdoor", description="Data-free clean-label backdoor experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, help, fn):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="experiment YAML")
        sp.add_argument("--preset", help="bundled preset name, e.g. desk")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. attack.ratio=0.01")
        sp.set_defaults(fn=fn)
        return sp

    add("ingest", "load and validate the datasets, write a checksummed archive", _ingest).add_argument("--out")
    for verb, stage in STAGE_VERBS.items():
        sp = add(verb, f"run the {stage} stage", _run_stage)
        sp.add_argument("--force", action="store_true", help="recompute even if cached")
        sp.add_argument("--with-deps", action="store_true", help="also run missing upstream stages")
        if verb == "make-trigger":
            sp.add_argument("--mode", choices=("fixed", "dynamic", "min-loss"))
        if verb == "poison":
            sp.add_argument("--ratio", type=float)
            sp.add_argument("--target")
            sp.add_argument("--trigger", help="trigger mode: fixed, dynamic, min-loss or a baseline")
    sp = add("run", "run every stage", _run)
    sp.add_argument("--force", action="store_true")
    sp = add("sweep", "evaluate one run per axis value", _sweep)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True, help="comma separated")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out")
    sp = add("ablate", "run an ablation", _ablate)
    sp.add_argument("--kind", required=True, choices=("cross_domain_trigger", "encoder_accuracy", "min_loss_trigger"))
    sp.add_argument("--values", help="encoder epoch counts for encoder_accuracy")
    sp.add_argument("--out")
    sp = sub.add_parser("report", help="tables and plots from manifests and result files")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--out", default="report")
    sp.set_defaults(fn=_report)
    add("validate", "check a config", _validate).add_argument("--dry-run", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, StaleArtifactError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
