"""Parameter sweeps and the three ablations, built on :func:`run_pipeline`."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, ExperimentConfig
from .evaluation import MetricsReport
from .pipeline import run_pipeline, upstream
from .store import ArtifactStore

AXES = {
    "poison_ratio": "attack.ratio",
    "decoder_arch": "decoder.arch",
    "victim_arch": "victim.arch",
    "target_class": "target_class",
    "trigger_mode": "attack.mode",
    "amplification": "attack.amplification",
}
ABLATIONS = ("cross_domain_trigger", "encoder_accuracy", "min_loss_trigger")
_EVAL_STAGES = tuple(upstream("evaluate"))


def _evaluate(cfg: ExperimentConfig, store: ArtifactStore | None, force: bool = False, **extra: Any) -> MetricsReport:
    manifest = run_pipeline(cfg, _EVAL_STAGES, force=force, store=store)
    report = manifest.report
    report.extra.update(extra)
    report.extra["manifest"] = str(manifest.path)
    report.extra["artifact"] = manifest.key("evaluate")
    if "encoder" in manifest.metrics:
        report.extra["erase_rate"] = manifest.metrics["encoder"]["erase_rate"]
    return report


def _point(args) -> dict:
    cfg, root, axis, value = args
    return _evaluate(cfg, ArtifactStore(root), axis=axis, value=value).to_dict()


def write_records(reports: Sequence[MetricsReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports))
    return path


def run_sweep(
    axis: str,
    values: Sequence[Any],
    config: ExperimentConfig,
    store: ArtifactStore | None = None,
    workers: int = 1,
    out: str | Path | None = None,
) -> list[MetricsReport]:
    """One evaluated run per value of ``axis``; configs are validated before anything trains."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; axes are {sorted(AXES)}")
    if not values:
        raise ConfigError("a sweep needs at least one value")
    store = store or ArtifactStore(config.artifact_root)
    configs = [config.replace(**{AXES[axis]: v}) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            dicts = list(pool.map(_point, [(c, str(store.root), axis, v) for c, v in zip(configs, values)]))
        reports = [MetricsReport(**d) for d in dicts]
    else:
        reports = [_evaluate(c, store, axis=axis, value=v) for c, v in zip(configs, values)]
    for r, v in zip(reports, values):
        r.label = f"{axis}={v}"
    if out is not None:
        write_records(reports, out)
    return reports


def run_ablation(
    kind: str,
    config: ExperimentConfig,
    store: ArtifactStore | None = None,
    values: Sequence[Any] | None = None,
    out: str | Path | None = None,
) -> dict[str, MetricsReport]:
    """Named reports for one ablation.

    * ``min_loss_trigger``: ``max_loss`` (the default selection) and ``min_loss``.
    * ``cross_domain_trigger``: ``in_domain``, ``cross_domain`` (trigger built from
      ``data.foreign_source``) and ``clean`` (an unpoisoned victim probed with the
      cross-domain trigger).
    * ``encoder_accuracy``: one fixed-trigger run per encoder epoch count in
      ``values``; each report carries the encoder's erase rate.
    """
    store = store or ArtifactStore(config.artifact_root)
    if kind == "min_loss_trigger":
        out_reports = {
            "max_loss": _evaluate(config.replace(**{"attack.mode": "fixed"}), store, ablation=kind),
            "min_loss": _evaluate(config.replace(**{"attack.mode": "min-loss"}), store, ablation=kind),
        }
    elif kind == "cross_domain_trigger":
        d = config.data
        if not d.foreign_source:
            raise ConfigError("the cross_domain_trigger ablation needs data.foreign_source")
        foreign = config.replace(**{"data.pood_source": d.foreign_source, "data.pood_target": d.foreign_target, "attack.mode": "fixed"})
        out_reports = {
            "in_domain": _evaluate(config.replace(**{"attack.mode": "fixed"}), store, ablation=kind),
            "cross_domain": _evaluate(foreign, store, ablation=kind),
            "clean": _evaluate(foreign.replace(**{"attack.ratio": 0.0}), store, ablation=kind),
        }
    elif kind == "encoder_accuracy":
        epochs = list(values) if values is not None else sorted({0, 1, 3, config.encoder.epochs})
        out_reports = {}
        for e in epochs:
            if not isinstance(e, int) or e < 0:
                raise ConfigError(f"encoder epochs must be non-negative integers, got {e!r}")
            cfg = config.replace(**{"encoder.epochs": e, "attack.mode": "fixed"})
            out_reports[f"epochs={e}"] = _evaluate(cfg, store, ablation=kind, encoder_epochs=e)
    else:
        raise ConfigError(f"unknown ablation {kind!r}; ablations are {ABLATIONS}")
    for name, r in out_reports.items():
        r.label = name
    if out is not None:
        write_records(list(out_reports.values()), out)
    return out_reports
