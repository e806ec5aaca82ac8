"""End-to-end stage runner over the artifact store.

Stages run in the fixed order binarize, decoder, encoder, trigger, poison,
victim, evaluate, defend. Each stage hashes only the configuration slice it
reads, so sweeping the poison ratio reuses the decoder, encoder and trigger.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import BASELINE_MODES, ConfigError, ExperimentConfig
from .data import (
    BinaryPOODDataset,
    DatasetConfig,
    LabeledDataset,
    binarize_pood,
    check_disjoint,
    load_dataset,
    nearest_class_name,
    save_npz,
)
from .defenses import DefenseReport, grad_cam, mass_in_region, neural_cleanse, prune_defense, strip_defense
from .evaluation import (
    BaselineTrigger,
    BaselineTriggerSpec,
    MetricsReport,
    evaluate_attack,
    make_baseline_trigger,
    poison_baseline,
    test_applier,
)
from .models import DecoderModel, EncoderModel, VictimModel, train_decoder, train_victim, write_log
from .poison import PoisonedDataset, inject, plan_poison, plan_size
from .store import ArtifactStore, StaleArtifactError, artifact_key
from .trigger import Trigger, dynamic_trigger, select_fixed_trigger, select_min_loss_trigger, train_encoder

logger = logging.getLogger(__name__)

STAGES = ("binarize", "decoder", "encoder", "trigger", "poison", "victim", "evaluate", "defend")
_DEPS = {
    "binarize": (),
    "decoder": ("binarize",),
    "encoder": ("binarize", "decoder"),
    "trigger": ("binarize", "decoder", "encoder"),
    "poison": ("trigger",),
    "victim": ("poison",),
    "evaluate": ("victim", "trigger"),
    "defend": ("victim", "trigger"),
}


class DependencyError(RuntimeError):
    pass


class DisjointnessError(ConfigError):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# data access


_DATA_CACHE: OrderedDict = OrderedDict()


def _cached(key, load: Callable[[], LabeledDataset]) -> LabeledDataset:
    if key in _DATA_CACHE:
        _DATA_CACHE.move_to_end(key)
        return _DATA_CACHE[key]
    ds = load()
    _DATA_CACHE[key] = ds
    while len(_DATA_CACHE) > 8:
        _DATA_CACHE.popitem(last=False)
    return ds


def dataset_config(cfg: ExperimentConfig, pood_source: str | None = None) -> DatasetConfig:
    d = cfg.data
    return DatasetConfig(
        name=d.name,
        source=d.source,
        shape=tuple(d.shape),
        target_class=cfg.target_class,
        pood_source=pood_source or d.pood_source,
        pood_target_name=d.pood_target,
        resize=d.resize,
        augmentation=list(d.augmentation),
        seed=cfg.seeds.data,
    )


def load_victim_split(cfg: ExperimentConfig, role: str) -> LabeledDataset:
    d = cfg.data
    key = (d.source, tuple(d.shape), d.resize, cfg.seeds.data, role)
    return _cached(key, lambda: load_dataset(dataset_config(cfg), role))


def load_pood(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    key = (d.pood_source, tuple(d.shape), d.resize, cfg.seeds.data, "pood")
    return _cached(key, lambda: load_dataset(dataset_config(cfg), "pood"))


def resolve_target(cfg: ExperimentConfig, class_names) -> int:
    t = cfg.target_class
    names = list(class_names)
    if isinstance(t, str):
        if t not in names:
            raise ConfigError(f"target_class {t!r} is not a victim class; classes are {names}")
        return names.index(t)
    if not 0 <= t < len(names):
        raise ConfigError(f"target_class {t} out of range for {len(names)} classes")
    return t


def is_baseline(cfg: ExperimentConfig) -> bool:
    return cfg.attack.mode in BASELINE_MODES


def dependencies(cfg: ExperimentConfig, stage: str) -> tuple[str, ...]:
    if is_baseline(cfg) and stage == "trigger":
        return ()
    if stage == "poison" and poison_count(cfg) == 0:
        # an empty plan never reads the trigger, so every clean run shares one victim
        return ()
    return _DEPS[stage]


def applicable(cfg: ExperimentConfig, stage: str) -> bool:
    return not (is_baseline(cfg) and stage in ("binarize", "decoder", "encoder"))


def poison_count(cfg: ExperimentConfig) -> int:
    return plan_size(cfg.attack.ratio, len(load_victim_split(cfg, "victim_train")))


def stage_settings(cfg: ExperimentConfig, stage: str) -> dict:
    """The configuration slice a stage reads; its hash is the stage's config hash."""
    d, a, s = cfg.data, cfg.attack, cfg.seeds
    victim_data = {"source": d.source, "shape": d.shape, "resize": d.resize, "seed": s.data}
    if stage == "binarize":
        return {
            "victim": victim_data,
            "pood_source": d.pood_source,
            "pood_target": d.pood_target,
            "balance": d.balance,
            "balance_ratio": d.balance_ratio,
            "target_class": cfg.target_class,
        }
    if stage == "decoder":
        return {"model": dataclasses.asdict(cfg.decoder), "augmentation": d.augmentation, "seed": s.decoder}
    if stage == "encoder":
        return {"model": dataclasses.asdict(cfg.encoder), "eps_gen": a.eps_gen, "seed": s.encoder}
    if stage == "trigger":
        if is_baseline(cfg):
            return {"mode": a.mode, "baselines": dataclasses.asdict(cfg.baselines), "shape": d.shape, "seed": s.plan}
        return {"mode": a.mode, "max_candidates": a.max_candidates, "pood_source": d.pood_source, "seed": s.plan}
    if stage == "poison":
        out = {"victim": victim_data, "target_class": cfg.target_class, "ratio": a.ratio, "seed": s.plan}
        if not is_baseline(cfg):
            out.update(eps_poison=a.eps_poison, train_scale=a.train_scale)
        return out
    if stage == "victim":
        return {"model": dataclasses.asdict(cfg.victim), "augmentation": d.augmentation, "seed": s.victim}
    if stage == "evaluate":
        return {"test": victim_data, "target_class": cfg.target_class, "amplification": a.amplification}
    if stage == "defend":
        return {
            "test": victim_data,
            "target_class": cfg.target_class,
            "defenses": dataclasses.asdict(cfg.defenses),
            "amplification": a.amplification,
            "seed": s.victim,
        }
    raise ValueError(f"unknown stage {stage!r}")


def stage_keys(cfg: ExperimentConfig) -> dict[str, tuple[str, dict]]:
    """``{stage: (artifact key, {dependency: key})}`` for every applicable stage, without running anything."""
    keys = {}
    for stage in STAGES:
        if not applicable(cfg, stage):
            continue
        inputs = {dep: keys[dep][0] for dep in dependencies(cfg, stage)}
        keys[stage] = (artifact_key(stage, _digest(stage_settings(cfg, stage)), inputs), inputs)
    return keys


# ---------------------------------------------------------------------------
# stage bodies: each writes into ``out`` and returns metadata for the index


class _Context:
    def __init__(self, cfg: ExperimentConfig, store: ArtifactStore, keys: dict):
        self.cfg = cfg
        self.store = store
        self.keys = keys
        self._objects: dict[str, object] = {}

    def path(self, stage: str) -> Path:
        return self.store.path(self.keys[stage][0])

    def get(self, stage: str):
        if stage not in self._objects:
            self._objects[stage] = _LOADERS[stage](self, self.path(stage))
        return self._objects[stage]

    @property
    def target(self) -> int:
        return resolve_target(self.cfg, load_victim_split(self.cfg, "victim_train").class_names)


def _run_binarize(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    victim = load_victim_split(cfg, "victim_train")
    pood = load_pood(cfg)
    report = check_disjoint(victim, pood)
    if report.overlap:
        raise DisjointnessError(f"POOD shares classes with the victim task: {sorted(report.overlap)}")
    t = ctx.target
    name = cfg.data.pood_target or nearest_class_name(victim.class_names[t], pood.class_names)
    b = binarize_pood(pood, name, cfg.data.balance, cfg.data.balance_ratio, seed=cfg.seeds.data)
    np.save(out / "images.npy", b.images, allow_pickle=False)
    np.save(out / "labels.npy", b.labels, allow_pickle=False)
    np.save(out / "source_indices.npy", b.source_indices, allow_pickle=False)
    meta = {
        "source_target_class": name,
        "victim_target_class": victim.class_names[t],
        "counts": list(b.counts),
        "balance_policy": b.balance_policy,
        "fuzzy_pairs": sorted(sorted(p) for p in report.fuzzy_pairs),
    }
    (out / "binary.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def _load_binarize(ctx, path: Path) -> BinaryPOODDataset:
    meta = json.loads((path / "binary.json").read_text())
    return BinaryPOODDataset(
        images=np.load(path / "images.npy"),
        labels=np.load(path / "labels.npy"),
        source_target_class=meta["source_target_class"],
        counts=tuple(meta["counts"]),
        source_indices=np.load(path / "source_indices.npy"),
        balance_policy=meta["balance_policy"],
    )


def _run_decoder(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    b = ctx.get("binarize")
    m = DecoderModel.build(cfg.decoder.arch, b.images.shape[1:], width=cfg.decoder.width, seed=cfg.seeds.decoder)
    hyper = cfg.decoder.hyper(cfg.seeds.decoder, cfg.data.augmentation)
    hyper.log_path = str(out / "log.jsonl")
    train_decoder(b, m, hyper)
    m.config_hash = _digest(stage_settings(cfg, "decoder"))
    m.save(out / "decoder.pt")
    return {"metrics": m.metrics}


def _run_encoder(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    b, dec = ctx.get("binarize"), ctx.get("decoder")
    enc = EncoderModel.build(b.images.shape[1:], cfg.attack.eps_gen, width=cfg.encoder.width or 16, seed=cfg.seeds.encoder)
    hyper = cfg.encoder.hyper(cfg.seeds.encoder, cfg.data.augmentation)
    train_encoder(enc, dec, b.target_images, hyper)
    write_log(enc.history, str(out / "log.jsonl"))
    enc.config_hash = _digest(stage_settings(cfg, "encoder"))
    enc.save(out / "encoder.pt")
    return {"metrics": enc.metrics}


def _baseline_spec(cfg: ExperimentConfig) -> BaselineTriggerSpec:
    kind, policy = cfg.attack.mode.split("-")
    return BaselineTriggerSpec(
        kind="badnets_patch" if kind == "badnets" else "blend_image",
        patch_size=cfg.baselines.patch_size,
        position=cfg.baselines.position,
        alpha=cfg.baselines.blend_alpha,
        label_policy="clean" if policy == "c" else "dirty",
        seed=cfg.seeds.plan,
    )


def _run_trigger(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    if is_baseline(cfg):
        trig = make_baseline_trigger(_baseline_spec(cfg), cfg.data.shape)
        spec = dataclasses.asdict(trig.spec)
        spec.pop("blend_image")
        (out / "baseline.json").write_text(json.dumps({"spec": spec, "shape": list(trig.image_shape)}, sort_keys=True))
        np.save(out / "pattern.npy", trig.pattern, allow_pickle=False)
        return {"mode": cfg.attack.mode}
    b, dec, enc = ctx.get("binarize"), ctx.get("decoder"), ctx.get("encoder")
    a = cfg.attack
    source = cfg.data.pood_source
    if a.mode == "dynamic":
        trig = dynamic_trigger(enc, source_id=source)
    else:
        select = select_fixed_trigger if a.mode == "fixed" else select_min_loss_trigger
        trig = select(enc, dec, b.target_images, a.max_candidates, cfg.seeds.plan, source)
    trig.save(out / "trigger.npz")
    return {"mode": a.mode, "provenance": trig.provenance}


def _load_trigger(ctx, path: Path):
    if (path / "baseline.json").exists():
        doc = json.loads((path / "baseline.json").read_text())
        return make_baseline_trigger(BaselineTriggerSpec(**doc["spec"]), doc["shape"])
    return Trigger.load(path / "trigger.npz")


def _run_poison(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    train = load_victim_split(cfg, "victim_train")
    t = ctx.target
    a = cfg.attack
    base_ref = _digest({"source": cfg.data.source, "shape": cfg.data.shape, "seed": cfg.seeds.data})
    n = poison_count(cfg)
    if is_baseline(cfg) and n:
        trig = ctx.get("trigger")
        poisoned, idx = poison_baseline(train, trig, t, a.ratio, seed=cfg.seeds.plan)
        save_npz(out / "baseline_rows.npz", indices=idx, rows=poisoned.images[idx], labels=poisoned.labels[idx])
        meta = {"kind": "baseline", "n_poison": int(len(idx)), "base_ref": base_ref, "dirty": trig.dirty}
        (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return meta
    plan = plan_poison(train, t, a.ratio, cfg.seeds.plan, a.eps_poison, a.mode)
    if len(plan):
        pd = inject(train, plan, ctx.get("trigger"), scale=a.train_scale)
    else:
        empty = np.zeros((0,) + train.shape, dtype=np.float32)
        pd = PoisonedDataset(train, plan, np.array(train.images), empty, np.zeros(0), {"mode": "clean"})
    manifest = pd.save(out, base_ref=base_ref)
    return {"kind": "dfb", "n_poison": len(plan), "base_ref": base_ref, "max_linf": manifest["max_linf"]}


def _load_poison(ctx, path: Path) -> LabeledDataset:
    base = load_victim_split(ctx.cfg, "victim_train")
    if (path / "baseline_rows.npz").exists():
        with np.load(path / "baseline_rows.npz") as z:
            idx, rows, labels = z["indices"], z["rows"], z["labels"]
        images, lab = np.array(base.images), np.array(base.labels)
        images[idx], lab[idx] = rows, labels
        return LabeledDataset(images, lab, base.class_names, base.role)
    return PoisonedDataset.load(path, base).dataset


def _run_victim(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    train = ctx.get("poison")
    test = load_victim_split(cfg, "victim_test")
    v = cfg.victim
    m = VictimModel.build(v.arch, train.shape, train.num_classes, width=v.width, seed=cfg.seeds.victim)
    hyper = v.hyper(cfg.seeds.victim, cfg.data.augmentation)
    hyper.log_path = str(out / "log.jsonl")
    train_victim(train, m, hyper)
    m.metrics["test_acc"] = m.accuracy(test.images, test.labels)
    m.config_hash = _digest(stage_settings(cfg, "victim"))
    m.save(out / "victim.pt")
    return {"metrics": m.metrics}


def _run_evaluate(ctx: _Context, out: Path) -> dict:
    cfg = ctx.cfg
    report = evaluate_attack(
        ctx.get("victim"),
        load_victim_split(cfg, "victim_test"),
        ctx.get("trigger"),
        ctx.target,
        cfg.attack.amplification,
        config_hash=cfg.hash(),
        seed=cfg.seeds.victim,
        label=cfg.attack.mode,
    )
    report.extra = {"ratio": cfg.attack.ratio, "n_poison": poison_count(cfg)}
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return {"metrics": report.to_dict()}


def _load_evaluate(ctx, path: Path) -> MetricsReport:
    return MetricsReport(**json.loads((path / "metrics.json").read_text()))


def run_defenses(cfg: ExperimentConfig, victim: VictimModel, trigger, test: LabeledDataset, target: int) -> tuple[DefenseReport, dict]:
    """All four defenses against one victim; returns the report and the Grad-CAM arrays."""
    d = cfg.defenses
    rng = np.random.default_rng(cfg.seeds.victim)
    apply = test_applier(trigger, cfg.attack.amplification)
    sample = test.images[np.sort(rng.choice(len(test), min(d.nc_samples, len(test)), replace=False))]
    nc = neural_cleanse(victim, sample, steps=d.nc_steps, lr=d.nc_lr, init_cost=d.nc_init_cost, seed=cfg.seeds.victim)

    def evaluate(model):
        r = evaluate_attack(model, test, trigger, target, cfg.attack.amplification)
        return {"acc": r.acc, "asr": r.asr}

    curve = prune_defense(victim, sample, d.prune_rates, evaluate)

    others = np.flatnonzero(test.labels != target)
    probe_idx = np.sort(rng.choice(others, min(d.strip_probes, len(others)), replace=False))
    probes = test.images[probe_idx]
    pool = np.delete(test.images, probe_idx, axis=0)
    strip = {
        "clean": strip_defense(victim, probes, pool, d.strip_perturbations, d.strip_alpha, seed=cfg.seeds.victim),
        "triggered": strip_defense(victim, apply(probes), pool, d.strip_perturbations, d.strip_alpha, seed=cfg.seeds.victim),
    }
    k = min(d.sentinet_probes, len(probes))
    triggered = apply(probes[:k])
    cams = {
        "clean_images": probes[:k],
        "clean": np.stack([grad_cam(victim, x) for x in probes[:k]]) if k else np.zeros((0,) + test.shape[:2]),
        "triggered_images": triggered,
        "triggered": np.stack([grad_cam(victim, x) for x in triggered]) if k else np.zeros((0,) + test.shape[:2]),
    }
    return DefenseReport(nc, curve, strip, {"clean": cams["clean"], "triggered": cams["triggered"]}), cams


def _run_defend(ctx: _Context, out: Path) -> dict:
    from .report import plot_heatmaps, plot_neural_cleanse, plot_pruning, plot_strip

    cfg = ctx.cfg
    test = load_victim_split(cfg, "victim_test")
    trig = ctx.get("trigger")
    report, cams = run_defenses(cfg, ctx.get("victim"), trig, test, ctx.target)
    record = report.to_record()
    t = ctx.target
    record["target"] = t
    if isinstance(trig, BaselineTrigger) and trig.region is not None and len(cams["triggered"]):
        record["sentinet"]["triggered"]["region_mass"] = [list(mass_in_region(h, trig.region)) for h in cams["triggered"]]
    (out / "defense.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    save_npz(out / "defense_arrays.npz", nc_masks=report.neural_cleanse.masks, nc_patterns=report.neural_cleanse.patterns, **cams)
    names = list(test.class_names)
    plot_neural_cleanse(record["neural_cleanse"], out / "neural_cleanse.png", report.neural_cleanse.masks, names)
    plot_pruning(report.pruning, out / "pruning.png")
    plot_strip(report.strip, out / "strip.png")
    if len(cams["triggered"]):
        imgs = np.concatenate([cams["clean_images"], cams["triggered_images"]])
        maps = np.concatenate([cams["clean"], cams["triggered"]])
        titles = ["clean"] * len(cams["clean"]) + ["triggered"] * len(cams["triggered"])
        plot_heatmaps(imgs, maps, out / "sentinet.png", titles)
    nc = record["neural_cleanse"]
    return {
        "summary": {
            "nc_anomaly_target": nc["anomaly_index"][t],
            "nc_flagged": nc["flagged"],
            "strip_clean_mean": record["strip"]["clean"]["mean"],
            "strip_triggered_mean": record["strip"]["triggered"]["mean"],
            "pruning": report.pruning,
        }
    }


def _load_json(name):
    return lambda ctx, path: json.loads((path / name).read_text())


_RUNNERS = {
    "binarize": _run_binarize,
    "decoder": _run_decoder,
    "encoder": _run_encoder,
    "trigger": _run_trigger,
    "poison": _run_poison,
    "victim": _run_victim,
    "evaluate": _run_evaluate,
    "defend": _run_defend,
}
_LOADERS = {
    "binarize": _load_binarize,
    "decoder": lambda ctx, p: DecoderModel.load(p / "decoder.pt"),
    "encoder": lambda ctx, p: EncoderModel.load(p / "encoder.pt"),
    "trigger": _load_trigger,
    "poison": _load_poison,
    "victim": lambda ctx, p: VictimModel.load(p / "victim.pt"),
    "evaluate": _load_evaluate,
    "defend": _load_json("defense.json"),
}


# ---------------------------------------------------------------------------
# runner


@dataclass
class RunManifest:
    doc: dict
    path: Path
    events: dict[str, str] = field(default_factory=dict)
    store: ArtifactStore | None = None

    @property
    def stages(self) -> list[dict]:
        return self.doc["stages"]

    @property
    def metrics(self) -> dict:
        return self.doc["metrics"]

    @property
    def report(self) -> MetricsReport | None:
        m = self.metrics.get("evaluate")
        return MetricsReport(**m) if m else None

    def key(self, stage: str) -> str:
        return next(r["key"] for r in self.stages if r["stage"] == stage)

    def artifact_path(self, stage: str) -> Path:
        return self.store.path(self.key(stage))

    @property
    def cache_hits(self) -> list[str]:
        return [s for s, e in self.events.items() if e == "cached"]


def _normalize(stages: Iterable[str] | None) -> list[str]:
    if stages is None:
        return list(STAGES)
    stages = set(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s) {sorted(unknown)}; stages are {STAGES}")
    return [s for s in STAGES if s in stages]


def upstream(stage: str) -> list[str]:
    """``stage`` and everything it transitively needs, in run order."""
    need, todo = set(), [stage]
    while todo:
        s = todo.pop()
        if s not in need:
            need.add(s)
            todo.extend(_DEPS[s])
    return [s for s in STAGES if s in need]


def run_pipeline(
    config: ExperimentConfig,
    stages: Iterable[str] | None = None,
    force: bool = False,
    store: ArtifactStore | None = None,
) -> RunManifest:
    """Run the requested stages in dependency order and write a run manifest.

    A stage whose artifact key is already in the store is a cache hit unless
    ``force``. Upstream stages that were not requested must already exist in
    the store; a missing one raises :class:`DependencyError` and one whose
    files no longer match their recorded hashes raises
    :class:`StaleArtifactError` (both unless ``force``, which recomputes them).
    """
    store = store or ArtifactStore(config.artifact_root)
    requested = [s for s in _normalize(stages) if applicable(config, s)]
    keys = stage_keys(config)
    ctx = _Context(config, store, keys)
    plan: dict[str, str] = {}

    def resolve(stage: str, wanted: bool):
        if stage in plan:
            return
        key = keys[stage][0]
        exists, intact = store.has(key), False
        if exists:
            try:
                store.verify(key)
                intact = True
            except StaleArtifactError as exc:
                if not force:
                    raise StaleArtifactError(f"{exc}; rerun with force to rebuild it") from exc
        if intact and not (wanted and force):
            plan[stage] = "cached"
            return
        if not wanted and not exists:
            raise DependencyError(
                f"stage {stage!r} has not been run for this configuration (artifact {key[:12]} missing); run it first"
            )
        for dep in dependencies(config, stage):
            resolve(dep, dep in requested)
        plan[stage] = "run"

    for stage in requested:
        resolve(stage, True)

    for stage in STAGES:
        if plan.get(stage) != "run":
            continue
        key, inputs = keys[stage]
        staged = store.staging()
        try:
            logger.info("running stage %s (%s)", stage, key[:12])
            meta = _RUNNERS[stage](ctx, staged)
            meta["settings"] = stage_settings(config, stage)
            store.commit(key, staged, stage, _digest(meta["settings"]), dataclasses.asdict(config.seeds), inputs, meta)
        except BaseException:
            shutil.rmtree(staged, ignore_errors=True)
            raise
        ctx._objects.pop(stage, None)

    records, metrics = [], {}
    for stage in STAGES:
        if stage not in plan:
            if stage in _normalize(stages) and not applicable(config, stage):
                records.append({"stage": stage, "status": "not-applicable"})
            continue
        rec = store.record(keys[stage][0])
        records.append(
            {
                "stage": stage,
                "key": rec.key,
                "config_hash": rec.config_hash,
                "inputs": rec.inputs,
                "seeds": rec.seeds,
                "files": rec.files,
            }
        )
        if "metrics" in rec.meta:
            metrics[stage] = rec.meta["metrics"]
        if "summary" in rec.meta:
            metrics[stage] = rec.meta["summary"]
    doc = {
        "format": "run-manifest/1",
        "config_hash": config.hash(),
        "config": {k: v for k, v in config.to_dict().items() if k != "artifact_root"},
        "stages": records,
        "metrics": metrics,
    }
    runs = store.root / "runs"
    runs.mkdir(exist_ok=True)
    path = runs / f"{config.hash()}.{_digest([r['stage'] for r in records])[:8]}.json"
    text = json.dumps(doc, indent=2, sort_keys=True)
    if not path.exists() or path.read_text() != text:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(text)
        tmp.replace(path)
    return RunManifest(doc, path, dict(plan), store)


def load_stage(config: ExperimentConfig, stage: str, store: ArtifactStore | None = None):
    """Load an already-computed stage output (model, trigger, dataset or report)."""
    store = store or ArtifactStore(config.artifact_root)
    keys = stage_keys(config)
    if stage not in keys or not store.has(keys[stage][0]):
        raise DependencyError(f"stage {stage!r} has not been run for this configuration")
    return _Context(config, store, keys).get(stage)
