"""Attack metrics, trigger-quality study and the BadNets / Blend comparison baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .models import Classifier
from .poison import apply_test_trigger, plan_size, poison_transform
from .trigger import Trigger

Applier = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricsReport:
    """Percentages in [0, 100]. ``asr`` is measured on non-target test samples only."""

    acc: float
    tar_acc: float
    asr: float
    n_test: int
    n_target: int
    n_asr: int
    config_hash: str | None = None
    seed: int | None = None
    label: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineTriggerSpec:
    kind: str = "badnets_patch"
    patch_size: int = 3
    position: str = "bottom-right"
    patch_value: float = 1.0
    blend_image: np.ndarray | None = None
    alpha: float = 0.2
    label_policy: str = "clean"
    seed: int = 0


@dataclass(eq=False)
class BaselineTrigger:
    spec: BaselineTriggerSpec
    image_shape: tuple[int, int, int]
    pattern: np.ndarray
    region: tuple[slice, slice] | None = None

    @property
    def dirty(self) -> bool:
        return self.spec.label_policy == "dirty"

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=np.float32, copy=True)
        if self.spec.kind == "badnets_patch":
            x[:, self.region[0], self.region[1], :] = self.pattern
            return x
        return ((1 - self.spec.alpha) * x + self.spec.alpha * self.pattern).astype(np.float32)

    __call__ = apply


def make_baseline_trigger(spec: BaselineTriggerSpec, image_shape: Sequence[int]) -> BaselineTrigger:
    """Patch-paste (BadNets) or alpha-blend (Blend) trigger for images of ``image_shape``."""
    h, w, c = image_shape
    if spec.label_policy not in ("clean", "dirty"):
        raise ValueError(f"unknown label policy {spec.label_policy!r}")
    if spec.kind == "badnets_patch":
        s = spec.patch_size
        if s < 1 or s > h or s > w:
            raise ValueError(f"patch of size {s} does not fit a {h}x{w} image")
        corners = {
            "bottom-right": (h - s, w - s),
            "bottom-left": (h - s, 0),
            "top-right": (0, w - s),
            "top-left": (0, 0),
        }
        if spec.position not in corners:
            raise ValueError(f"unknown patch position {spec.position!r}")
        y, x = corners[spec.position]
        pattern = np.full((s, s, c), spec.patch_value, dtype=np.float32)
        return BaselineTrigger(spec, (h, w, c), pattern, (slice(y, y + s), slice(x, x + s)))
    if spec.kind == "blend_image":
        if not 0.0 <= spec.alpha <= 1.0:
            raise ValueError(f"blend alpha {spec.alpha} outside [0, 1]")
        if spec.blend_image is None:
            pattern = np.random.default_rng(spec.seed).random((h, w, c)).astype(np.float32)
        else:
            pattern = np.asarray(spec.blend_image, dtype=np.float32)
            if pattern.shape != (h, w, c):
                raise ValueError(f"blend image shape {pattern.shape} != {(h, w, c)}")
        return BaselineTrigger(spec, (h, w, c), pattern)
    raise ValueError(f"unknown baseline kind {spec.kind!r}")


def poison_baseline(
    dataset: LabeledDataset, trigger: BaselineTrigger, target: int, ratio: float, seed: int = 0
) -> tuple[LabeledDataset, np.ndarray]:
    """Clean variant stamps target-class samples; dirty variant stamps others and relabels them ``target``."""
    k = plan_size(ratio, len(dataset))
    pool = np.flatnonzero((dataset.labels == target) != trigger.dirty)
    if k > len(pool):
        raise ValueError(f"need {k} samples, only {len(pool)} eligible")
    idx = np.sort(np.random.default_rng(seed).choice(pool, size=k, replace=False))
    images = np.array(dataset.images, copy=True)
    labels = np.array(dataset.labels, copy=True)
    if k:
        images[idx] = trigger.apply(images[idx])
        if trigger.dirty:
            labels[idx] = target
    return LabeledDataset(images, labels, dataset.class_names, dataset.role), idx


# ---------------------------------------------------------------------------
# metrics


def test_applier(trigger, amplification: float = 2.0) -> Applier:
    """Inference-time transform for a DFB trigger, a baseline trigger or a plain callable."""
    if isinstance(trigger, Trigger):
        return lambda x: apply_test_trigger(x, trigger, amplification)
    if callable(trigger):
        return trigger
    raise TypeError(f"cannot apply {type(trigger).__name__} as a trigger")


def train_applier(trigger, scale: float = 2.0, eps_poison: float = 16 / 255) -> Applier:
    """Training-time (poisoning) transform; DFB triggers are scaled then budget-clipped."""
    if isinstance(trigger, Trigger):
        return poison_transform(trigger, scale, eps_poison)
    if trigger is None:
        return lambda x: np.asarray(x, dtype=np.float32)
    if callable(trigger):
        return trigger
    raise TypeError(f"cannot apply {type(trigger).__name__} as a trigger")


def evaluate_attack(
    victim: Classifier,
    clean_test: LabeledDataset,
    trigger,
    target: int,
    amplification: float = 2.0,
    config_hash: str | None = None,
    seed: int | None = None,
    label: str | None = None,
) -> MetricsReport:
    if clean_test.role != "victim_test":
        raise ValueError(f"expected a victim_test dataset, got role {clean_test.role!r}")
    is_target = clean_test.labels == target
    if not is_target.any():
        raise ValueError(f"test set has no samples of target class {target}")
    pred = victim.predict(clean_test.images)
    acc = 100.0 * float((pred == clean_test.labels).mean())
    tar_acc = 100.0 * float((pred[is_target] == target).mean())
    others = clean_test.images[~is_target]
    if len(others):
        triggered = test_applier(trigger, amplification)(others)
        asr = 100.0 * float((victim.predict(triggered) == target).mean())
    else:
        asr = float("nan")
    return MetricsReport(acc, tar_acc, asr, len(clean_test), int(is_target.sum()), len(others), config_hash, seed, label)


def mean_cross_entropy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    z = torch.from_numpy(model.logits(images)).double()
    return float(F.cross_entropy(z, torch.from_numpy(np.asarray(labels, dtype=np.int64))))


def trigger_quality_eval(
    clean_models: Classifier | Sequence[Classifier],
    train_set: LabeledDataset,
    triggers: Mapping[str, object],
    classes: Sequence[int | str],
    scale: float = 2.0,
    eps_poison: float = 16 / 255,
) -> dict[str, dict[str, float]]:
    """Mean cross-entropy of clean classifiers on triggered class samples against their true labels.

    Returns ``{class_name: {"Clean": ce, <trigger name>: ce, ...}}``, each value
    averaged over ``clean_models`` (one model per repeat run).
    """
    models = [clean_models] if isinstance(clean_models, Classifier) else list(clean_models)
    table = {}
    for cls in classes:
        c = train_set.class_index(cls) if isinstance(cls, str) else int(cls)
        if not 0 <= c < train_set.num_classes or not (train_set.labels == c).any():
            raise ValueError(f"class {cls!r} absent from the training set")
        x = train_set.images[train_set.labels == c]
        y = np.full(len(x), c)
        row = {"Clean": float(np.mean([mean_cross_entropy(m, x, y) for m in models]))}
        for name, trig in triggers.items():
            xt = train_applier(trig, scale, eps_poison)(x)
            row[name] = float(np.mean([mean_cross_entropy(m, xt, y) for m in models]))
        table[train_set.class_names[c]] = row
    return table


def zero_trigger(shape: Sequence[int], eps_gen: float = 8 / 255) -> Trigger:
    return Trigger("fixed", eps_gen, residual=np.zeros(shape, dtype=np.float32), provenance={"selection": "zero"})

