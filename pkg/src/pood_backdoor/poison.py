"""Clean-label injection into the victim training set and test-time trigger application."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, save_npz, sha256_file
from .trigger import Trigger


@dataclass(frozen=True)
class PoisonPlan:
    target_class: int
    ratio: float
    seed: int
    indices: tuple[int, ...]
    eps_poison: float = 16 / 255
    mode: str = "fixed"
    n_total: int = 0

    def __len__(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "ratio": self.ratio,
            "seed": self.seed,
            "indices": list(self.indices),
            "eps_poison": self.eps_poison,
            "mode": self.mode,
            "n_total": self.n_total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonPlan":
        return cls(d["target_class"], d["ratio"], d["seed"], tuple(d["indices"]), d["eps_poison"], d["mode"], d["n_total"])


def plan_size(ratio: float, n_total: int) -> int:
    """Poison count; the ratio is a fraction of the whole training set (50/50000 = 0.1%)."""
    return int(np.floor(ratio * n_total + 0.5))


def plan_poison(
    dataset: LabeledDataset,
    target_class: int,
    ratio: float,
    seed: int = 0,
    eps_poison: float = 16 / 255,
    mode: str = "fixed",
) -> PoisonPlan:
    labels = dataset.labels
    n = len(labels)
    pool = np.flatnonzero(labels == target_class)
    if not 0 <= target_class < dataset.num_classes:
        raise ValueError(f"target class {target_class} out of range")
    if ratio < 0 or (n and ratio > len(pool) / n):
        raise ValueError(f"ratio {ratio} outside [0, {len(pool) / max(n, 1):.6g}] (target-class fraction)")
    k = plan_size(ratio, n)
    if k > len(pool):
        raise ValueError(f"plan needs {k} target samples but class {target_class} has {len(pool)}")
    chosen = np.sort(np.random.default_rng(seed).choice(pool, size=k, replace=False)) if k else np.array([], int)
    return PoisonPlan(target_class, float(ratio), seed, tuple(int(i) for i in chosen), float(eps_poison), mode, n)


def bounded_add(x: np.ndarray, delta: np.ndarray, eps: float | None) -> np.ndarray:
    """float32 ``clip01(x + clip(delta, eps))`` with |result - x| <= eps exactly in float64.

    Rounding ``x + delta`` to float32 can overshoot the budget by half an ulp of
    ``x``; offending entries are stepped back toward ``x`` one ulp at a time.
    """
    x = np.asarray(x, dtype=np.float32)
    d = np.asarray(delta, dtype=np.float64)
    if eps is not None:
        d = np.clip(d, -eps, eps)
    y = np.clip(x.astype(np.float64) + d, 0.0, 1.0).astype(np.float32)
    if eps is None:
        return y
    for _ in range(4):
        over = np.abs(y.astype(np.float64) - x.astype(np.float64)) > eps
        if not over.any():
            break
        y[over] = np.nextafter(y[over], x[over])
    return y


@dataclass(eq=False)
class PoisonedDataset:
    base: LabeledDataset
    plan: PoisonPlan
    images: np.ndarray
    perturbations: np.ndarray
    audit: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels

    @property
    def dataset(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.base.labels, self.base.class_names, self.base.role)

    def __len__(self) -> int:
        return len(self.base)

    def save(self, root: str | Path, base_ref: str | None = None) -> dict:
        """Store only what differs from the base: poisoned rows, their deltas and the plan."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        idx = np.asarray(self.plan.indices, dtype=np.int64)
        rows_path = root / "poisoned_rows.npz"
        save_npz(rows_path, indices=idx, rows=self.images[idx], deltas=self.perturbations, audit=self.audit)
        manifest = {
            "format": "poisoned-archive/1",
            "base_ref": base_ref,
            "plan": self.plan.to_dict(),
            "provenance": self.provenance,
            "max_linf": float(self.audit.max()) if len(self.audit) else 0.0,
            "rows_sha256": sha256_file(rows_path),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, root: str | Path, base: LabeledDataset) -> "PoisonedDataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        rows_path = root / "poisoned_rows.npz"
        if sha256_file(rows_path) != manifest["rows_sha256"]:
            raise ValueError(f"{rows_path}: sha256 mismatch")
        with np.load(rows_path, allow_pickle=False) as z:
            idx, rows, deltas, audit = z["indices"], z["rows"], z["deltas"], z["audit"]
        images = np.array(base.images, copy=True)
        images[idx] = rows
        return cls(base, PoisonPlan.from_dict(manifest["plan"]), images, deltas, audit, manifest["provenance"])


def inject(dataset: LabeledDataset, plan: PoisonPlan, trigger: Trigger, scale: float = 2.0) -> PoisonedDataset:
    """x_i <- clip01(x_i + clip_linf(scale * delta_i, eps_poison)) for every planned index.

    Labels are never touched and rows outside the plan are copied unchanged.
    """
    idx = np.asarray(plan.indices, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError("plan index out of range")
    if trigger.shape != dataset.shape:
        raise ValueError(f"trigger shape {trigger.shape} does not match dataset {dataset.shape}")
    images = np.array(dataset.images, copy=True)
    if len(idx):
        clean = dataset.images[idx]
        deltas = np.asarray(trigger.residuals_for(clean), dtype=np.float64) * scale
        images[idx] = bounded_add(clean, deltas, plan.eps_poison)
    applied = images[idx].astype(np.float64) - dataset.images[idx].astype(np.float64)
    audit = np.abs(applied).reshape(len(idx), -1).max(axis=1) if len(idx) else np.zeros(0)
    if len(audit) and audit.max() > plan.eps_poison:
        raise AssertionError("perturbation budget exceeded")  # unreachable by construction of bounded_add
    return PoisonedDataset(
        base=dataset,
        plan=plan,
        images=images,
        perturbations=applied.astype(np.float32),
        audit=audit,
        provenance={"trigger": trigger.provenance, "mode": trigger.mode, "scale": scale},
    )


def apply_test_trigger(x: np.ndarray, trigger: Trigger, amplification: float = 2.0) -> np.ndarray:
    """clip01(x + amplification * delta). No budget clip: the attacker owns test inputs."""
    if amplification <= 0:
        raise ValueError("amplification must be positive")
    x = np.asarray(x, dtype=np.float32)
    residual = trigger.residuals_for(x)
    return np.clip(x + np.float32(amplification) * residual, 0.0, 1.0).astype(np.float32)


def poison_transform(trigger: Trigger, scale: float = 2.0, eps_poison: float = 16 / 255):
    """The training-time transform as a plain callable, for trigger-quality studies."""

    def apply(x: np.ndarray) -> np.ndarray:
        return bounded_add(x, np.asarray(trigger.residuals_for(x), dtype=np.float64) * scale, eps_poison)

    return apply
