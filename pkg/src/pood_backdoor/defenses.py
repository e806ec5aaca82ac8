"""Neural Cleanse, activation pruning, STRIP and Grad-CAM (SentiNet) against a trained victim."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import xlogy

from .models import Classifier, to_tensor

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


def resolve_layer(model: Classifier, layer: nn.Module | str | None) -> nn.Module:
    if layer is None:
        return model.net.feature_layer
    if isinstance(layer, str):
        modules = dict(model.net.named_modules())
        if layer not in modules:
            raise KeyError(f"no layer named {layer!r}")
        return modules[layer]
    return layer


@contextmanager
def capture(layer: nn.Module):
    """Record the layer's output (and its gradient, if one flows) during a forward pass."""
    store = {}

    def hook(_, __, out):
        store["act"] = out
        if out.requires_grad:
            out.register_hook(lambda g: store.__setitem__("grad", g))

    handle = layer.register_forward_hook(hook)
    try:
        yield store
    finally:
        handle.remove()


# ---------------------------------------------------------------------------
# Neural Cleanse


def anomaly_indices(l1_norms: Sequence[float]) -> np.ndarray:
    """|l1 - median| / (1.4826 * MAD) per class.

    When the MAD is zero (at least half the norms coincide) the mean absolute
    deviation stands in for it; identical norms give all zeros.
    """
    l1 = np.asarray(l1_norms, dtype=np.float64)
    dev = np.abs(l1 - np.median(l1))
    scale = MAD_CONSISTENCY * np.median(dev)
    if scale == 0:
        scale = dev.mean()
    if scale == 0:
        return np.zeros_like(l1)
    return dev / scale


@dataclass
class NeuralCleanseResult:
    masks: np.ndarray
    patterns: np.ndarray
    l1: np.ndarray
    anomaly: np.ndarray
    attack_success: np.ndarray
    failed: list[int] = field(default_factory=list)

    def flagged(self, threshold: float = ANOMALY_THRESHOLD) -> list[int]:
        """Classes with an unusually small trigger: index above threshold and l1 below the median."""
        med = np.median(self.l1)
        return [int(c) for c in np.flatnonzero((self.anomaly >= threshold) & (self.l1 < med))]


def reverse_engineer_trigger(
    model: Classifier,
    images: np.ndarray,
    target: int,
    steps: int = 300,
    lr: float = 0.1,
    init_cost: float = 1e-3,
    batch_size: int = 64,
    success_threshold: float = 0.99,
    patience: int = 10,
    cost_multiplier: float = 1.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, float, float, bool]:
    """Smallest mask/pattern sending ``images`` to ``target``.

    Minimises CE((1 - m) x + m p, target) + cost * |m|_1 with an adaptive cost:
    raised after ``patience`` successful steps, lowered after as many failures.
    Returns (mask HxW, pattern HxWxC, best l1, success rate at best, diverged).
    """
    gen = torch.Generator().manual_seed(seed)
    h, w, c = model.input_shape
    mask_raw = torch.zeros(1, 1, h, w).uniform_(-0.5, 0.5, generator=gen).requires_grad_(True)
    pattern_raw = torch.zeros(1, c, h, w).uniform_(-0.5, 0.5, generator=gen).requires_grad_(True)
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))
    x_all = to_tensor(images)
    n = len(x_all)
    net = model.net
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)

    cost = init_cost
    up = down = 0
    best = (None, None, float("inf"), 0.0)
    diverged = False
    try:
        for step in range(steps):
            idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
            mask = (torch.tanh(mask_raw) + 1) / 2
            pattern = (torch.tanh(pattern_raw) + 1) / 2
            x = (1 - mask) * x_all[idx] + mask * pattern
            logits = net(x)
            y = torch.full((len(idx),), target, dtype=torch.long)
            ce = F.cross_entropy(logits, y)
            l1 = mask.sum()
            loss = ce + cost * l1
            if not torch.isfinite(loss):
                diverged = True
                logger.warning("neural cleanse diverged for class %d at step %d", target, step)
                break
            opt.zero_grad()
            loss.backward()
            opt.step()

            success = float((logits.argmax(1) == target).float().mean())
            if success >= success_threshold and l1.item() < best[2]:
                best = (mask.detach()[0, 0].numpy().copy(), pattern.detach()[0].permute(1, 2, 0).numpy().copy(), l1.item(), success)
            if success >= success_threshold:
                up, down = up + 1, 0
            else:
                up, down = 0, down + 1
            if up >= patience:
                cost, up = cost * cost_multiplier, 0
            elif down >= patience:
                cost, down = cost / cost_multiplier**1.5, 0
    finally:
        for p in net.parameters():
            p.requires_grad_(True)

    if best[0] is None:
        mask = ((torch.tanh(mask_raw) + 1) / 2).detach()[0, 0].numpy()
        pattern = ((torch.tanh(pattern_raw) + 1) / 2).detach()[0].permute(1, 2, 0).numpy()
        l1 = float(mask.sum())
        return mask, pattern, l1 if np.isfinite(l1) else float(h * w), 0.0, True
    return best[0], best[1], best[2], best[3], diverged


def neural_cleanse(
    victim: Classifier,
    sample_images: np.ndarray,
    steps: int = 300,
    lr: float = 0.1,
    init_cost: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> NeuralCleanseResult:
    """Reverse-engineer a trigger per class and score the l1 norms with the MAD outlier test."""
    masks, patterns, l1s, succ, failed = [], [], [], [], []
    for c in range(victim.num_classes):
        m, p, l1, s, bad = reverse_engineer_trigger(
            victim, sample_images, c, steps, lr, init_cost, batch_size, seed=seed + c
        )
        masks.append(m)
        patterns.append(p)
        l1s.append(l1)
        succ.append(s)
        if bad:
            failed.append(c)
        logger.info("neural cleanse class %d: l1=%.2f success=%.3f", c, l1, s)
    l1 = np.asarray(l1s)
    return NeuralCleanseResult(np.stack(masks), np.stack(patterns), l1, anomaly_indices(l1), np.asarray(succ), failed)


# ---------------------------------------------------------------------------
# pruning


@torch.no_grad()
def channel_activation(model: Classifier, images: np.ndarray, layer=None, batch_size: int = 256) -> np.ndarray:
    layer = resolve_layer(model, layer)
    model.net.eval()
    total, count = None, 0
    with capture(layer) as store:
        for i in range(0, len(images), batch_size):
            model.net(to_tensor(images[i:i + batch_size]))
            act = store["act"]
            if act.ndim != 4:
                raise ValueError("pruning layer must produce (N, C, H, W) activations")
            s = act.sum(dim=(0, 2, 3)).double()
            total = s if total is None else total + s
            count += act.shape[0] * act.shape[2] * act.shape[3]
    return (total / count).numpy()


@contextmanager
def pruned(model: Classifier, channels: Sequence[int], layer=None):
    """Zero the given output channels of ``layer`` for the duration of the block."""
    if len(channels) == 0:
        yield model
        return
    layer = resolve_layer(model, layer)
    keep = None

    def hook(_, __, out):
        nonlocal keep
        if keep is None:
            keep = torch.ones(out.shape[1], dtype=out.dtype)
            keep[list(channels)] = 0
        return out * keep.view(1, -1, 1, 1)

    handle = layer.register_forward_hook(hook)
    try:
        yield model
    finally:
        handle.remove()


def prune_defense(
    victim: Classifier,
    clean_subset: np.ndarray,
    rates: Sequence[float],
    evaluate,
    layer=None,
) -> list[dict]:
    """Prune the least-active channels of the last conv block at each rate and re-evaluate.

    ``evaluate(model)`` returns a mapping with at least ``acc`` and ``asr``;
    the returned curve keeps one record per rate in the order given.
    """
    if len(clean_subset) == 0:
        raise ValueError("empty clean subset")
    for r in rates:
        if not 0 <= r < 1:
            raise ValueError(f"prune rate {r} outside [0, 1)")
    mean_act = channel_activation(victim, clean_subset, layer)
    order = np.argsort(mean_act, kind="stable")
    curve = []
    for r in rates:
        k = int(np.floor(r * len(order)))
        with pruned(victim, order[:k].tolist(), layer):
            result = dict(evaluate(victim))
        curve.append({"rate": float(r), "n_pruned": k, **result})
        logger.info("prune rate %.2f: %s", r, result)
    return curve


# ---------------------------------------------------------------------------
# STRIP


def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) along the last axis; 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    return -xlogy(p, p).sum(axis=-1)


def strip_defense(
    victim: Classifier,
    probe_inputs: np.ndarray,
    overlay_pool: np.ndarray,
    n_perturbations: int = 64,
    alpha: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Mean prediction entropy of each probe superimposed with ``n_perturbations`` random clean overlays.

    Superimposition is the saturating add ``clip01(x + alpha * overlay)``, as with
    8-bit images, so a bright patch trigger survives the overlay intact.
    """
    if n_perturbations < 1:
        raise ValueError("n_perturbations must be at least 1")
    if len(overlay_pool) == 0:
        raise ValueError("empty overlay pool")
    rng = np.random.default_rng(seed)
    out = np.empty(len(probe_inputs))
    for i, x in enumerate(probe_inputs):
        overlays = overlay_pool[rng.integers(0, len(overlay_pool), n_perturbations)]
        blended = np.clip(x[None] + alpha * overlays, 0.0, 1.0).astype(np.float32)
        out[i] = prediction_entropy(victim.probabilities(blended)).mean()
    return out


# ---------------------------------------------------------------------------
# Grad-CAM / SentiNet


def grad_cam(victim: Classifier, image: np.ndarray, layer=None, class_idx: int | None = None) -> np.ndarray:
    """Rectified, gradient-weighted feature map, upsampled to the input and min-max scaled to [0, 1]."""
    layer = resolve_layer(victim, layer)
    net = victim.net
    net.eval()
    x = to_tensor(np.asarray(image, dtype=np.float32)[None])
    with capture(layer) as store:
        with torch.enable_grad():
            x.requires_grad_(True)
            logits = net(x)
            act = store["act"]
            if act.ndim != 4:
                raise ValueError("Grad-CAM needs a spatial (N, C, H, W) layer")
            c = int(logits.argmax(1)) if class_idx is None else class_idx
            net.zero_grad()
            logits[0, c].backward()
    weights = store["grad"].mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act.detach()).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0].double().numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1.0):
        return np.full_like(cam, 1.0 if hi > 0 else 0.0)
    return (cam - lo) / (hi - lo)


sentinet_heatmap = grad_cam


def mass_in_region(heatmap: np.ndarray, region: tuple[slice, slice]) -> tuple[float, float]:
    """Mean heatmap value inside and outside ``region``."""
    inside = np.zeros(heatmap.shape, dtype=bool)
    inside[region] = True
    return float(heatmap[inside].mean()), float(heatmap[~inside].mean())


# ---------------------------------------------------------------------------
# report


@dataclass
class DefenseReport:
    neural_cleanse: NeuralCleanseResult | None = None
    pruning: list[dict] = field(default_factory=list)
    strip: dict[str, np.ndarray] = field(default_factory=dict)
    sentinet: dict[str, np.ndarray] = field(default_factory=dict)

    def to_record(self) -> dict:
        nc = self.neural_cleanse
        return {
            "neural_cleanse": None
            if nc is None
            else {
                "l1": nc.l1.tolist(),
                "anomaly_index": nc.anomaly.tolist(),
                "attack_success": nc.attack_success.tolist(),
                "flagged": nc.flagged(),
                "failed": nc.failed,
            },
            "pruning": self.pruning,
            "strip": {k: {"mean": float(np.mean(v)), "entropies": np.asarray(v).tolist()} for k, v in self.strip.items()},
            "sentinet": {k: {"shape": list(np.shape(v))} for k, v in self.sentinet.items()},
        }
