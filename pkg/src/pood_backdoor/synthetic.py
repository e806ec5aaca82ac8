"""Procedural shape worlds for desk-scale runs.

All domains share one renderer but differ in class vocabulary and style:

* ``victim`` - the victim's task (five solid shapes on smooth colour fields),
* ``pood`` - a disjoint public set whose ``thin cross`` class is the nearest
  relative of the victim's ``cross``,
* ``foreign`` - public shapes with no relative among the victim classes, used
  for cross-domain triggers,
* ``textures`` - periodic patterns, a second foreign set.

Sources are addressed as ``synthetic:<domain>[?key=value&...]`` with keys
``size``, ``n_train``, ``n_test``, ``n_per_class`` and ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass
from urllib.parse import parse_qsl

import numpy as np

from .data import LabeledDataset


@dataclass(frozen=True)
class DomainStyle:
    classes: tuple[str, ...]
    contrast: tuple[float, float]
    thickness: float
    background: str
    noise: float
    scale: tuple[float, float]
    texture: float = 0.0


DOMAINS = {
    "victim": DomainStyle(
        classes=("circle", "cross", "diamond", "square", "triangle"),
        contrast=(0.10, 0.22),
        thickness=0.30,
        background="smooth",
        noise=0.03,
        scale=(0.45, 0.70),
    ),
    "pood": DomainStyle(
        classes=("bar", "chevron", "hexagon", "ring", "thin cross"),
        contrast=(0.10, 0.25),
        thickness=0.20,
        background="flat",
        noise=0.02,
        scale=(0.45, 0.75),
    ),
    "foreign": DomainStyle(
        classes=("crescent", "ellipse", "star", "trapezoid"),
        contrast=(0.10, 0.25),
        thickness=0.20,
        background="flat",
        noise=0.02,
        scale=(0.45, 0.75),
    ),
    "textures": DomainStyle(
        classes=("checker", "dots", "stripes", "waves"),
        contrast=(0.10, 0.25),
        thickness=0.20,
        background="flat",
        noise=0.02,
        scale=(0.50, 0.80),
    ),
}

DEFAULT_TARGETS = {"victim": "cross", "pood": "thin cross", "foreign": "crescent", "textures": "stripes"}


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, thickness: float, rng) -> np.ndarray:
    """Soft coverage in [0, 1] for a unit-scale shape on local coords (u, v)."""
    au, av = np.abs(u), np.abs(v)
    t = thickness
    if kind == "circle":
        d = np.hypot(u, v) - 0.8
    elif kind == "ring":
        d = np.abs(np.hypot(u, v) - 0.7) - t * 0.6
    elif kind == "square":
        d = np.maximum(au, av) - 0.7
    elif kind == "diamond":
        d = (au + av) - 0.95
    elif kind == "triangle":
        d = np.maximum(np.maximum(-v - 0.6, 0.866 * u + 0.5 * v - 0.45), -0.866 * u + 0.5 * v - 0.45)
    elif kind in ("cross", "thin cross"):
        arm = np.minimum(np.maximum(au - t, av - 0.95), np.maximum(av - t, au - 0.95))
        d = arm
    elif kind == "hexagon":
        d = np.maximum(au * 0.866 + av * 0.5, av) - 0.75
    elif kind == "bar":
        d = np.maximum(au - 0.95, av - t)
    elif kind == "chevron":
        d = np.maximum(np.abs(v - 0.8 * au + 0.3) - t, au - 0.9)
    elif kind == "crescent":
        d = np.maximum(np.hypot(u, v) - 0.85, 0.6 - np.hypot(u - 0.45, v))
    elif kind == "ellipse":
        d = np.hypot(u, v * 2.0) - 0.85
    elif kind == "star":
        r, th = np.hypot(u, v), np.arctan2(v, u)
        d = r - (0.55 + 0.35 * np.cos(5 * th))
    elif kind == "trapezoid":
        d = np.maximum(np.abs(v) - 0.55, np.abs(u) - (0.55 + 0.4 * (v + 0.55) / 1.1))
    elif kind == "checker":
        return (np.sign(np.sin(u * 5.0) * np.sin(v * 5.0)) * 0.5 + 0.5) * (np.maximum(au, av) < 1.0)
    elif kind == "dots":
        d = np.hypot(np.mod(u * 2.5, 1.0) - 0.5, np.mod(v * 2.5, 1.0) - 0.5) - 0.22
        d = np.maximum(d, np.maximum(au, av) - 1.0)
    elif kind == "stripes":
        return (np.sin(u * 7.0) > 0) * (np.maximum(au, av) < 1.0) * 1.0
    elif kind == "waves":
        return (np.sin(v * 6.0 + 1.5 * np.sin(u * 3.0)) > 0) * (np.maximum(au, av) < 1.0) * 1.0
    else:
        raise KeyError(kind)
    return np.clip(0.5 - d * 6.0, 0.0, 1.0)


def _background(style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.3, 0.7, size=3)
    if style == "flat":
        g = rng.normal(0, 0.08, size=(2, 3))
        img = base + xx[..., None] * g[0] + yy[..., None] * g[1]
    else:
        img = np.broadcast_to(base, (size, size, 3)).copy()
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 2.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.normal(0, 0.07, size=3)
            img += np.cos(2 * np.pi * (fx * xx + fy * yy) + ph)[..., None] * amp
    return img


def _band_noise(size: int, rng: np.random.Generator) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    white = rng.normal(size=(size, size, 3))
    band = gaussian_filter(white, (0.7, 0.7, 0)) - gaussian_filter(white, (2.5, 2.5, 0))
    return band / (band.std() + 1e-12)


def render(kind: str, style: DomainStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    img = _background(style.background, size, rng)
    scale = rng.uniform(*style.scale) * size / 2
    cy, cx = rng.uniform(size / 2 - size * 0.12, size / 2 + size * 0.12, size=2)
    angle = rng.uniform(-0.3, 0.3)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = (yy - cy) / scale, (xx - cx) / scale
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    if style.texture:
        img += _band_noise(size, rng) * style.texture
    mask = _shape_mask(kind, u, v, style.thickness, rng)[..., None]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    sign = 1.0 if img.mean() < 0.5 else -1.0
    fg = img.mean(axis=(0, 1)) + sign * rng.uniform(*style.contrast) * (0.6 + 0.4 * np.abs(direction))
    img = img * (1 - mask) + fg * mask
    img += rng.normal(0, style.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_domain(
    domain: str, n_per_class: int, size: int = 32, seed: int = 0, role: str = "pood"
) -> LabeledDataset:
    style = DOMAINS[domain]
    rng = np.random.default_rng([seed, sum(map(ord, domain)), sum(map(ord, role))])
    images, labels = [], []
    for label, kind in enumerate(style.classes):
        for _ in range(n_per_class):
            images.append(render(kind, style, size, rng))
            labels.append(label)
    images = np.stack(images)
    labels = np.asarray(labels)
    order = rng.permutation(len(labels))
    return LabeledDataset(images[order], labels[order], style.classes, role)


def load(source: str, role: str, seed: int = 0) -> LabeledDataset:
    """Resolve a ``synthetic:`` source string for ``role``."""
    spec = source[len("synthetic:"):]
    domain, _, query = spec.partition("?")
    if domain not in DOMAINS:
        raise ValueError(f"unknown synthetic domain {domain!r}, expected one of {sorted(DOMAINS)}")
    opts = {k: int(v) for k, v in parse_qsl(query)}
    size = opts.get("size", 32)
    seed = opts.get("seed", seed)
    if role == "victim_train":
        n = opts.get("n_train", 500)
    elif role == "victim_test":
        n = opts.get("n_test", 200)
    else:
        n = opts.get("n_per_class", 300)
    return make_domain(domain, n, size=size, seed=seed, role=role)
