"""Dataset containers, ingestion, POOD binarization and archive persistence.

Images are held as float32 arrays of shape (N, H, W, C) with values in [0, 1].
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

ROLES = ("victim_train", "victim_test", "pood")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff", ".webp"}
AUGMENT_TOKENS = ("crop", "hflip")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    role: str

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        n_classes = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        object.__setattr__(self, "images", _readonly(images))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"class {name!r} not in {list(self.class_names)}") from None

    def subset(self, indices: Sequence[int] | np.ndarray, role: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names, role or self.role)

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(images, self.labels, self.class_names, self.role)


@dataclass(frozen=True, eq=False)
class BinaryPOODDataset:
    """POOD images relabeled 1 for the target class and 0 for everything else.

    ``source_indices`` maps each row back into the POOD dataset it came from.
    """

    images: np.ndarray
    labels: np.ndarray
    source_target_class: str
    counts: tuple[int, int]
    source_indices: np.ndarray
    balance_policy: str = "none"

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("binary labels must be 0 or 1")
        n_target = int((labels == 1).sum())
        if n_target < 1:
            raise ValueError("binary POOD dataset needs at least one target sample")
        if (n_target, int((labels == 0).sum())) != tuple(self.counts):
            raise ValueError("counts do not match labels")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "images", _readonly(np.asarray(self.images, dtype=np.float32)))
        object.__setattr__(self, "source_indices", _readonly(np.asarray(self.source_indices, dtype=np.int64)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def target_images(self) -> np.ndarray:
        """The px* pool: every image labeled target."""
        return self.images[self.labels == 1]


@dataclass
class DatasetConfig:
    name: str
    source: str
    shape: tuple[int, int, int]
    target_class: int | str
    pood_source: str | None = None
    pood_target_name: str | None = None
    resize: str | None = "bilinear"
    augmentation: list[str] = field(default_factory=lambda: ["crop", "hflip"])
    crop_padding: int = 4
    seed: int = 0


@dataclass(frozen=True)
class DisjointReport:
    overlap: frozenset[str]
    fuzzy_pairs: frozenset[frozenset[str]]

    @property
    def disjoint(self) -> bool:
        return not self.overlap


# ---------------------------------------------------------------------------
# resizing / decoding


def resize_images(images: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Bilinear resize of an (N, H, W, C) batch to ``shape`` = (H', W'[, C])."""
    import torch
    import torch.nn.functional as F

    h, w = int(shape[0]), int(shape[1])
    if images.shape[1:3] == (h, w):
        return np.asarray(images, dtype=np.float32)
    t = torch.from_numpy(np.array(images, dtype=np.float32)).permute(0, 3, 1, 2)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out.permute(0, 2, 3, 1).clamp(0.0, 1.0).contiguous().numpy()


def _decode(path: Path, shape: Sequence[int], resize: str | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if shape[2] == 3 else "L")
            if im.size != (shape[1], shape[0]):
                if resize is None:
                    raise ValueError(
                        f"{path}: image is {im.size[1]}x{im.size[0]}, expected "
                        f"{shape[0]}x{shape[1]} and no resize policy is set"
                    )
                if resize != "bilinear":
                    raise ValueError(f"unknown resize policy {resize!r}")
                im = im.resize((shape[1], shape[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_image_folder(
    root: str | Path, shape: Sequence[int], role: str, resize: str | None = "bilinear"
) -> LabeledDataset:
    """Read ``root/<class_name>/<image>`` into a dataset. Classes and files are sorted."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset path {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                images.append(_decode(f, shape, resize))
                labels.append(label)
    if not images:
        raise ValueError(f"{root}: no samples")
    return LabeledDataset(np.stack(images), np.array(labels), [p.name for p in class_dirs], role)


def write_image_folder(dataset: LabeledDataset, root: str | Path) -> Path:
    """Write a dataset as PNGs under ``root/<class_name>/``. Lossless for 8-bit data."""
    root = Path(root)
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    u8 = np.round(dataset.images * 255.0).astype(np.uint8)
    for i, (img, y) in enumerate(zip(u8, dataset.labels)):
        img = img[..., 0] if img.shape[-1] == 1 else img
        Image.fromarray(img).save(root / dataset.class_names[y] / f"{i:06d}.png")
    return root


def _load_torchvision(name: str, root: Path, role: str) -> LabeledDataset:
    import torchvision

    cls = getattr(torchvision.datasets, name)
    ds = cls(root=str(root), train=(role == "victim_train"), download=False)
    data = np.asarray(ds.data)
    if data.ndim == 3:
        data = data[..., None]
    return LabeledDataset(data.astype(np.float32) / 255.0, np.asarray(ds.targets), list(ds.classes), role)


def load_dataset(config: DatasetConfig, role: str) -> LabeledDataset:
    """Load the split named by ``role`` and bring it to ``config.shape``.

    ``config.source`` (victim roles) and ``config.pood_source`` (POOD role) may be
    a folder of class subfolders (victim folders hold ``train/`` and ``test/``),
    an archive written by :func:`save_archive`, ``torchvision:<Name>@<root>``, or
    ``synthetic:<domain>`` for the procedurally generated desk-scale worlds.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    source = config.pood_source if role == "pood" else config.source
    if source is None:
        raise ValueError(f"no source configured for role {role}")
    shape = tuple(config.shape)

    if source.startswith("synthetic:"):
        from . import synthetic

        ds = synthetic.load(source, role, seed=config.seed)
    elif source.startswith("torchvision:"):
        name, _, root = source[len("torchvision:"):].partition("@")
        ds = _load_torchvision(name, Path(root or "."), role)
    else:
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"dataset path {path} does not exist")
        if (path / "manifest.json").exists():
            split = "pood" if role == "pood" else role.removeprefix("victim_")
            ds = load_archive(path)[split]
            ds = LabeledDataset(ds.images, ds.labels, ds.class_names, role)
        else:
            if role != "pood":
                sub = path / role.removeprefix("victim_")
                path = sub if sub.is_dir() else path
            return load_image_folder(path, shape, role, config.resize)

    if ds.shape[:2] != shape[:2]:
        if config.resize is None:
            raise ValueError(f"{source}: shape {ds.shape} != {shape} and no resize policy is set")
        ds = LabeledDataset(resize_images(ds.images, shape), ds.labels, ds.class_names, role)
    if ds.shape[2] != shape[2]:
        raise ValueError(f"{source}: {ds.shape[2]} channels, expected {shape[2]}")
    if len(ds) == 0:
        raise ValueError(f"{source}: no samples")
    return ds


# ---------------------------------------------------------------------------
# POOD handling


def nearest_class_name(name: str, candidates: Iterable[str]) -> str:
    """Exact match if present, else the candidate containing ``name`` as a word, else closest by ratio."""
    candidates = list(candidates)
    if name in candidates:
        return name
    key = name.lower()
    contains = [c for c in candidates if key in c.lower().replace("_", " ").split()]
    if contains:
        return min(contains, key=len)
    best = difflib.get_close_matches(name, candidates, n=1, cutoff=0.0)
    if not best:
        raise KeyError(f"no POOD class resembles {name!r}")
    return best[0]


def binarize_pood(
    pood: LabeledDataset,
    target_class_name: str,
    balance_policy: str = "downsample",
    ratio: float = 1.0,
    seed: int = 0,
) -> BinaryPOODDataset:
    """Relabel POOD samples as target (1) versus everything else (0).

    With ``balance_policy="downsample"`` the non-target pool is reduced to
    ``round(ratio * n_target)`` samples by seeded sampling; row order follows
    the source order either way.
    """
    if target_class_name not in pood.class_names:
        raise KeyError(f"target class {target_class_name!r} not in POOD classes {list(pood.class_names)}")
    if balance_policy not in ("none", "downsample"):
        raise ValueError(f"unknown balance policy {balance_policy!r}")
    t = pood.class_index(target_class_name)
    is_target = pood.labels == t
    n_target = int(is_target.sum())
    if n_target == 0:
        raise ValueError(f"POOD has no samples of target class {target_class_name!r}")

    keep = np.arange(len(pood))
    if balance_policy == "downsample":
        others = np.flatnonzero(~is_target)
        k = min(len(others), int(np.floor(ratio * n_target + 0.5)))
        rng = np.random.default_rng(seed)
        chosen = rng.choice(others, size=k, replace=False)
        keep = np.sort(np.concatenate([np.flatnonzero(is_target), chosen]))
    labels = is_target[keep].astype(np.int64)
    return BinaryPOODDataset(
        images=pood.images[keep],
        labels=labels,
        source_target_class=target_class_name,
        counts=(int(labels.sum()), int((labels == 0).sum())),
        source_indices=keep,
        balance_policy=balance_policy,
    )


def _fuzzy(a: str, b: str) -> bool:
    ta, tb = set(a.lower().replace("_", " ").split()), set(b.lower().replace("_", " ").split())
    return bool(ta & tb) or difflib.SequenceMatcher(None, a.lower(), b.lower()).ratio() >= 0.8


def check_disjoint(victim: LabeledDataset, pood: LabeledDataset) -> DisjointReport:
    """Exact-string class overlap, plus a warning for near-miss names like frog / tree frog."""
    a, b = set(victim.class_names), set(pood.class_names)
    overlap = frozenset(a & b)
    fuzzy = frozenset(
        frozenset((x, y)) for x in a - overlap for y in b - overlap if _fuzzy(x, y)
    )
    if fuzzy:
        pairs = ", ".join(" ~ ".join(sorted(p)) for p in sorted(fuzzy, key=sorted))
        warnings.warn(f"class names are disjoint but similar: {pairs}", stacklevel=2)
    return DisjointReport(overlap, fuzzy)


# ---------------------------------------------------------------------------
# augmentation


def parse_policy(policy: Sequence[str]) -> list[tuple[str, int]]:
    parsed = []
    for token in policy:
        name, _, arg = token.partition(":")
        if name not in AUGMENT_TOKENS:
            raise ValueError(f"unknown augmentation token {token!r}")
        parsed.append((name, int(arg) if arg else 4))
    return parsed


def augment(batch: np.ndarray, policy: Sequence[str], rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Random crop with zero padding (``crop`` or ``crop:<pad>``) and horizontal flip (``hflip``)."""
    steps = parse_policy(policy)
    rng = np.random.default_rng(rng)
    out = np.array(batch, dtype=np.float32, copy=True)
    n, h, w, _ = out.shape
    for name, pad in steps:
        if name == "crop":
            padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            dy = rng.integers(0, 2 * pad + 1, size=n)
            dx = rng.integers(0, 2 * pad + 1, size=n)
            out = np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
        else:
            flip = rng.random(n) < 0.5
            out[flip] = out[flip, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# archives


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_npz(path: str | Path, **arrays: np.ndarray) -> Path:
    """Like ``np.savez`` but byte-reproducible: fixed member timestamps, sorted members."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(arrays[name]), allow_pickle=False)
    return path


def save_archive(
    splits: dict[str, LabeledDataset], root: str | Path, seed: int | None = None, provenance: dict | None = None
) -> dict:
    """Write each split as ``<split>.images.npy`` / ``<split>.labels.npy`` plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "labeled-archive/1", "seed": seed, "provenance": provenance or {}, "splits": {}}
    for split, ds in splits.items():
        files = {}
        for part, arr in (("images", ds.images), ("labels", ds.labels)):
            p = root / f"{split}.{part}.npy"
            np.save(p, np.ascontiguousarray(arr), allow_pickle=False)
            files[part] = {"file": p.name, "sha256": sha256_file(p)}
        manifest["splits"][split] = {
            "role": ds.role,
            "class_names": list(ds.class_names),
            "n": len(ds),
            "shape": list(ds.shape),
            "files": files,
        }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_archive(root: str | Path, verify: bool = True) -> dict[str, LabeledDataset]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = {}
    for split, meta in manifest["splits"].items():
        arrays = {}
        for part, info in meta["files"].items():
            p = root / info["file"]
            if verify and sha256_file(p) != info["sha256"]:
                raise ValueError(f"{p}: sha256 mismatch, archive is corrupt or was modified")
            arrays[part] = np.load(p, allow_pickle=False)
        out[split] = LabeledDataset(arrays["images"], arrays["labels"], meta["class_names"], meta["role"])
    return out
