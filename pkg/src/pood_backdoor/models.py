"""Network architectures, model wrappers and the training loops.

Classifiers (decoder, victim) and the residual encoder all take NHWC float
arrays in [0, 1] at the API boundary and work NCHW internally.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BinaryPOODDataset, LabeledDataset, augment

logger = logging.getLogger(__name__)

CLASSIFIER_ARCHS = ("small-cnn", "tiny-cnn", "resnet18", "resnet34", "vgg16", "vgg19")
ENCODER_ARCHS = ("unet",)


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# architectures


def _conv_bn(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SmallCNN(nn.Module):
    def __init__(self, in_ch: int, num_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            _conv_bn(in_ch, w),
            _conv_bn(w, w),
            nn.MaxPool2d(2),
            _conv_bn(w, 2 * w),
            nn.MaxPool2d(2),
            _conv_bn(2 * w, 4 * w),
        )
        self.fc = nn.Linear(4 * w, num_classes)

    @property
    def feature_layer(self) -> nn.Module:
        return self.features[-1]

    def forward(self, x):
        x = self.features(x)
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


class TinyCNN(nn.Module):
    """Under 1e3 parameters and smooth everywhere; used for gradient checks."""

    def __init__(self, in_ch: int, num_classes: int, width: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, width, 3, padding=1)
        self.act = nn.Tanh()
        self.fc = nn.Linear(width, num_classes)

    @property
    def feature_layer(self) -> nn.Module:
        return self.act

    def forward(self, x):
        return self.fc(self.act(self.conv(x)).mean(dim=(2, 3)))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        self.act = nn.ReLU()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class ResNet(nn.Module):
    """CIFAR-style ResNet: 3x3 stem, no stem pooling."""

    def __init__(self, blocks: Sequence[int], in_ch: int, num_classes: int, width: int = 64):
        super().__init__()
        self.stem = _conv_bn(in_ch, width)
        layers, cin = [], width
        for i, n in enumerate(blocks):
            cout = width * 2**i
            for j in range(n):
                layers.append(BasicBlock(cin, cout, 2 if (i > 0 and j == 0) else 1))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_classes)

    @property
    def feature_layer(self) -> nn.Module:
        return self.layers[-1].act

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


class _MaybePool(nn.Module):
    # VGG's five poolings would collapse small inputs to zero size
    def forward(self, x):
        return F.max_pool2d(x, 2) if min(x.shape[-2:]) >= 2 else x


VGG_CFG = {
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}


class VGG(nn.Module):
    def __init__(self, cfg: Sequence, in_ch: int, num_classes: int, width: int = 64):
        super().__init__()
        layers, cin = [], in_ch
        for v in cfg:
            if v == "M":
                layers.append(_MaybePool())
            else:
                cout = max(1, v * width // 64)
                layers.append(_conv_bn(cin, cout))
                cin = cout
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_classes)
        self._last_conv = [m for m in layers if isinstance(m, nn.Sequential)][-1]

    @property
    def feature_layer(self) -> nn.Module:
        return self._last_conv

    def forward(self, x):
        x = self.features(x)
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


class UNet(nn.Module):
    """Two-level U-Net whose output is ``eps * tanh(.)``, so |out| <= eps for any input."""

    def __init__(self, in_ch: int, eps: float, width: int = 16):
        super().__init__()
        w = width

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            )

        self.enc1 = block(in_ch, w)
        self.enc2 = block(w, 2 * w)
        self.mid = block(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = block(2 * w, w)
        self.out = nn.Conv2d(w, in_ch, 1)
        self.register_buffer("eps", torch.tensor(float(eps)))

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], 1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], 1))
        return self.eps * torch.tanh(self.out(d1))


def build_classifier(arch: str, input_shape: Sequence[int], num_classes: int, width: int | None = None) -> nn.Module:
    c = input_shape[2]
    if arch == "small-cnn":
        return SmallCNN(c, num_classes, width or 32)
    if arch == "tiny-cnn":
        return TinyCNN(c, num_classes, width or 4)
    if arch in ("resnet18", "resnet34"):
        blocks = (2, 2, 2, 2) if arch == "resnet18" else (3, 4, 6, 3)
        return ResNet(blocks, c, num_classes, width or 64)
    if arch in VGG_CFG:
        return VGG(VGG_CFG[arch], c, num_classes, width or 64)
    raise ValueError(f"unknown classifier architecture {arch!r}, expected one of {CLASSIFIER_ARCHS}")


# ---------------------------------------------------------------------------
# tensors


def to_tensor(images: np.ndarray, device="cpu") -> torch.Tensor:
    arr = np.ascontiguousarray(images, dtype=np.float32)
    if not arr.flags.writeable:
        arr = arr.copy()  # datasets are read-only; torch wants writable memory
    # a permuted NHWC view is ambiguously strided for N=1 and the conv kernels
    # pick different paths for it; plain NCHW keeps outputs layout independent
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().contiguous().numpy()


def batched(fn, images: np.ndarray, batch_size: int = 256, device="cpu") -> torch.Tensor:
    outs = [fn(to_tensor(images[i:i + batch_size], device)) for i in range(0, len(images), batch_size)]
    if not outs:
        raise ValueError("empty input")
    return torch.cat(outs)


# ---------------------------------------------------------------------------
# wrappers


@dataclass
class TrainHyper:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    augmentation: list[str] = field(default_factory=list)
    val_fraction: float = 0.0
    seed: int = 0
    log_path: str | None = None


@dataclass(eq=False)
class Classifier:
    net: nn.Module
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    width: int | None = None
    seed: int = 0
    config_hash: str | None = None
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    device: str = "cpu"

    kind = "classifier"

    @classmethod
    def build(cls, arch: str, input_shape: Sequence[int], num_classes: int, width: int | None = None, seed: int = 0):
        torch.manual_seed(seed)
        net = build_classifier(arch, input_shape, num_classes, width)
        return cls(net=net, arch=arch, input_shape=tuple(input_shape), num_classes=num_classes, width=width, seed=seed)

    def _check(self, images: np.ndarray):
        if tuple(images.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"expected images of shape {self.input_shape}, got {tuple(images.shape[1:])}")

    @torch.no_grad()
    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        self._check(images)
        self.net.eval()
        return batched(self.net, images, batch_size, self.device).cpu().numpy()

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(1)

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        z = torch.from_numpy(self.logits(images)).double()
        return torch.softmax(z, 1).numpy()

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(images) == labels).mean()) if len(labels) else float("nan")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": self.kind,
                "arch": self.arch,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "width": self.width,
                "seed": self.seed,
                "config_hash": self.config_hash,
                "metrics": self.metrics,
                "history": self.history,
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt["kind"] != cls.kind:
            raise ValueError(f"{path} holds a {ckpt['kind']} checkpoint, not {cls.kind}")
        model = cls.build(ckpt["arch"], ckpt["input_shape"], ckpt["num_classes"], ckpt["width"], ckpt["seed"])
        model.net.load_state_dict(ckpt["state_dict"])
        model.config_hash = ckpt["config_hash"]
        model.metrics = ckpt["metrics"]
        model.history = ckpt["history"]
        return model


class DecoderModel(Classifier):
    """Binary surrogate: logit 1 = POOD target class, logit 0 = everything else."""

    kind = "decoder"

    @classmethod
    def build(cls, arch, input_shape, num_classes=2, width=None, seed=0):
        if num_classes != 2:
            raise ValueError("a decoder has exactly two outputs")
        return super().build(arch, input_shape, 2, width, seed)


class VictimModel(Classifier):
    kind = "victim"


@dataclass(eq=False)
class EncoderModel:
    net: UNet
    input_shape: tuple[int, int, int]
    eps_gen: float
    arch: str = "unet"
    width: int = 16
    seed: int = 0
    config_hash: str | None = None
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    device: str = "cpu"

    kind = "encoder"

    @classmethod
    def build(cls, input_shape: Sequence[int], eps_gen: float = 8 / 255, width: int = 16, seed: int = 0, arch="unet"):
        if arch not in ENCODER_ARCHS:
            raise ValueError(f"unknown encoder architecture {arch!r}")
        if input_shape[0] % 4 or input_shape[1] % 4:
            raise ValueError("encoder input height and width must be multiples of 4")
        torch.manual_seed(seed)
        net = UNet(input_shape[2], eps_gen, width)
        return cls(net=net, input_shape=tuple(input_shape), eps_gen=float(eps_gen), width=width, seed=seed)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": self.kind,
                "arch": self.arch,
                "input_shape": list(self.input_shape),
                "eps_gen": self.eps_gen,
                "width": self.width,
                "seed": self.seed,
                "config_hash": self.config_hash,
                "metrics": self.metrics,
                "history": self.history,
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt["kind"] != cls.kind:
            raise ValueError(f"{path} holds a {ckpt['kind']} checkpoint, not an encoder")
        model = cls.build(ckpt["input_shape"], ckpt["eps_gen"], ckpt["width"], ckpt["seed"], ckpt["arch"])
        model.net.load_state_dict(ckpt["state_dict"])
        model.config_hash, model.metrics, model.history = ckpt["config_hash"], ckpt["metrics"], ckpt["history"]
        return model


@torch.no_grad()
def forward_encoder(model: EncoderModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Residuals for ``images``; same shape, every entry within [-eps_gen, eps_gen]."""
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"expected images of shape {model.input_shape}, got {tuple(images.shape[1:])}")
    model.net.eval()
    return to_numpy(batched(model.net, images, batch_size, model.device))


# ---------------------------------------------------------------------------
# training


def make_optimizer(params, hyper: TrainHyper):
    if hyper.optimizer == "sgd":
        return torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    if hyper.optimizer == "adam":
        return torch.optim.Adam(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")


def make_scheduler(opt, hyper: TrainHyper, steps_per_epoch: int):
    total = max(1, hyper.epochs * steps_per_epoch)
    if hyper.schedule == "cosine":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    if hyper.schedule == "step":
        milestones = [int(total * 0.5), int(total * 0.75)]
        return torch.optim.lr_scheduler.MultiStepLR(opt, milestones, 0.1)
    if hyper.schedule == "none":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    raise ValueError(f"unknown schedule {hyper.schedule!r}")


def write_log(records: list[dict], path: str | None):
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def fit_classifier(
    model: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    hyper: TrainHyper,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> Classifier:
    """Minibatch cross-entropy training, in place. Raises on non-finite loss."""
    model._check(images)
    n = len(labels)
    rng = np.random.default_rng(hyper.seed)
    torch.manual_seed(hyper.seed)
    steps = max(1, math.ceil(n / hyper.batch_size))
    opt = make_optimizer(model.net.parameters(), hyper)
    sched = make_scheduler(opt, hyper, steps)
    y_all = torch.from_numpy(np.array(labels, dtype=np.int64))

    for epoch in range(hyper.epochs):
        model.net.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for s in range(steps):
            idx = order[s * hyper.batch_size:(s + 1) * hyper.batch_size]
            xb = images[idx]
            if hyper.augmentation:
                xb = augment(xb, hyper.augmentation, rng)
            x = to_tensor(xb, model.device)
            y = y_all[idx].to(model.device)
            out = model.net(x)
            loss = F.cross_entropy(out, y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{model.kind} training diverged at epoch {epoch}, step {s}: loss={loss.item()}, lr={sched.get_last_lr()[0]}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total_loss += loss.item() * len(idx)
            correct += int((out.argmax(1) == y).sum())
        record = {"epoch": epoch, "loss": total_loss / n, "train_acc": correct / n, "lr": sched.get_last_lr()[0]}
        if val is not None:
            record["val_acc"] = model.accuracy(*val)
        model.history.append(record)
        logger.info("%s epoch %d: %s", model.kind, epoch, record)

    model.metrics["train_acc"] = model.accuracy(images, labels)
    if val is not None:
        model.metrics["val_acc"] = model.accuracy(*val)
    write_log(model.history, hyper.log_path)
    return model


def train_decoder(data: BinaryPOODDataset, model: DecoderModel, hyper: TrainHyper) -> DecoderModel:
    """Fit the binary surrogate on (px, py_true); holds out ``hyper.val_fraction`` (default 10%)."""
    if len(data) == 0:
        raise ValueError("empty binary POOD dataset")
    if len(np.unique(data.labels)) < 2:
        raise ValueError("decoder training needs both target and non-target samples")
    frac = hyper.val_fraction if hyper.val_fraction > 0 else 0.1
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(len(data))
    n_val = max(1, int(round(frac * len(data))))
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    val = (data.images[val_idx], data.labels[val_idx])
    return fit_classifier(model, data.images[tr_idx], data.labels[tr_idx], hyper, val)


def train_victim(data, model: VictimModel, hyper: TrainHyper, test: LabeledDataset | None = None) -> VictimModel:
    """Train a victim on a clean or poisoned set. ``data`` may be a PoisonedDataset."""
    ds = getattr(data, "dataset", data)
    if ds.num_classes != model.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes but the model has {model.num_classes} outputs")
    if len(ds.labels) and (ds.labels.min() < 0 or ds.labels.max() >= model.num_classes):
        raise ValueError("label out of range for the model")
    val = (test.images, test.labels) if test is not None else None
    return fit_classifier(model, ds.images, ds.labels, hyper, val)


def hyper_dict(hyper: TrainHyper) -> dict:
    return asdict(hyper)
