"""Encoder training against a frozen decoder, and fixed / dynamic trigger generation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import save_npz
from .models import (
    DecoderModel,
    EncoderModel,
    TrainHyper,
    TrainingDivergedError,
    forward_encoder,
    make_optimizer,
    make_scheduler,
    to_tensor,
)

logger = logging.getLogger(__name__)

NON_TARGET = 0
TARGET = 1
MODES = ("fixed", "dynamic")


@dataclass(frozen=True)
class CandidateScore:
    index: int
    loss_clean: float
    loss_triggered: float

    @property
    def score(self) -> float:
        return self.loss_clean - self.loss_triggered


@dataclass(eq=False)
class Trigger:
    mode: str
    eps_gen: float
    residual: np.ndarray | None = None
    encoder: EncoderModel | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if self.mode == "fixed":
            if self.residual is None:
                raise ValueError("a fixed trigger needs a residual")
            self.residual = np.asarray(self.residual, dtype=np.float32)
        elif self.encoder is None:
            raise ValueError("a dynamic trigger needs an encoder")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.residual.shape) if self.mode == "fixed" else tuple(self.encoder.input_shape)

    def residuals_for(self, images: np.ndarray) -> np.ndarray:
        """Per-sample residuals for a batch: broadcast for fixed, E(x) for dynamic."""
        if tuple(images.shape[1:]) != self.shape:
            raise ValueError(f"trigger shape {self.shape} does not match images {tuple(images.shape[1:])}")
        if self.mode == "fixed":
            return np.broadcast_to(self.residual, images.shape)
        return forward_encoder(self.encoder, images)

    def save(self, path: str | Path) -> Path:
        """``<path>.npz`` holds the residual (fixed) and a JSON metadata string."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"mode": self.mode, "eps_gen": self.eps_gen, "provenance": self.provenance}
        arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
        if self.mode == "fixed":
            arrays["residual"] = self.residual
        else:
            enc_path = path.with_suffix(".encoder.pt")
            self.encoder.save(enc_path)
            meta["encoder_file"] = enc_path.name
            arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        save_npz(path, **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Trigger":
        path = Path(path)
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            residual = z["residual"] if "residual" in z else None
        encoder = None
        if meta["mode"] == "dynamic":
            encoder = EncoderModel.load(path.parent / meta["encoder_file"])
        return cls(meta["mode"], meta["eps_gen"], residual, encoder, meta["provenance"])


def _state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# encoder training


def _non_target_loss(decoder_net, x: torch.Tensor, reduction="mean") -> torch.Tensor:
    y = torch.full((len(x),), NON_TARGET, dtype=torch.long, device=x.device)
    return F.cross_entropy(decoder_net(x), y, reduction=reduction)


@torch.no_grad()
def erase_rate(encoder: EncoderModel, decoder: DecoderModel, images: np.ndarray) -> float:
    """Fraction of ``images + E(images)`` the decoder calls non-target."""
    triggered = np.clip(images + forward_encoder(encoder, images), 0.0, 1.0)
    return float((decoder.predict(triggered) == NON_TARGET).mean())


def train_encoder(
    encoder: EncoderModel, decoder: DecoderModel, pood_target: np.ndarray, hyper: TrainHyper
) -> EncoderModel:
    """Train E so that decoder(clip(px* + E(px*))) is pushed to the non-target label.

    The decoder stays frozen and in eval mode. Per-epoch mean loss and erase
    rate are appended to ``encoder.history``; the final erase rate lands in
    ``encoder.metrics``.
    """
    pood_target = np.asarray(pood_target, dtype=np.float32)
    if len(pood_target) == 0:
        raise ValueError("empty POOD target set")
    if tuple(pood_target.shape[1:]) != tuple(encoder.input_shape) or tuple(decoder.input_shape) != tuple(encoder.input_shape):
        raise ValueError("encoder, decoder and POOD target shapes disagree")

    dec = decoder.net
    dec.eval()
    for p in dec.parameters():
        p.requires_grad_(False)

    n = len(pood_target)
    rng = np.random.default_rng(hyper.seed)
    torch.manual_seed(hyper.seed)
    steps = max(1, math.ceil(n / hyper.batch_size))
    opt = make_optimizer(encoder.net.parameters(), hyper)
    sched = make_scheduler(opt, hyper, steps)
    try:
        for epoch in range(hyper.epochs):
            encoder.net.train()
            order = rng.permutation(n)
            total = 0.0
            for s in range(steps):
                idx = order[s * hyper.batch_size:(s + 1) * hyper.batch_size]
                x = to_tensor(pood_target[idx], encoder.device)
                loss = _non_target_loss(dec, torch.clamp(x + encoder.net(x), 0.0, 1.0))
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"encoder training diverged at epoch {epoch}: loss={loss.item()}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            record = {"epoch": epoch, "loss": total / n, "erase_rate": erase_rate(encoder, decoder, pood_target)}
            encoder.history.append(record)
            logger.info("encoder epoch %d: %s", epoch, record)
    finally:
        for p in dec.parameters():
            p.requires_grad_(True)

    encoder.metrics["erase_rate"] = erase_rate(encoder, decoder, pood_target)
    encoder.metrics["base_erase_rate"] = float((decoder.predict(pood_target) == NON_TARGET).mean())
    return encoder


# ---------------------------------------------------------------------------
# selection


@torch.no_grad()
def score_candidates(encoder: EncoderModel, decoder: DecoderModel, pood_target: np.ndarray) -> list[CandidateScore]:
    """Loss toward the non-target label before and after adding each candidate's own residual.

    Candidates go through the networks one at a time: batched convolutions are not
    position invariant, so a batch would let identical candidates score a few ulps
    apart and break the lowest-index tie rule.
    """
    pood_target = np.asarray(pood_target, dtype=np.float32)
    encoder.net.eval()
    decoder.net.eval()
    scores = []
    with torch.no_grad():
        for i in range(len(pood_target)):
            x = to_tensor(pood_target[i:i + 1])
            lc = _non_target_loss(decoder.net, x, "none")
            lt = _non_target_loss(decoder.net, torch.clamp(x + encoder.net(x), 0.0, 1.0), "none")
            scores.append(CandidateScore(i, float(lc.item()), float(lt.item())))
    return scores


def select_index(scores: list[CandidateScore], largest: bool = True) -> int:
    """Argmax (or argmin) of score; ties go to the lowest index."""
    if not scores:
        raise ValueError("empty candidate set")
    values = np.array([s.score for s in scores], dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError("non-finite candidate score")
    pos = int(np.argmax(values) if largest else np.argmin(values))
    return scores[pos].index


def _select(encoder, decoder, pood_target, largest: bool, max_candidates: int | None, seed: int, source_id) -> Trigger:
    pood_target = np.asarray(pood_target, dtype=np.float32)
    if len(pood_target) == 0:
        raise ValueError("empty candidate set")
    pool = np.arange(len(pood_target))
    if max_candidates is not None and max_candidates < len(pool):
        pool = np.sort(np.random.default_rng(seed).choice(pool, max_candidates, replace=False))
    scores = score_candidates(encoder, decoder, pood_target[pool])
    pos = select_index(scores, largest)
    index = int(pool[pos])
    residual = forward_encoder(encoder, pood_target[index:index + 1])[0]
    return Trigger(
        mode="fixed",
        eps_gen=encoder.eps_gen,
        residual=residual,
        provenance={
            "selection": "max-loss" if largest else "min-loss",
            "pood_source": source_id,
            "index": index,
            "score": scores[pos].score,
            "n_candidates": len(pool),
            "encoder_hash": _state_hash(encoder.net),
            "decoder_hash": _state_hash(decoder.net),
        },
    )


def select_fixed_trigger(
    encoder: EncoderModel,
    decoder: DecoderModel,
    pood_target: np.ndarray,
    max_candidates: int | None = None,
    seed: int = 0,
    source_id: str | None = None,
) -> Trigger:
    """Pick the candidate whose own residual most reduces the non-target loss and return its residual."""
    return _select(encoder, decoder, pood_target, True, max_candidates, seed, source_id)


def select_min_loss_trigger(
    encoder: EncoderModel,
    decoder: DecoderModel,
    pood_target: np.ndarray,
    max_candidates: int | None = None,
    seed: int = 0,
    source_id: str | None = None,
) -> Trigger:
    """The ablation counterpart of :func:`select_fixed_trigger`: argmin of the same score."""
    return _select(encoder, decoder, pood_target, False, max_candidates, seed, source_id)


def generate_dynamic_trigger(encoder: EncoderModel, images: np.ndarray) -> np.ndarray:
    return forward_encoder(encoder, images)


def dynamic_trigger(encoder: EncoderModel, source_id: str | None = None) -> Trigger:
    return Trigger(
        mode="dynamic",
        eps_gen=encoder.eps_gen,
        encoder=encoder,
        provenance={"selection": "dynamic", "pood_source": source_id, "encoder_hash": _state_hash(encoder.net)},
    )
