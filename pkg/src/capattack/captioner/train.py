"""Teacher-forced cross-entropy training with ADAM."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, Tape, Tensor, adam_step, backward
from ..seeding import stream
from .decode import infer_greedy
from .model import CaptionerModel, ModelConfig, pad_captions
from .vocab import Caption, Vocabulary

log = logging.getLogger(__name__)

GATE_ACCURACY = 0.90


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else math.nan

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "val_accuracy": self.val_accuracy}


def batch_loss(model: CaptionerModel, w: dict[str, Tensor], images: np.ndarray, captions: Sequence[Caption]) -> Tensor:
    inputs, targets, mask = pad_captions(captions)
    logits = model.teacher_forced_logits(images, inputs, w)
    lp = ad.take_last(ad.log_softmax(logits), targets)
    return ad.mul(ad.sum(ad.where(mask, lp, 0.0)), -1.0 / mask.sum())


def exact_match(model: CaptionerModel, images: np.ndarray, captions: Sequence[Caption], batch: int = 256) -> float:
    hits = 0
    for s in range(0, len(captions), batch):
        preds = infer_greedy(model, images[s : s + batch])
        hits += sum(p == tuple(c) for p, c in zip(preds, captions[s : s + batch]))
    return hits / len(captions)


def train(
    variant: str,
    vocab: Vocabulary,
    images: np.ndarray,
    captions: Sequence[Caption],
    epochs: int = 40,
    lr: float = 0.002,
    batch_size: int = 32,
    seed: int = 0,
    val: tuple[np.ndarray, Sequence[Caption]] | None = None,
    config: ModelConfig | None = None,
    final_lr_frac: float = 0.05,
) -> tuple[CaptionerModel, TrainLog]:
    """Train a fresh model; the learning rate follows a cosine decay per epoch."""
    cfg = config or ModelConfig(variant=variant)
    rng = stream(seed, f"train/{variant}")
    model = CaptionerModel.create(cfg, vocab, rng)
    names = sorted(model.params)
    params = [model.params[k].copy() for k in names]
    state = AdamState.zeros_like(params)
    history = TrainLog()
    n = len(captions)
    for epoch in range(epochs):
        frac = 0.5 * (1 + math.cos(math.pi * epoch / max(epochs - 1, 1)))
        lr_epoch = lr * (final_lr_frac + (1 - final_lr_frac) * frac)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            with Tape() as tape:
                w = {k: Tensor(p, requires_grad=True) for k, p in zip(names, params)}
                loss = batch_loss(model, w, images[idx], [captions[i] for i in idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch starting {s}")
            grads = backward(tape, loss)
            params, state = adam_step(params, [grads.of(w[k]) for k in names], state, lr_epoch)
            total += value * len(idx)
            count += len(idx)
        history.epoch_loss.append(total / count)
        model = CaptionerModel(cfg, vocab, dict(zip(names, params)))
        msg = f"[{variant}] epoch {epoch + 1}/{epochs} loss {total / count:.4f}"
        if val is not None:
            acc = exact_match(model, *val)
            history.val_accuracy.append(acc)
            msg += f" val exact-match {acc:.3f}"
        log.info(msg)
    return model, history
