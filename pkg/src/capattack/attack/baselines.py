"""Classifier-only attacks used as baselines.

A linear head on the captioner's frozen convolutional output (the flattened
conv map, which the captioner itself only sees through its own projection)
predicts a 4-way scene label. I-FGSM and C&W attack that head; their
adversarial images are then handed to the captioner to see whether the
caption follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, Tape, Tensor, adam_step, backward
from ..captioner.model import CaptionerModel
from ..seeding import stream
from .box import from_tanh_space, to_tanh_space


@dataclass
class ClassHead:
    model: CaptionerModel
    w: np.ndarray  # (feature_dim, n_classes)
    b: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]

    def logits(self, images) -> Tensor:
        return ad.linear(conv_features(self.model, images), Tensor(self.w), Tensor(self.b))

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(np.asarray(images)).data, axis=1)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, model: CaptionerModel, d: dict) -> "ClassHead":
        return cls(model, np.array(d["w"], dtype=np.float64), np.array(d["b"], dtype=np.float64))


def conv_features(model: CaptionerModel, images) -> Tensor:
    fmap = model.conv_map(images)
    b, p, c = fmap.shape
    return ad.reshape(fmap, (b, p * c))


def _xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    lp = ad.take_last(ad.log_softmax(logits), labels)
    return ad.mul(ad.sum(lp), -1.0 / len(labels))


def train_class_head(
    model: CaptionerModel,
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int = 4,
    epochs: int = 300,
    lr: float = 0.01,
    seed: int = 0,
) -> ClassHead:
    """Full-batch softmax regression on precomputed (frozen) features."""
    feats = conv_features(model, images).data
    labels = np.asarray(labels, dtype=np.int64)
    rng = stream(seed, "baseline/head")
    params = [rng.normal(0.0, 1.0 / np.sqrt(feats.shape[1]), (feats.shape[1], n_classes)), np.zeros(n_classes)]
    state = AdamState.zeros_like(params)
    for _ in range(epochs):
        with Tape() as tape:
            w, b = (Tensor(p, requires_grad=True) for p in params)
            loss = _xent(ad.linear(Tensor(feats), w, b), labels)
        g = backward(tape, loss)
        params, state = adam_step(params, [g.of(w), g.of(b)], state, lr)
    return ClassHead(model, params[0], params[1])


def _grad_wrt_image(head: ClassHead, x: np.ndarray, fn):
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        out = fn(head.logits(xt))
    return out, backward(tape, out).of(xt)


LEVEL = 2.0 / 255.0  # one 8-bit intensity step in [-1, 1] units


def default_ifgsm_steps(eps_inf: float) -> int:
    """Basic-iterative-method schedule: min(eps + 4, 1.25 eps) steps, eps in intensity levels."""
    e = eps_inf / LEVEL
    return int(math.ceil(min(e + 4, 1.25 * e)))


def ifgsm_classifier(
    head: ClassHead, images, targets, eps_inf: float = 0.3, steps: int | None = None, alpha: float = LEVEL
) -> np.ndarray:
    """Targeted I-FGSM: step down the target cross-entropy by ``alpha * sign(grad)``,
    then project onto the eps-ball around the image and onto [-1, 1]."""
    steps = default_ifgsm_steps(eps_inf) if steps is None else steps
    x0 = np.asarray(images, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[None]
    t = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(x0),))
    lo, hi = np.maximum(x0 - eps_inf, -1.0), np.minimum(x0 + eps_inf, 1.0)
    x = x0.copy()
    for _ in range(steps):
        _, g = _grad_wrt_image(head, x, lambda z: ad.sum(ad.take_last(ad.log_softmax(z), t)))
        x = np.clip(x + alpha * np.sign(g), lo, hi)
    return x


def _cw_margin(z: Tensor, t: np.ndarray, kappa: float) -> Tensor:
    """max(max_{i != t} Z_i - Z_t, -kappa) per row."""
    onehot = np.arange(z.shape[1]) == t[:, None]
    other = ad.max_over_axis(ad.where(onehot, -1e30, z), axis=1)
    diff = ad.sub(other, ad.take_last(z, t))
    return ad.sub(ad.relu(ad.add(diff, float(kappa))), float(kappa))


def cw_classifier(
    head: ClassHead,
    images,
    targets,
    kappa: float = 10.0,
    C: float = 100.0,
    lr: float = 0.01,
    iters: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """Targeted C&W L2 at fixed C. Returns (images, success flags).

    The kept point per row is the lowest-distortion iterate whose target
    logit leads the runner-up by at least ``kappa``; rows that never get
    there return their final iterate.
    """
    x0 = np.asarray(images, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[None]
    t = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(x0),)).copy()
    y = to_tanh_space(x0)
    base = np.tanh(y)
    w = np.zeros_like(y)
    state = AdamState.zeros_like([w])
    best = base.copy()
    best_d = np.full(len(x0), np.inf)
    last = base.copy()
    for _ in range(iters):
        with Tape() as tape:
            wt = Tensor(w, requires_grad=True)
            x = from_tanh_space(wt, y)
            d2 = ad.l2_norm_sq(ad.sub(x, Tensor(base)), axis=(1, 2, 3))
            z = head.logits(x)
            margin = _cw_margin(z, t, kappa)
            total = ad.sum(ad.add(d2, ad.mul(margin, float(C))))
        ok = margin.data <= -kappa
        better = ok & (d2.data < best_d)
        best[better] = x.data[better]
        best_d[better] = d2.data[better]
        last = x.data
        g = backward(tape, total).of(wt)
        (w,), state = adam_step([w], [g], state, lr)
    found = np.isfinite(best_d)
    out = np.where(found[:, None, None, None], best, last)
    return out, found
