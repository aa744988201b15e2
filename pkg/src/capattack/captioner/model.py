"""CNN encoder + LSTM decoder captioner.

Two variants share the encoder convolutions:

* ``plain``: the conv map is flattened and projected to a feature vector that
  initialises the LSTM state.
* ``attention``: the same projection only initialises the state; the 8x8 conv
  map (plus a learned per-cell embedding) is kept and each step attends over
  its cells (additive attention), feeding the context next to the word embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from .vocab import END, PAD, START, Caption, Vocabulary, check_caption

VARIANTS = ("plain", "attention")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "plain"
    image_size: int = 32
    channels: tuple[int, int] = (16, 32)
    feature_dim: int = 64
    embed_dim: int = 32
    hidden: int = 64
    att_dim: int = 32
    max_len: int = 15

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def grid(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    fmap: Tensor | None = None
    fmap_proj: Tensor | None = None


def param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.channels
    g, hs = cfg.grid, cfg.hidden
    shapes = {
        "conv1_k": (3, 3, 3, c1),
        "conv1_b": (c1,),
        "conv2_k": (3, 3, c1, c2),
        "conv2_b": (c2,),
        "embed": (vocab_size, cfg.embed_dim),
        "lstm_wh": (hs, 4 * hs),
        "lstm_b": (4 * hs,),
        "out_w": (hs, vocab_size),
        "out_b": (vocab_size,),
    }
    shapes.update(
        fc_w=(g * g * c2, cfg.feature_dim),
        fc_b=(cfg.feature_dim,),
        init_w=(cfg.feature_dim, 2 * hs),
        init_b=(2 * hs,),
    )
    if cfg.variant == "plain":
        shapes.update(lstm_wx=(cfg.embed_dim, 4 * hs))
    else:
        shapes.update(
            att_pos=(g * g, c2),
            att_wf=(c2, cfg.att_dim),
            att_bf=(cfg.att_dim,),
            att_wh=(hs, cfg.att_dim),
            att_v=(cfg.att_dim, 1),
            lstm_wx=(cfg.embed_dim + c2, 4 * hs),
        )
    return shapes


def init_params(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg, vocab_size).items():
        if name.endswith("_b") or name == "att_bf":
            p = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            if name == "embed":
                fan_in = 1
            scale = np.sqrt(2.0 / fan_in) if name.startswith(("conv", "fc")) else np.sqrt(1.0 / fan_in)
            p = rng.normal(0.0, scale, size=shape)
        params[name] = p
    hs = cfg.hidden
    params["lstm_b"][hs : 2 * hs] = 1.0  # forget-gate bias
    return params


class CaptionerModel:
    """Weights plus the forward computations. Treated as immutable once built."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, np.ndarray]):
        expected = param_shapes(config, len(vocab))
        if set(params) != set(expected):
            raise ValueError(f"parameter names mismatch: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.vocab = vocab
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._const = {k: Tensor(v) for k, v in self.params.items()}

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator) -> "CaptionerModel":
        return cls(config, vocab, init_params(config, len(vocab), rng))

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def weights(self, w: dict[str, Tensor] | None) -> dict[str, Tensor]:
        return self._const if w is None else w

    # ------------------------------------------------------------ encoder

    def _check_images(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = self.config.image_size
        if x.data.ndim == 3:
            x = ad.reshape(x, (1, *x.shape))
        if x.data.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ShapeError(f"expected images of shape (batch, {s}, {s}, 3), got {x.shape}")
        if np.any(np.abs(x.data) > 1.0):
            raise ValueError("image pixels must lie in [-1, 1]")
        return x

    def conv_map(self, images, w=None) -> Tensor:
        """(B, grid*grid, c2) map after the two stride-2 convolutions."""
        w = self.weights(w)
        x = self._check_images(images)
        x = ad.relu(ad.conv2d(x, w["conv1_k"], w["conv1_b"], stride=2, padding=1))
        x = ad.relu(ad.conv2d(x, w["conv2_k"], w["conv2_b"], stride=2, padding=1))
        b, g1, g2, c = x.shape
        return ad.reshape(x, (b, g1 * g2, c))

    def encode(self, images, w=None) -> Tensor:
        """Feature vector (plain) or feature map (attention) per image."""
        w = self.weights(w)
        fmap = self.conv_map(images, w)
        b, p, c = fmap.shape
        if self.variant == "attention":
            # the attended context carries no position otherwise; relation words need it
            return ad.add(fmap, ad.repeat_axis(w["att_pos"], 0, b))
        return self._global_feature(fmap, w)

    def feature(self, images, w=None) -> Tensor:
        """The global feature vector (B, feature_dim), for either variant."""
        w = self.weights(w)
        return self._global_feature(self.conv_map(images, w), w)

    def _global_feature(self, fmap: Tensor, w) -> Tensor:
        b, p, c = fmap.shape
        return ad.relu(ad.linear(ad.reshape(fmap, (b, p * c)), w["fc_w"], w["fc_b"]))

    def init_state(self, encoded: Tensor, w=None) -> DecoderState:
        w = self.weights(w)
        hs = self.config.hidden
        if self.variant == "plain":
            hc = ad.tanh(ad.linear(encoded, w["init_w"], w["init_b"]))
            return DecoderState(hc[:, :hs], hc[:, hs:])
        b, p, c = encoded.shape
        hc = ad.tanh(ad.linear(self._global_feature(encoded, w), w["init_w"], w["init_b"]))
        proj = ad.linear(ad.reshape(encoded, (b * p, c)), w["att_wf"], w["att_bf"])
        proj = ad.reshape(proj, (b, p, self.config.att_dim))
        return DecoderState(hc[:, :hs], hc[:, hs:], encoded, proj)

    # ------------------------------------------------------------ decoder

    def _cell(self, state: DecoderState, tokens: np.ndarray, w) -> DecoderState:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape != (state.h.shape[0],):
            raise ShapeError(f"expected one token per row ({state.h.shape[0]}), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of range")
        x = ad.embed_lookup(w["embed"], tokens)
        if self.variant == "attention":
            b, p, c = state.fmap.shape
            hp = ad.matmul(state.h, w["att_wh"])
            e = ad.tanh(ad.add(state.fmap_proj, ad.repeat_axis(hp, 1, p)))
            scores = ad.reshape(ad.matmul(ad.reshape(e, (b * p, -1)), w["att_v"]), (b, p))
            alpha = ad.softmax(scores)
            ctx = ad.sum(ad.mul(ad.repeat_axis(alpha, 2, c), state.fmap), axis=1)
            x = ad.concat([x, ctx], axis=1)
        hs = self.config.hidden
        hc = ad.lstm_cell(x, state.h, state.c, w["lstm_wx"], w["lstm_wh"], w["lstm_b"])
        return DecoderState(hc[:, :hs], hc[:, hs:], state.fmap, state.fmap_proj)

    def decode_step(self, state: DecoderState, tokens, w=None) -> tuple[Tensor, DecoderState]:
        """Feed one token per row; return next-word logits (B, |V|) and new state."""
        w = self.weights(w)
        new = self._cell(state, tokens, w)
        return ad.linear(new.h, w["out_w"], w["out_b"]), new

    def teacher_forced_logits(self, images, inputs: np.ndarray, w=None) -> Tensor:
        """Logits (B, L, |V|) when the decoder is fed ``inputs`` (B, L)."""
        w = self.weights(w)
        inputs = np.asarray(inputs, dtype=np.int64)
        state = self.init_state(self.encode(images, w), w)
        b, steps = inputs.shape
        hs = []
        for t in range(steps):
            state = self._cell(state, inputs[:, t], w)
            hs.append(state.h)
        h = ad.reshape(ad.stack(hs, axis=1), (b * steps, self.config.hidden))
        logits = ad.linear(h, w["out_w"], w["out_b"])
        return ad.reshape(logits, (b, steps, self.vocab_size))


def pad_captions(captions: Sequence[Caption]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder inputs, next-word targets and a validity mask, each (B, L)."""
    steps = max(len(c) for c in captions) - 1
    b = len(captions)
    inputs = np.full((b, steps), PAD, dtype=np.int64)
    targets = np.full((b, steps), PAD, dtype=np.int64)
    mask = np.zeros((b, steps), dtype=bool)
    for i, cap in enumerate(captions):
        n = len(cap) - 1
        inputs[i, :n] = cap[:-1]
        targets[i, :n] = cap[1:]
        mask[i, :n] = True
    return inputs, targets, mask


def sequence_log_probs(model: CaptionerModel, images, captions: Sequence[Caption], w=None) -> Tensor:
    """Differentiable log P(caption | image) per row, shape (B,)."""
    inputs, targets, mask = pad_captions(captions)
    logits = model.teacher_forced_logits(images, inputs, w)
    lp = ad.take_last(ad.log_softmax(logits), targets)
    return ad.sum(ad.where(mask, lp, 0.0), axis=1)


def caption_log_prob(model: CaptionerModel, image, caption: Caption) -> float:
    check_caption(caption, model.vocab_size)
    return float(sequence_log_probs(model, image, [tuple(caption)]).data[0])


__all__ = [
    "VARIANTS",
    "ModelConfig",
    "DecoderState",
    "CaptionerModel",
    "pad_captions",
    "sequence_log_probs",
    "caption_log_prob",
    "START",
    "END",
    "PAD",
]
