"""Attack losses.

The batched ``*_terms`` functions take teacher-forced logits ``z`` of shape
(B, L, |V|) and return one loss per row. Step ``k`` of ``z`` predicts caption
position ``k + 2`` (1-based), so a caption of N tokens uses steps 0..N-2.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..captioner.model import CaptionerModel, pad_captions
from ..captioner.vocab import Caption, check_caption

GATE_A = 1e5
LOGPROB_MASKED = 1e5  # stands in for -log 0 when every position of a keyword is gated
_NEG = -1e30


def _margin(z: Tensor, word: np.ndarray) -> Tensor:
    """max_{k != word} z^(k) - z^(word) per (row, step)."""
    onehot = np.arange(z.shape[-1]) == word[..., None]
    other = ad.max_over_axis(ad.where(onehot, _NEG, z), axis=-1)
    return ad.sub(other, ad.take_last(z, word))


def _ramp(margin: Tensor, eps: float) -> Tensor:
    # max(-eps, m) written through relu so the saturated side has zero gradient
    return ad.sub(ad.relu(ad.add(margin, float(eps))), float(eps))


def logprob_caption_terms(z: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """-sum_{t=2..N} log p_t(S_t)."""
    lp = ad.take_last(ad.log_softmax(z), targets)
    return ad.neg(ad.sum(ad.where(mask, lp, 0.0), axis=1))


def ramp_mask(mask: np.ndarray) -> np.ndarray:
    """Valid steps minus the last one (the END prediction)."""
    out = mask.copy()
    last = mask.sum(axis=1) - 1
    out[np.arange(len(mask)), np.maximum(last, 0)] = False
    return out


def logits_caption_terms(z: Tensor, targets: np.ndarray, mask: np.ndarray, eps: float) -> Tensor:
    """sum_{t=2..N-1} max(-eps, max_{k != S_t} z_t^(k) - z_t^(S_t))."""
    ramp = _ramp(_margin(z, targets), eps)
    return ad.sum(ad.where(ramp_mask(mask), ramp, 0.0), axis=1)


def keyword_gate(z: np.ndarray, keywords: np.ndarray) -> np.ndarray:
    """gated[b, t, j]: the top-1 word at step t is a keyword other than K_j."""
    top = np.argmax(z, axis=-1)  # (B, L)
    is_kw = top[:, :, None] == keywords[:, None, :]  # (B, L, M)
    return is_kw.any(axis=2, keepdims=True) & ~is_kw


def logits_keyword_terms(z: Tensor, keywords: np.ndarray, mask: np.ndarray, eps: float, gate_a: float = GATE_A) -> Tensor:
    """sum_j min_t g_{t,j}(max(-eps, max_{k != K_j} z_t^(k) - z_t^(K_j)))."""
    keywords = np.asarray(keywords, dtype=np.int64)
    b, steps, _ = z.shape
    gated = keyword_gate(z.data, keywords)
    terms = []
    for j in range(keywords.shape[1]):
        word = np.repeat(keywords[:, j : j + 1], steps, axis=1)
        ramp = _ramp(_margin(z, word), eps)
        ok = mask & ~gated[:, :, j]
        terms.append(ad.min_over_axis(ad.where(ok, ramp, float(gate_a)), axis=1))
    return ad.sum(ad.stack(terms, axis=1), axis=1)


def logprob_keyword_terms(z: Tensor, keywords: np.ndarray, mask: np.ndarray, masked_value: float = LOGPROB_MASKED) -> Tensor:
    """-sum_j log max_t g'_{t,j}(p_t^(K_j)); gated steps are left out of the max."""
    keywords = np.asarray(keywords, dtype=np.int64)
    b, steps, _ = z.shape
    gated = keyword_gate(z.data, keywords)
    logp = ad.log_softmax(z)
    terms = []
    for j in range(keywords.shape[1]):
        word = np.repeat(keywords[:, j : j + 1], steps, axis=1)
        lp = ad.take_last(logp, word)
        ok = mask & ~gated[:, :, j]
        terms.append(ad.max_over_axis(ad.where(ok, lp, -float(masked_value)), axis=1))
    return ad.neg(ad.sum(ad.stack(terms, axis=1), axis=1))


# ------------------------------------------------------- single-image forms


def _forced(model: CaptionerModel, image, caption: Caption):
    check_caption(caption, model.vocab_size, model.config.max_len)
    inputs, targets, mask = pad_captions([tuple(caption)])
    return model.teacher_forced_logits(image, inputs), targets, mask


def _keyword_array(keywords: Sequence[int]) -> np.ndarray:
    k = np.asarray([list(keywords)], dtype=np.int64)
    if k.size == 0:
        raise ValueError("keyword set must not be empty")
    return k


def loss_logprob_caption(model: CaptionerModel, image, target: Caption) -> Tensor:
    z, targets, mask = _forced(model, image, target)
    return ad.reshape(logprob_caption_terms(z, targets, mask), ())


def loss_logits_caption(model: CaptionerModel, image, target: Caption, eps: float = 1.0) -> Tensor:
    z, targets, mask = _forced(model, image, target)
    return ad.reshape(logits_caption_terms(z, targets, mask, eps), ())


def loss_logits_keywords(model, image, keywords: Sequence[int], eps: float, gate_a: float, forced_caption: Caption) -> Tensor:
    k = _keyword_array(keywords)
    z, _, mask = _forced(model, image, forced_caption)
    return ad.reshape(logits_keyword_terms(z, k, mask, eps, gate_a), ())


def loss_logprob_keywords(model, image, keywords: Sequence[int], forced_caption: Caption, masked_value: float = LOGPROB_MASKED) -> Tensor:
    k = _keyword_array(keywords)
    z, _, mask = _forced(model, image, forced_caption)
    return ad.reshape(logprob_keyword_terms(z, k, mask, masked_value), ())
