"""Greedy and beam-search caption inference (no tape is recorded)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor
from .model import CaptionerModel, DecoderState
from .vocab import END, START, Caption


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def infer_greedy(model: CaptionerModel, images, max_len: int | None = None) -> list[Caption]:
    """Argmax decoding for a batch (or a single image). Ties go to the lowest id."""
    max_len = max_len or model.config.max_len
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    state = model.init_state(model.encode(imgs))
    b = imgs.shape[0]
    seqs = [[START] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    tokens = np.full(b, START, dtype=np.int64)
    for _ in range(max_len - 1):
        logits, state = model.decode_step(state, tokens)
        tokens = np.argmax(logits.data, axis=1)
        for i in np.flatnonzero(~done):
            seqs[i].append(int(tokens[i]))
        done |= tokens == END
        if done.all():
            break
    return [tuple(s) for s in seqs]


@dataclass(frozen=True)
class Hypothesis:
    tokens: Caption
    log_prob: float


def _take_rows(state: DecoderState, rows: np.ndarray) -> DecoderState:
    def sel(t):
        return None if t is None else Tensor(t.data[rows])

    return DecoderState(sel(state.h), sel(state.c), sel(state.fmap), sel(state.fmap_proj))


def _rank_key(h: tuple[float, Caption]):
    return (-h[0], h[1])


def infer_beam(model: CaptionerModel, image, beam_width: int, max_len: int | None = None) -> list[Hypothesis]:
    """Top ``beam_width`` completed captions, best first.

    Each live hypothesis proposes its ``beam_width`` most likely next words;
    hypotheses ending in END are set aside, the best ``beam_width`` others stay
    live. This makes width 1 identical to greedy decoding. If nothing
    completes within ``max_len`` the truncated live hypotheses are returned.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    max_len = max_len or model.config.max_len
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ValueError("infer_beam takes a single image")
    state = model.init_state(model.encode(img))
    live: list[tuple[float, Caption]] = [(0.0, (START,))]
    complete: list[tuple[float, Caption]] = []
    for _ in range(max_len - 1):
        if not live:
            break
        tokens = np.array([seq[-1] for _, seq in live], dtype=np.int64)
        logits, state = model.decode_step(state, tokens)
        logp = _log_softmax(logits.data)
        cands: list[tuple[float, Caption, int]] = []
        for row, (score, seq) in enumerate(live):
            order = np.argsort(-logp[row], kind="stable")[:beam_width]
            for tok in order:
                cand = (score + float(logp[row, tok]), seq + (int(tok),))
                if tok == END:
                    complete.append(cand)
                else:
                    cands.append((*cand, row))
        complete = sorted(complete, key=_rank_key)[:beam_width]
        cands.sort(key=lambda c: (-c[0], c[1]))
        cands = cands[:beam_width]
        live = [(s, q) for s, q, _ in cands]
        if cands:
            state = _take_rows(state, np.array([r for _, _, r in cands]))
    pool = complete if complete else sorted(live, key=_rank_key)[:beam_width]
    return [Hypothesis(seq, lp) for lp, seq in pool]
