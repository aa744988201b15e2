"""Keyword sets: extraction from target captions and partial-success counting."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..captioner.vocab import Caption, Vocabulary
from ..data import ARTICLE, RELATIONS

# closed-class words of the caption grammar; everything else is a colour or shape
STOPWORDS = frozenset({ARTICLE, *RELATIONS})


def content_words(vocab: Vocabulary, caption: Caption) -> list[int]:
    """Distinct non-stopword ids of ``caption`` in order of first appearance."""
    out: list[int] = []
    for i in caption:
        if vocab.is_special(i) or vocab.word(i) in STOPWORDS or i in out:
            continue
        out.append(i)
    return out


def pick_keywords(vocab: Vocabulary, caption: Caption, m: int, rng: np.random.Generator) -> tuple[int, ...] | None:
    """``m`` distinct keywords sampled from the caption's content words, or None if too few."""
    words = content_words(vocab, caption)
    if len(words) < m:
        return None
    idx = np.sort(rng.choice(len(words), size=m, replace=False))
    return tuple(words[i] for i in idx)


def check_keywords(keywords: Sequence[int], vocab: Vocabulary) -> tuple[int, ...]:
    k = tuple(int(x) for x in keywords)
    if not k:
        raise ValueError("keyword set must not be empty")
    if len(set(k)) != len(k):
        raise ValueError(f"duplicate keywords: {k}")
    for i in k:
        if not 0 <= i < len(vocab) or vocab.is_special(i):
            raise ValueError(f"invalid keyword id {i}")
    return k


def count_keywords(caption: Iterable, keywords: Iterable) -> int:
    """M': number of distinct keywords present in ``caption`` (ids or words)."""
    present = set(caption)
    return sum(1 for k in set(keywords) if k in present)
