"""Caption similarity metrics and transfer statistics.

All scores are sentence level. A candidate is scored against a set of
references; inputs may be strings (whitespace split) or word sequences.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence, Union

Sentence = Union[str, Sequence[str]]

METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR")
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9  # Fmean = PR / (alpha P + (1 - alpha) R) = 10PR / (R + 9P)
AGGREGATION = "sentence-mean"


def tokens(s: Sentence) -> tuple[str, ...]:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def _refs(references) -> list[tuple[str, ...]]:
    if isinstance(references, str):
        references = [references]
    refs = [tokens(r) for r in references]
    if not refs:
        raise ValueError("at least one reference is required")
    return refs


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(zip(*(words[i:] for i in range(n))))


@lru_cache(maxsize=1 << 16)
def _ngram_counts(words: tuple, n: int) -> Counter:
    # shared, so callers must not mutate it
    return ngrams(words, n)


# ---------------------------------------------------------------- BLEU


def bleu_all(candidate: Sentence, references, max_n: int = 4) -> tuple[float, ...]:
    """Sentence BLEU for every order 1..``max_n`` without smoothing.

    Clip counts are the max over references; the brevity penalty uses the
    reference length closest to the candidate (shorter wins a tie). Orders the
    candidate is too short to contain are left out of the geometric mean, so a
    sentence always scores 1 against itself.
    """
    if not 1 <= max_n <= 4:
        raise ValueError("n must be in 1..4")
    cand = tokens(candidate)
    refs = _refs(references)
    if not cand:
        return (0.0,) * max_n
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    out = []
    log_p = 0.0
    for k in range(1, max_n + 1):
        if k <= c:
            counts = _ngram_counts(cand, k)
            max_ref = _ngram_counts(refs[0], k)
            for ref in refs[1:]:
                max_ref = max_ref | _ngram_counts(ref, k)
            clipped = sum(min(n, max_ref[g]) for g, n in counts.items())
            if clipped == 0:
                out += [0.0] * (max_n - k + 1)
                break
            log_p += math.log(clipped / (c - k + 1))
        out.append(bp * math.exp(log_p / min(k, c)))
    return tuple(out)


def bleu_n(candidate: Sentence, references, n: int) -> float:
    """BLEU-n; see :func:`bleu_all`."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    return bleu_all(candidate, references, n)[-1]


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Bit-parallel LCS length: one word-sized update per element of ``b``."""
    match: dict[str, int] = {}
    for i, x in enumerate(a):
        match[x] = match.get(x, 0) | 1 << i
    full = (1 << len(a)) - 1
    v = full
    for y in b:
        u = v & match.get(y, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - v.bit_count()


def _rouge_pair(cand, ref, beta: float) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def rouge_l(candidate: Sentence, references, beta: float = ROUGE_BETA) -> float:
    cand = tokens(candidate)
    return max(_rouge_pair(cand, r, beta) for r in _refs(references))


# ---------------------------------------------------------------- METEOR


def meteor_alignment(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the exact-match alignment.

    Maximises the number of one-to-one matches first, then minimises the
    chunk count. A chunk is a run of matches adjacent in both sentences.
    """
    masks: dict[str, int] = {}
    for j, w in enumerate(ref):
        masks[w] = masks.get(w, 0) | 1 << j
    left: dict[str, int] = {}
    for w in cand:
        left[w] = left.get(w, 0) + 1
    # a maximum matching pairs exactly min(count in cand, count in ref) copies of each word
    need: dict[str, int] = {}
    for w, c in left.items():
        if w in masks:
            need[w] = min(c, masks[w].bit_count())
    total = sum(need.values())
    if not total:
        return 0, 0
    # forward DP over cand; state (used ref mask, ref index matched by the
    # previous word or -2) -> fewest chunks so far
    states = {(0, -2): 0}
    for w in cand:
        left[w] -= 1
        k = need.get(w)
        new: dict = {}
        if k is None:
            for (used, _), ch in states.items():
                key = (used, -2)
                if new.get(key, ch + 1) > ch:
                    new[key] = ch
            states = new
            continue
        mw, lw = masks[w], left[w]
        for (used, prev), ch in states.items():
            done = (used & mw).bit_count()
            if done + lw >= k:  # enough copies remain to skip this one
                key = (used, -2)
                if new.get(key, ch + 1) > ch:
                    new[key] = ch
            if done < k:
                free = mw & ~used
                while free:
                    bit = free & -free
                    free ^= bit
                    j = bit.bit_length() - 1
                    v = ch if prev == j - 1 else ch + 1
                    key = (used | bit, j)
                    if new.get(key, v + 1) > v:
                        new[key] = v
        states = new
    return total, min(states.values())


def _meteor_pair(cand, ref, classic_penalty: bool) -> float:
    if not cand or not ref:
        return 0.0
    m, chunks = meteor_alignment(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    if classic_penalty:
        frag = chunks / m
    else:
        frag = 0.0 if m == 1 else (chunks - 1) / (m - 1)
    return fmean * (1.0 - 0.5 * frag**3)


def meteor_exact(candidate: Sentence, references, classic_penalty: bool = False) -> float:
    """Exact-match METEOR, max over references.

    The default fragmentation is (chunks - 1) / (matches - 1): a single chunk
    has no penalty, so identical sentences score 1, and a fully reversed
    sentence still gets penalty 0.5. ``classic_penalty`` uses chunks / matches.
    """
    cand = tokens(candidate)
    return max(_meteor_pair(cand, r, classic_penalty) for r in _refs(references))


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    meteor: float

    def values(self) -> tuple[float, ...]:
        return (*self.bleu, self.rouge_l, self.meteor)

    def to_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.values()))

    @classmethod
    def from_values(cls, vals: Sequence[float]) -> "MetricReport":
        v = [float(x) for x in vals]
        return cls(tuple(v[:4]), v[4], v[5])

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls.from_values([d[k] for k in METRIC_NAMES])


def score(candidate: Sentence, references) -> MetricReport:
    cand, refs = tokens(candidate), _refs(references)
    return MetricReport(bleu_all(cand, refs, 4), rouge_l(cand, refs), meteor_exact(cand, refs))


def average(reports: Iterable[MetricReport]) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("cannot average an empty set of reports")
    cols = zip(*(r.values() for r in reports))
    return MetricReport.from_values([math.fsum(c) / len(reports) for c in cols])


def score_corpus(candidates: Sequence[Sentence], references: Sequence) -> tuple[MetricReport, list[MetricReport]]:
    """Per-sentence reports and their mean. ``references[i]`` is one sentence or a list."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    per = [score(c, r) for c, r in zip(candidates, references)]
    return average(per), per


@dataclass(frozen=True)
class TransferStats:
    ori: MetricReport
    tgt: MetricReport
    mis: MetricReport
    n_images: int

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "aggregation": AGGREGATION,
            "ori": self.ori.to_dict(),
            "tgt": self.tgt.to_dict(),
            "mis": self.mis.to_dict(),
        }


def transfer_stats_from_captions(b_orig, b_adv, targets, a_orig) -> TransferStats:
    """ori: B(adv) vs B(orig); tgt: B(adv) vs target; mis: B(orig) vs A(orig)."""
    n = len(b_orig)
    if n == 0:
        raise ValueError("transfer statistics need at least one image")
    if not len(b_adv) == len(targets) == len(a_orig) == n:
        raise ValueError("caption lists must have equal length")
    ori, _ = score_corpus(b_adv, b_orig)
    tgt, _ = score_corpus(b_adv, targets)
    mis, _ = score_corpus(b_orig, a_orig)
    return TransferStats(ori, tgt, mis, n)


def transfer_stats(model_a, model_b, images, adv_images, targets) -> TransferStats:
    """Greedy captions from both models, then :func:`transfer_stats_from_captions`.

    ``targets`` are caption id tuples or plain strings.
    """
    from .captioner import infer_greedy

    if len(images) == 0:
        raise ValueError("transfer statistics need at least one image")

    def text(model, imgs):
        return [model.vocab.decode(c) for c in infer_greedy(model, imgs)]

    tg = [t if isinstance(t, str) else model_a.vocab.decode(t) for t in targets]
    return transfer_stats_from_captions(text(model_b, images), text(model_b, adv_images), tg, text(model_a, images))


# ---------------------------------------------------------------- export


def write_scores_csv(path: str | Path, per_image: dict, prefix: str = "") -> None:
    """Rows (image_id, metric, value); ``per_image`` maps id -> MetricReport."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "metric", "value"])
        for image_id in sorted(per_image):
            for name, v in per_image[image_id].to_dict().items():
                w.writerow([image_id, prefix + name, repr(v)])


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
