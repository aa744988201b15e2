"""Brute-force reference implementations used by the metric and beam tests.

Deliberately naive: subsequence sets instead of dynamic programming,
enumeration of every one-to-one matching instead of search.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from functools import lru_cache


@lru_cache(maxsize=None)
def subsequences(s: tuple) -> tuple[frozenset, ...]:
    """Distinct subsequences of ``s`` grouped by length."""
    by_len = [set() for _ in range(len(s) + 1)]
    for r in range(len(s) + 1):
        for idx in itertools.combinations(range(len(s)), r):
            by_len[r].add(tuple(s[i] for i in idx))
    return tuple(frozenset(x) for x in by_len)


def lcs_brute(a: tuple, b: tuple) -> int:
    sa, sb = subsequences(a), subsequences(b)
    for k in range(min(len(a), len(b)), 0, -1):
        if not sa[k].isdisjoint(sb[k]):
            return k
    return 0


def rouge_brute(a: tuple, b: tuple, beta=1.2) -> float:
    lcs = lcs_brute(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


@lru_cache(maxsize=None)
def grams(s: tuple, n: int) -> list:
    return [s[i : i + n] for i in range(len(s) - n + 1)]


def bleu_brute(cand: tuple, ref: tuple, n: int) -> float:
    """Single-reference BLEU-n; orders longer than the candidate are dropped."""
    precisions = []
    for k in range(1, min(n, len(cand)) + 1):
        cg, rg = grams(cand, k), grams(ref, k)
        clipped = sum(min(cg.count(g), rg.count(g)) for g in set(cg))
        precisions.append(clipped / len(cg))
    if min(precisions) == 0:
        return 0.0
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.prod(precisions) ** (1 / len(precisions))


def _chunks(pairs) -> int:
    pairs = sorted(pairs)
    return sum(1 for k, (i, j) in enumerate(pairs) if k == 0 or (i, j) != (pairs[k - 1][0] + 1, pairs[k - 1][1] + 1))


def _matchings(cand: tuple, ref: tuple):
    """Every one-to-one matching of equal words, as lists of (i, j)."""

    def rec(i, used):
        if i == len(cand):
            yield []
            return
        yield from rec(i + 1, used)
        for j, w in enumerate(ref):
            if w == cand[i] and j not in used:
                for rest in rec(i + 1, used | {j}):
                    yield [(i, j), *rest]

    yield from rec(0, frozenset())


def alignment_brute(cand: tuple, ref: tuple) -> tuple[int, int]:
    """(matches, chunks) of the best matching: most matches, then fewest chunks."""
    best = (0, 0)
    for m in _matchings(cand, ref):
        key = (len(m), -_chunks(m))
        if key > (best[0], -best[1]):
            best = (len(m), -key[1])
    return best


def meteor_brute(cand: tuple, ref: tuple) -> float:
    m, ch = alignment_brute(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    frag = 0.0 if m == 1 else (ch - 1) / (m - 1)
    return fmean * (1 - 0.5 * frag**3)


def canonical_pairs(alphabet_size: int, max_len: int):
    """One (a, b) per class of sentence pairs equal up to renaming words.

    Words are numbered by first appearance in a then b, so every pair over
    the alphabet maps to exactly one yielded pair.
    """
    def extend(prefix, used, length):
        if len(prefix) == length:
            yield prefix, used
            return
        for w in range(min(used + 1, alphabet_size)):
            yield from extend(prefix + (w,), max(used, w + 1), length)

    for la in range(1, max_len + 1):
        for a, used in extend((), 0, la):
            for lb in range(1, max_len + 1):
                for b, _ in extend((), used, lb):
                    yield a, b


def alignment_max_brute(cand: tuple, ref: tuple) -> tuple[int, int]:
    """Like :func:`alignment_brute` but only enumerates maximum-size matchings.

    Per word, every injection from the rarer side's occurrences into the
    other side's; the product over words covers all maximum matchings.
    """
    per_word = []
    for w in set(cand) & set(ref):
        p = [i for i, x in enumerate(cand) if x == w]
        r = [j for j, x in enumerate(ref) if x == w]
        if len(p) <= len(r):
            per_word.append([tuple(zip(p, q)) for q in itertools.permutations(r, len(p))])
        else:
            per_word.append([tuple(zip(q, r)) for q in itertools.permutations(p, len(r))])
    if not per_word:
        return 0, 0
    best = None
    for combo in itertools.product(*per_word):
        match = dict(x for part in combo for x in part)
        ch = sum(1 for i, j in match.items() if match.get(i - 1) != j - 1)
        best = ch if best is None else min(best, ch)
    return len(match), best


# ------------------------------------------------ vectorized exhaustive tables
#
# For the all-pairs sweep: every sentence over ``alphabet`` words up to
# ``max_len`` gets an n-gram count row and a subsequence membership row, and
# pair values come from elementwise min / AND over those rows.


def _code(seq, base):
    return sum(w * base**i for i, w in enumerate(seq))


class SentenceTables:
    def __init__(self, alphabet: int, max_len: int):
        self.base = alphabet
        self.sentences = [s for n in range(1, max_len + 1) for s in itertools.product(range(alphabet), repeat=n)]
        self.index = {s: i for i, s in enumerate(self.sentences)}
        self.lengths = np.array([len(s) for s in self.sentences])
        n = len(self.sentences)
        self.counts = {}
        for k in range(1, 5):
            c = np.zeros((n, alphabet**k), dtype=np.uint8)
            for i, s in enumerate(self.sentences):
                for g in grams(s, k):
                    c[i, _code(g, alphabet)] += 1
            self.counts[k] = c
        self.subseq = {}
        for k in range(1, max_len + 1):
            m = np.zeros((n, alphabet**k), dtype=bool)
            for i, s in enumerate(self.sentences):
                if len(s) >= k:
                    for sub in subsequences(s)[k]:
                        m[i, _code(sub, alphabet)] = True
            self.subseq[k] = np.packbits(m, axis=1)

    def rows(self, sentences) -> np.ndarray:
        return np.array([self.index[s] for s in sentences], dtype=np.int64)

    def lcs(self, ia, ib, chunk=100_000) -> np.ndarray:
        out = np.zeros(len(ia), dtype=np.int64)
        for lo in range(0, len(ia), chunk):
            a, b = ia[lo : lo + chunk], ib[lo : lo + chunk]
            for k, bits in self.subseq.items():
                common = (bits[a] & bits[b]).any(axis=1)
                out[lo : lo + chunk][common] = k
        return out

    def bleu(self, ia, ib, chunk=100_000) -> np.ndarray:
        """(P, 4) single-reference BLEU-1..4, same conventions as :func:`bleu_brute`."""
        la, lb = self.lengths[ia].astype(float), self.lengths[ib].astype(float)
        logp = np.zeros((len(ia), 4))
        zero = np.zeros((len(ia), 4), dtype=bool)
        for k in range(1, 5):
            clipped = np.zeros(len(ia))
            for lo in range(0, len(ia), chunk):
                a, b = ia[lo : lo + chunk], ib[lo : lo + chunk]
                clipped[lo : lo + chunk] = np.minimum(self.counts[k][a], self.counts[k][b]).sum(axis=1)
            has = la >= k
            total = np.where(has, la - k + 1, 1.0)
            zero[:, k - 1] = has & (clipped == 0)
            logp[:, k - 1] = np.where(has & (clipped > 0), np.log(np.maximum(clipped, 1) / total), 0.0)
        bp = np.where(la > lb, 1.0, np.exp(1 - lb / la))
        out = np.zeros((len(ia), 4))
        for n in range(1, 5):
            orders = np.minimum(n, la)
            val = bp * np.exp(logp[:, :n].sum(axis=1) / orders)
            out[:, n - 1] = np.where(zero[:, :n].any(axis=1), 0.0, val)
        return out


def relabel(a: tuple, b: tuple) -> tuple[tuple, tuple]:
    """Rename words by first appearance in a then b."""
    names: dict = {}
    ra = tuple(names.setdefault(w, len(names)) for w in a)
    return ra, tuple(names.setdefault(w, len(names)) for w in b)


class SymmetricAlignment:
    """:func:`alignment_max_brute` evaluated once per class of pairs equal up to
    renaming, swapping the two sentences, or reversing both; each of these
    maps matchings to matchings and keeps both the size and the chunk count."""

    def __init__(self):
        self.cache: dict = {}
        self.evaluated = 0

    def __call__(self, a: tuple, b: tuple) -> tuple[int, int]:
        key = min(relabel(a, b), relabel(b, a), relabel(a[::-1], b[::-1]), relabel(b[::-1], a[::-1]))
        hit = self.cache.get(key)
        if hit is None:
            hit = self.cache[key] = alignment_max_brute(*key)
            self.evaluated += 1
        return hit
