"""The attack loop: ADAM in tanh space, binary search over c.

Images are attacked as a batch. Every row has its own c, its own ADAM
moments and its own early-abort decision, so a batch of B rows gives the same
per-row result as B separate runs (rows never interact; the summed objective
has a block-diagonal gradient).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, Tape, Tensor, adam_step, backward
from ..captioner.decode import infer_greedy
from ..captioner.model import CaptionerModel, pad_captions
from ..captioner.vocab import Caption, check_caption
from . import losses
from .box import from_tanh_space, to_tanh_space
from .keywords import check_keywords, count_keywords

log = logging.getLogger(__name__)

MODES = ("caption-logits", "caption-logprob", "keyword-logits", "keyword-logprob")


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "caption-logits"
    c: float = 1.0
    eps: float = 1.0
    lr: float = 0.005
    max_iters: int = 1000
    binary_steps: int = 5
    refresh_period: int = 5
    gate_a: float = losses.GATE_A
    abort_early: bool = True
    log_every: int = 10
    batch_size: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.c > 0:
            raise ValueError("c must be > 0")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.max_iters < 1 or self.binary_steps < 1 or self.refresh_period < 1:
            raise ValueError("max_iters, binary_steps and refresh_period must be >= 1")
        if self.gate_a < 1e3:
            raise ValueError("gate constant A must dwarf the logits (>= 1e3)")

    @property
    def keyword_mode(self) -> bool:
        return self.mode.startswith("keyword")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class RunOutcome:
    """One fixed-c run on one image."""

    c: float
    success: bool
    l2: float  # of the kept iterate: best success, or the final iterate on failure
    adv: np.ndarray
    caption: Caption
    iteration: int  # iteration of the best success, or the number of iterations run
    iterations_run: int
    keywords_found: int | None = None
    log: list = field(default_factory=list)  # (iter, objective, loss, l2 squared)

    def summary(self) -> dict:
        return {
            "c": self.c,
            "success": self.success,
            "l2": self.l2,
            "caption": list(self.caption),
            "iteration": self.iteration,
            "iterations_run": self.iterations_run,
            "keywords_found": self.keywords_found,
        }


@dataclass
class AttackResult:
    mode: str
    target: tuple[int, ...]
    success: bool
    adv: np.ndarray
    delta: np.ndarray
    l2: float
    caption: Caption
    c_used: float
    iterations_used: int
    trace: list[RunOutcome]

    @property
    def keywords_found(self) -> int | None:
        if not self.mode.startswith("keyword"):
            return None
        return count_keywords(self.caption, self.target)

    def to_dict(self, config: AttackConfig | None = None, vocab=None, include_log: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "target": list(self.target),
            "success": self.success,
            "l2": self.l2,
            "caption": list(self.caption),
            "c_used": self.c_used,
            "iterations_used": self.iterations_used,
            "keywords_found": self.keywords_found,
            "per_c": [r.summary() for r in self.trace],
        }
        if vocab is not None:
            d["caption_text"] = vocab.decode(self.caption)
            d["target_text"] = vocab.decode(self.target)
            for r, s in zip(self.trace, d["per_c"]):
                s["caption_text"] = vocab.decode(r.caption)
        if config is not None:
            d["config"] = config.to_dict()
        if include_log:
            d["log"] = [{"c": r.c, "iterations": [list(e) for e in r.log]} for r in self.trace]
        return d


# ------------------------------------------------------------------ core


def _prepare_targets(model: CaptionerModel, targets: Sequence, cfg: AttackConfig):
    if cfg.keyword_mode:
        ks = [check_keywords(k, model.vocab) for k in targets]
        if len({len(k) for k in ks}) != 1:
            raise ValueError("all keyword sets in a batch must have the same size")
        return ks
    out = []
    for s in targets:
        s = tuple(int(i) for i in s)
        check_caption(s, model.vocab_size, model.config.max_len)
        out.append(s)
    return out


def _row_losses(model, x: Tensor, rows: np.ndarray, cfg, targets, forced) -> tuple[Tensor, np.ndarray | None]:
    """Per-row loss (len(rows),); for caption modes also a success flag per row."""
    if cfg.keyword_mode:
        inputs, _, mask = pad_captions([forced[i] for i in rows])
        z = model.teacher_forced_logits(x, inputs)
        kw = np.array([targets[i] for i in rows], dtype=np.int64)
        if cfg.mode == "keyword-logits":
            return losses.logits_keyword_terms(z, kw, mask, cfg.eps, cfg.gate_a), None
        return losses.logprob_keyword_terms(z, kw, mask), None
    inputs, tgt, mask = pad_captions([targets[i] for i in rows])
    z = model.teacher_forced_logits(x, inputs)
    # teacher-forced argmax equals greedy decoding exactly when every step hits the target
    hit = ((np.argmax(z.data, axis=-1) == tgt) | ~mask).all(axis=1)
    if cfg.mode == "caption-logits":
        return losses.logits_caption_terms(z, tgt, mask, cfg.eps), hit
    return losses.logprob_caption_terms(z, tgt, mask), hit


def attack_fixed_c(model: CaptionerModel, images: np.ndarray, targets: Sequence, c, cfg: AttackConfig) -> list[RunOutcome]:
    """One ADAM run from w = 0 per image, with per-image ``c`` (scalar or (B,))."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b = len(images)
    targets = _prepare_targets(model, targets, cfg)
    if len(targets) != b:
        raise ValueError(f"{b} images but {len(targets)} targets")
    cvec = np.broadcast_to(np.asarray(c, dtype=np.float64), (b,)).copy()

    y = to_tanh_space(images)
    x0 = np.tanh(y)
    w = np.zeros_like(y)
    m, v = np.zeros_like(y), np.zeros_like(y)
    step = 0
    active = np.ones(b, dtype=bool)
    prev_obj = np.full(b, np.inf)
    check_every = max(cfg.max_iters // 10, 1)

    best_l2sq = np.full(b, np.inf)
    best_adv = x0.copy()
    best_cap: list[Caption | None] = [None] * b
    best_it = np.zeros(b, dtype=np.int64)
    final_adv = x0.copy()
    iters_run = np.zeros(b, dtype=np.int64)
    forced: list[Caption] = [()] * b
    logs: list[list] = [[] for _ in range(b)]

    for it in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        if cfg.keyword_mode and it % cfg.refresh_period == 0:
            cur = from_tanh_space(w[rows], y[rows])
            for i, cap in zip(rows, infer_greedy(model, cur)):
                forced[i] = cap
            hit = np.array([all(k in forced[i] for k in targets[i]) for i in rows])
        with Tape() as tape:
            wt = Tensor(w[rows], requires_grad=True)
            x = from_tanh_space(wt, y[rows])
            dist = ad.l2_norm_sq(ad.sub(x, Tensor(x0[rows])), axis=(1, 2, 3))
            loss, cap_hit = _row_losses(model, x, rows, cfg, targets, forced)
            obj = ad.add(ad.mul(Tensor(cvec[rows]), loss), dist)
            total = ad.sum(obj)
        if not cfg.keyword_mode:
            hit = cap_hit
        elif it % cfg.refresh_period != 0:
            hit = np.zeros(rows.size, dtype=bool)
        d2, lv, ov = dist.data, loss.data, obj.data
        if not np.all(np.isfinite(ov)):
            raise FloatingPointError(f"non-finite attack objective at iteration {it}")
        final_adv[rows] = x.data
        iters_run[rows] = it + 1
        for r, i in enumerate(rows):
            if hit[r] and d2[r] < best_l2sq[i]:
                best_l2sq[i] = d2[r]
                best_adv[i] = x.data[r]
                best_cap[i] = forced[i] if cfg.keyword_mode else targets[i]
                best_it[i] = it
            if it % cfg.log_every == 0 or it == cfg.max_iters - 1:
                logs[i].append((it, float(ov[r]), float(lv[r]), float(d2[r])))
        keep = np.ones(rows.size, dtype=bool)
        if cfg.abort_early and it > 0 and it % check_every == 0:
            stalled = ov > prev_obj[rows] - 1e-4 * np.abs(prev_obj[rows])
            keep = ~stalled
            active[rows[stalled]] = False
            prev_obj[rows] = ov
        elif it == 0:
            prev_obj[rows] = ov
        if it == cfg.max_iters - 1 or not keep.any():
            continue
        g = backward(tape, total).of(wt)
        upd = rows[keep]
        step += 1
        st = AdamState([m[upd]], [v[upd]], step=step - 1)
        (w_new,), st = adam_step([w[upd]], [g[keep]], st, cfg.lr)
        w[upd], m[upd], v[upd] = w_new, st.m[0], st.v[0]

    failed = [i for i in range(b) if best_cap[i] is None]
    final_caps = dict(zip(failed, infer_greedy(model, final_adv[failed]))) if failed else {}
    out = []
    for i in range(b):
        ok = best_cap[i] is not None
        adv = best_adv[i] if ok else final_adv[i]
        cap = best_cap[i] if ok else final_caps[i]
        l2 = math.sqrt(best_l2sq[i]) if ok else float(np.sqrt(((final_adv[i] - x0[i]) ** 2).sum()))
        out.append(
            RunOutcome(
                c=float(cvec[i]),
                success=ok,
                l2=l2,
                adv=adv.copy(),
                caption=tuple(cap),
                iteration=int(best_it[i]) if ok else int(iters_run[i]),
                iterations_run=int(iters_run[i]),
                keywords_found=count_keywords(cap, targets[i]) if cfg.keyword_mode else None,
                log=logs[i],
            )
        )
    return out


def _finish(images: np.ndarray, targets, cfg: AttackConfig, runs: list[list[RunOutcome]]) -> list[AttackResult]:
    results = []
    for i, trace in enumerate(runs):
        wins = [r for r in trace if r.success]
        pick = min(wins, key=lambda r: r.l2) if wins else trace[-1]
        delta = pick.adv - images[i]
        results.append(
            AttackResult(
                mode=cfg.mode,
                target=tuple(int(t) for t in targets[i]),
                success=pick.success,
                adv=pick.adv,
                delta=delta,
                l2=float(np.sqrt((delta**2).sum())),
                caption=pick.caption,
                c_used=pick.c,
                iterations_used=pick.iteration,
                trace=list(trace),
            )
        )
    return results


def next_c(c: float, lo: float, hi: float) -> float:
    """Escalate x10 until a success, step /10 while no failure, else bisect."""
    if math.isinf(hi):
        return c * 10.0
    if lo == 0.0:
        return c / 10.0
    return (lo + hi) / 2.0


AttackFn = Callable[[CaptionerModel, np.ndarray, Sequence, np.ndarray, AttackConfig], list[RunOutcome]]


def binary_search_c(model, images, targets, cfg: AttackConfig, attack_fn: AttackFn = attack_fixed_c) -> list[AttackResult]:
    """``cfg.binary_steps`` runs per image starting from ``cfg.c``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b = len(images)
    c = np.full(b, float(cfg.c))
    lo, hi = np.zeros(b), np.full(b, np.inf)
    runs: list[list[RunOutcome]] = [[] for _ in range(b)]
    for step in range(cfg.binary_steps):
        outcomes = attack_fn(model, images, targets, c.copy(), cfg)
        for i, o in enumerate(outcomes):
            runs[i].append(o)
            if o.success:
                hi[i] = min(hi[i], c[i])
            else:
                lo[i] = max(lo[i], c[i])
        log.info(
            "binary step %d/%d: %d/%d succeeded", step + 1, cfg.binary_steps, sum(o.success for o in outcomes), b
        )
        c = np.array([next_c(c[i], lo[i], hi[i]) for i in range(b)])
    return _finish(images, targets, cfg, runs)


def run_attack(model, image, target, cfg: AttackConfig) -> AttackResult:
    """A single fixed-c run (``cfg.c``) on one image."""
    img = np.asarray(image, dtype=np.float64)
    imgs = img[None] if img.ndim == 3 else img
    (o,) = attack_fixed_c(model, imgs, [target], cfg.c, cfg)
    return _finish(imgs, [target], cfg, [[o]])[0]


def attack_batch(model, images, targets, cfg: AttackConfig, search: bool = True) -> list[AttackResult]:
    """Attack many images in chunks of ``cfg.batch_size``; results keep input order."""
    images = np.asarray(images, dtype=np.float64)
    out: list[AttackResult] = []
    for s in range(0, len(images), cfg.batch_size):
        imgs, tg = images[s : s + cfg.batch_size], list(targets[s : s + cfg.batch_size])
        if search:
            out.extend(binary_search_c(model, imgs, tg, cfg))
        else:
            runs = [[o] for o in attack_fixed_c(model, imgs, tg, cfg.c, cfg)]
            out.extend(_finish(imgs, tg, cfg, runs))
    return out
