"""Experiment drivers and table builders shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import metrics
from .attack import AttackConfig, AttackResult, attack_batch, content_words
from .attack.baselines import ClassHead, cw_classifier, ifgsm_classifier
from .captioner import CaptionerModel, infer_beam, infer_greedy
from .captioner.vocab import END, Caption
from .data import COLORS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Target:
    image: int  # row of the attacked image
    source: int  # row of the image whose caption supplied the target
    caption: Caption
    keywords: tuple[int, ...] | None = None

    def value(self, keyword_mode: bool) -> tuple[int, ...]:
        return self.keywords if keyword_mode else self.caption


def choose_targets(
    vocab,
    captions: Sequence[Caption],
    attacked: Sequence[int],
    rng: np.random.Generator,
    n_keywords: int = 0,
) -> list[Target]:
    """A target per attacked row, taken from the greedy caption of another row.

    Caption targets must differ from the attacked image's own caption.
    Keyword targets are content words of the source caption that the attacked
    image's own caption lacks, so no attack is satisfied before it starts.
    Captions cut off at the length limit (no END) are never targets.
    Rows with no usable source are skipped.
    """
    out = []
    n = len(captions)
    for i in attacked:
        own = set(captions[i])
        found = None
        for j in rng.permutation(n):
            if j == i or captions[j] == captions[i] or captions[j][-1] != END:
                continue
            if n_keywords == 0:
                found = Target(int(i), int(j), tuple(captions[j]))
                break
            fresh = [k for k in content_words(vocab, captions[j]) if k not in own]
            if len(fresh) >= n_keywords:
                pick = np.sort(rng.choice(len(fresh), size=n_keywords, replace=False))
                found = Target(int(i), int(j), tuple(captions[j]), tuple(fresh[p] for p in pick))
                break
        if found is None:
            log.warning("no usable target for row %d", i)
            continue
        out.append(found)
    return out


def self_targets(captions: Sequence[Caption], attacked: Sequence[int], vocab, n_keywords: int = 0) -> list[Target]:
    """Each image's own caption (or its first content words) as the target.

    Rows whose caption never ends, or has too few content words, are skipped.
    """
    out = []
    for i in attacked:
        if captions[i][-1] != END:
            continue
        kw = tuple(content_words(vocab, captions[i])[:n_keywords]) if n_keywords else None
        if kw is not None and len(kw) < n_keywords:
            continue
        out.append(Target(int(i), int(i), tuple(captions[i]), kw))
    return out


def run_targets(model: CaptionerModel, images: np.ndarray, targets: Sequence[Target], cfg: AttackConfig, search=True):
    rows = [t.image for t in targets]
    return attack_batch(model, images[rows], [t.value(cfg.keyword_mode) for t in targets], cfg, search=search)


# ------------------------------------------------------------------ tables


def summary_row(results: Sequence[AttackResult]) -> dict:
    """Success rate and mean l2 over successful examples."""
    wins = [r.l2 for r in results if r.success]
    return {
        "n": len(results),
        "successes": len(wins),
        "success_rate": len(wins) / len(results) if results else 0.0,
        "mean_l2_success": float(np.mean(wins)) if wins else None,
    }


def failure_table(model: CaptionerModel, results: Sequence[AttackResult], beam_width: int = 5) -> list[dict]:
    """Failed caption attacks per tried c: mean l2 and scores of the target
    against the top-``beam_width`` beam captions of the adversarial image."""
    by_c: dict[float, list] = defaultdict(list)
    for r in results:
        if r.success:
            continue
        target = model.vocab.decode(r.target)
        for run in r.trace:
            refs = [model.vocab.decode(h.tokens) for h in infer_beam(model, run.adv, beam_width)]
            by_c[run.c].append((run.l2, metrics.score(target, refs)))
    rows = []
    for c in sorted(by_c):
        entries = by_c[c]
        row = {"c": c, "n": len(entries), "mean_l2": float(np.mean([e[0] for e in entries]))}
        row.update(metrics.average(e[1] for e in entries).to_dict())
        rows.append(row)
    return rows


def partial_success_table(results: Sequence[AttackResult], n_keywords: int) -> list[dict]:
    """M' statistics per tried c over images whose attack failed overall."""
    by_c: dict[float, list] = defaultdict(list)
    for r in results:
        if r.success:
            continue
        for run in r.trace:
            by_c[run.c].append((run.l2, run.keywords_found))
    rows = []
    for c in sorted(by_c):
        l2s = np.array([e[0] for e in by_c[c]])
        m = np.array([e[1] for e in by_c[c]])
        row = {"c": c, "n": len(m), "mean_l2": float(l2s.mean()), "mean_m_prime": float(m.mean())}
        row["m_prime_ge_1"] = float((m >= 1).mean())
        for k in range(1, n_keywords):
            row[f"m_prime_eq_{k}"] = float((m == k).mean())
        rows.append(row)
    return rows


# ------------------------------------------------------------- transfer


def transfer_cell(model_a, model_b, images, targets: Sequence[Target], results: Sequence[AttackResult]) -> dict:
    ok = [k for k, r in enumerate(results) if r.success]
    row = {"n_attacked": len(results), "n_success": len(ok)}
    if not ok:
        return row
    orig = images[[targets[k].image for k in ok]]
    adv = np.stack([results[k].adv for k in ok])
    stats = metrics.transfer_stats(model_a, model_b, orig, adv, [targets[k].caption for k in ok])
    row.update(stats.to_dict())
    return row


def transfer_runs(model_a, images, targets, cfg: AttackConfig, cs=(10.0, 100.0, 1000.0), eps=1.0):
    """Yield (c, results) for a fixed-c attack on A at each c, in increasing c."""
    for c in sorted(cs):
        run_cfg = replace(cfg, c=float(c), eps=float(eps), binary_steps=1)
        yield float(c), run_targets(model_a, images, targets, run_cfg, search=False)


def transfer_grid(model_a, model_b, images, targets, cfg: AttackConfig, cs=(10.0, 100.0, 1000.0), eps=1.0) -> list[dict]:
    """Fixed-c attacks on A at each c, successful ones scored on B; rows sorted by c."""
    grid = []
    for c, results in transfer_runs(model_a, images, targets, cfg, cs, eps):
        row = {"c": c, "eps": float(eps)}
        row.update(transfer_cell(model_a, model_b, images, targets, results))
        grid.append(row)
        log.info("transfer c=%g: %d/%d successful on A", c, row["n_success"], row["n_attacked"])
    return grid


# ------------------------------------------------------------ baselines


def baseline_targets(model: CaptionerModel, head: ClassHead, images, labels, rng, n: int) -> list[tuple[int, int]]:
    """(row, target class) pairs: rows the head classifies correctly, target
    colour absent from the benign caption."""
    pred = head.predict(images)
    caps = infer_greedy(model, images)
    out = []
    for i in rng.permutation(len(images)):
        if pred[i] != labels[i]:
            continue
        words = set(model.vocab.decode(caps[i]).split())
        options = [k for k in range(head.n_classes) if k != labels[i] and COLORS[k] not in words]
        if not options:
            continue
        out.append((int(i), int(options[rng.integers(len(options))])))
        if len(out) == n:
            break
    return out


def _caption_hits(model, adv, target_classes) -> list[bool]:
    caps = infer_greedy(model, adv)
    return [COLORS[t] in model.vocab.decode(c).split() for c, t in zip(caps, target_classes)]


def baseline_comparison(
    model: CaptionerModel,
    head: ClassHead,
    images: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    eps_inf: float = 0.3,
    kappa: float = 10.0,
    C: float = 100.0,
    attacks: Sequence[str] = ("ifgsm", "cw"),
    keyword_cfg: AttackConfig | None = None,
) -> dict:
    rows = [p[0] for p in pairs]
    tcls = np.array([p[1] for p in pairs], dtype=np.int64)
    x = images[rows]
    out: dict = {"n": len(pairs), "rows": {}}
    for name in attacks:
        if name == "ifgsm":
            adv = ifgsm_classifier(head, x, tcls, eps_inf=eps_inf)
        elif name == "cw":
            adv, _ = cw_classifier(head, x, tcls, kappa=kappa, C=C)
        else:
            raise ValueError(f"unknown baseline {name!r}")
        cls_ok = head.predict(adv) == tcls
        cap_ok = _caption_hits(model, adv, tcls)
        d = (adv - x).reshape(len(x), -1)
        out["rows"][name] = {
            "classifier_success_rate": float(cls_ok.mean()),
            "caption_success_rate": float(np.mean(cap_ok)),
            "mean_l2": float(np.linalg.norm(d, axis=1).mean()),
            "max_linf": float(np.abs(d).max()),
            "per_image": [{"row": r, "target_class": int(t), "classifier": bool(a), "caption": bool(b)}
                          for r, t, a, b in zip(rows, tcls, cls_ok, cap_ok)],
        }
    if keyword_cfg is not None:
        kw = [(model.vocab.id(COLORS[t]),) for t in tcls]
        res = attack_batch(model, x, kw, replace(keyword_cfg, mode="keyword-logits"))
        out["rows"]["captioner-1kw"] = {
            "caption_success_rate": float(np.mean([r.success for r in res])),
            "mean_l2": float(np.mean([r.l2 for r in res])),
            **summary_row(res),
        }
    return out
