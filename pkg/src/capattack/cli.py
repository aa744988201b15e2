"""Command-line driver: ``python -m capattack <command> ...``.

Exit codes: 0 success, 2 usage error, 3 gate violation, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, metrics
from .attack import MODES, AttackConfig
from .attack.baselines import train_class_head
from .captioner import GATE_ACCURACY, Vocabulary, checkpoint, exact_match, infer_greedy, train
from .seeding import stream

log = logging.getLogger("capattack")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


class GateError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _split_rows(manifest: data.DatasetManifest, split: str) -> list[int]:
    rows = [i for i, e in enumerate(manifest.examples) if e.split == split]
    if not rows:
        raise UsageError(f"dataset has no {split!r} examples")
    return rows


def _load_data(path):
    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise UsageError(f"no dataset at {path}")
    return data.load_dataset(p)


def _load_model(path, force: bool):
    if not Path(path).exists():
        raise UsageError(f"no checkpoint at {path}")
    model, meta, _ = checkpoint.load(path)
    if not meta.get("attack_ready", False):
        if not force:
            raise GateError(
                f"{path} is not attack-ready (held-out exact match {meta.get('val_exact_match')} < {GATE_ACCURACY}); "
                "pass --force to attack it anyway"
            )
        log.warning("attacking an ungated checkpoint (%s) because of --force", path)
    return model, meta


def _run_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config", "quiet", "required_opts")}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_json(path, obj)


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    manifest = data.generate(args.seed, args.n_train, args.n_val, args.p_single)
    try:
        path = data.write_dataset(manifest, args.out)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}") from e
    log.info("wrote %d examples to %s", len(manifest.examples), path)
    return EXIT_OK


def cmd_train(args) -> int:
    manifest, images = _load_data(args.data)
    vocab = Vocabulary.build(data.template_words())
    caps = [vocab.encode(e.caption) for e in manifest.examples]
    tr, va = _split_rows(manifest, "train"), _split_rows(manifest, "val")
    model, history = train(
        args.variant,
        vocab,
        images[tr],
        [caps[i] for i in tr],
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    acc = exact_match(model, images[va], [caps[i] for i in va])
    ready = acc >= GATE_ACCURACY
    meta = {
        "run_config": _run_config(args),
        "val_exact_match": acc,
        "gate": GATE_ACCURACY,
        "attack_ready": ready,
        "final_loss": history.final_loss,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, model, meta)
    _write_json(out.with_suffix(".train.json"), {**meta, "history": history.to_dict()})
    msg = "attack-ready" if ready else f"NOT attack-ready (gate {GATE_ACCURACY})"
    log.info("%s: held-out exact match %.3f, %s", out, acc, msg)
    return EXIT_OK


def _targets_from_file(path, manifest, rows, vocab, keyword_mode: bool):
    spec = json.loads(Path(path).read_text())
    index = {manifest.examples[r].id: k for k, r in enumerate(rows)}
    out = []
    for item in spec:
        if item["image"] not in index:
            raise UsageError(f"target file names unknown image {item['image']!r}")
        k = index[item["image"]]
        caption = vocab.encode(item["caption"]) if "caption" in item else ()
        kws = tuple(vocab.id(w) for w in item["keywords"]) if "keywords" in item else None
        if keyword_mode and kws is None:
            raise UsageError("keyword modes need 'keywords' in every target entry")
        if not keyword_mode and not caption:
            raise UsageError("caption modes need 'caption' in every target entry")
        out.append(experiments.Target(k, k, caption, kws))
    return out


def cmd_attack(args) -> int:
    model, _ = _load_model(args.model, args.force)
    manifest, images = _load_data(args.data)
    rows = _split_rows(manifest, args.split)
    pool = images[rows]
    cfg = AttackConfig(
        mode=args.mode,
        c=args.c0,
        eps=args.eps,
        lr=args.lr,
        max_iters=args.iters,
        binary_steps=args.binary_steps,
        refresh_period=args.refresh,
        gate_a=args.gate_a,
        abort_early=not args.no_abort_early,
        log_every=args.log_every,
        batch_size=args.batch_size,
    )
    m = args.keywords if cfg.keyword_mode else 0
    caps = infer_greedy(model, pool)
    attacked = stream(args.seed, "attack/images").permutation(len(rows))[: args.n]
    if args.targets == "self":
        targets = experiments.self_targets(caps, attacked, model.vocab, m)
    elif args.targets == "from-other-images":
        targets = experiments.choose_targets(model.vocab, caps, attacked, stream(args.seed, "attack/targets"), m)
    else:
        targets = _targets_from_file(args.targets, manifest, rows, model.vocab, cfg.keyword_mode)
    if not targets:
        raise UsageError("no attack targets")
    results = experiments.run_targets(model, pool, targets, cfg)

    out = Path(args.out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "adv").mkdir(parents=True, exist_ok=True)
    per_image = {}
    for t, r in zip(targets, results):
        ex = manifest.examples[rows[t.image]]
        rec = r.to_dict(config=None, vocab=model.vocab, include_log=not args.no_trace)
        rec.update(image_id=ex.id, source_id=manifest.examples[rows[t.source]].id, adv_file=f"adv/{ex.id}.npy")
        _write_json(out / "records" / f"{ex.id}.json", rec)
        np.save(out / "adv" / f"{ex.id}.npy", r.adv)
        per_image[ex.id] = metrics.score(model.vocab.decode(r.caption), [model.vocab.decode(t.caption)])
    summary = {
        "run_config": _run_config(args),
        "attack_config": cfg.to_dict(),
        "metric_aggregation": metrics.AGGREGATION,
        "images": [manifest.examples[rows[t.image]].id for t in targets],
        "overall": experiments.summary_row(results),
    }
    if cfg.keyword_mode:
        summary["partial_success"] = experiments.partial_success_table(results, m)
    else:
        summary["failures"] = experiments.failure_table(model, results, args.beam)
    _write_json(out / "summary.json", summary)
    metrics.write_scores_csv(out / "scores.csv", per_image)
    t1 = summary["overall"]
    log.info("%s: %d/%d successful, mean l2 %s", cfg.mode, t1["successes"], t1["n"], t1["mean_l2_success"])
    return EXIT_OK


def cmd_baseline(args) -> int:
    model, _ = _load_model(args.model, args.force)
    manifest, images = _load_data(args.data)
    tr, va = _split_rows(manifest, "train"), _split_rows(manifest, "val")
    labels = np.array([e.label for e in manifest.examples])
    head = train_class_head(model, images[tr], labels[tr], seed=args.seed)
    head_acc = float((head.predict(images[va]) == labels[va]).mean())
    pairs = experiments.baseline_targets(model, head, images[va], labels[va], stream(args.seed, "baseline/targets"), args.n)
    attacks = ("ifgsm", "cw") if args.attack == "both" else (args.attack,)
    kw_cfg = None if args.no_compare else AttackConfig(mode="keyword-logits", max_iters=args.iters)
    report = experiments.baseline_comparison(
        model, head, images[va], pairs, args.eps_inf, args.kappa, args.C, attacks, kw_cfg
    )
    for row in report["rows"].values():
        for p in row.get("per_image", []):
            p["image_id"] = manifest.examples[va[p.pop("row")]].id
    report.update(run_config=_run_config(args), head_val_accuracy=head_acc)
    out = Path(args.out)
    _write_json(out / "baseline.json", report)
    _write_json(out / "class_head.json", head.to_dict())
    for name, row in report["rows"].items():
        log.info("%s: caption success %.3f", name, row["caption_success_rate"])
    return EXIT_OK


def _scan_runs(adv_dir: Path) -> list[Path]:
    if not adv_dir.is_dir():
        raise UsageError(f"{adv_dir} is not a directory")
    runs = sorted(p.parent for p in adv_dir.glob("*/summary.json"))
    if (adv_dir / "summary.json").exists():
        runs.insert(0, adv_dir)
    if not runs:
        raise UsageError(f"no attack runs (summary.json) under {adv_dir}")
    return runs


def cmd_transfer(args) -> int:
    model_a, _ = _load_model(args.model_a, args.force)
    model_b, _ = _load_model(args.model_b, args.force)
    cells: dict[tuple[float, float], dict] = {}
    datasets: dict[str, tuple] = {}
    for run in _scan_runs(Path(args.adv_dir)):
        summary = json.loads((run / "summary.json").read_text())
        cfg = summary["attack_config"]
        if cfg["mode"].startswith("keyword"):
            log.info("skipping keyword run %s", run)
            continue
        dpath = args.data or summary["run_config"]["data"]
        if dpath not in datasets:
            manifest, images = _load_data(dpath)
            datasets[dpath] = ({e.id: i for i, e in enumerate(manifest.examples)}, images)
        index, images = datasets[dpath]
        for image_id in summary["images"]:
            rec = json.loads((run / "records" / f"{image_id}.json").read_text())
            if not rec["success"]:
                continue
            key = (float(rec["c_used"]), float(cfg["eps"]))
            cell = cells.setdefault(key, {"orig": [], "adv": [], "targets": []})
            cell["orig"].append(images[index[image_id]])
            cell["adv"].append(np.load(run / rec["adv_file"]))
            cell["targets"].append(tuple(rec["target"]))
    grid = []
    for (c, eps) in sorted(cells):
        cell = cells[(c, eps)]
        stats = metrics.transfer_stats(model_a, model_b, np.stack(cell["orig"]), np.stack(cell["adv"]), cell["targets"])
        grid.append({"c": c, "eps": eps, **stats.to_dict()})
    if not grid:
        raise UsageError(f"no successful caption-mode adversarial examples under {args.adv_dir}")
    _write_json(Path(args.out) / "transfer.json", {"run_config": _run_config(args), "grid": grid})
    return EXIT_OK


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from e


def cmd_eval(args) -> int:
    pred, refs = _read_lines(args.pred), _read_lines(args.refs)
    if len(pred) != len(refs):
        raise UsageError(f"{args.pred} has {len(pred)} lines but {args.refs} has {len(refs)}")
    if not pred:
        raise UsageError("no captions to score")
    ref_sets = [[r.strip() for r in line.split("|||")] for line in refs]
    mean, per = metrics.score_corpus(pred, ref_sets)
    out = Path(args.out)
    _write_json(out, {"aggregate": mean.to_dict(), "metric_aggregation": metrics.AGGREGATION,
                      "per_line": [p.to_dict() for p in per]})
    metrics.write_scores_csv(out.with_suffix(".csv"), {f"{i:05d}": p for i, p in enumerate(per)})
    print(json.dumps(mean.to_dict(), sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capattack", description=__doc__.splitlines()[0])
    p.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of option defaults; explicit flags win")
        sp.set_defaults(func=func)
        return sp

    g = command("gen-data", cmd_gen_data, "render the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--p-single", type=float, default=0.25)

    t = command("train", cmd_train, "train a captioner and apply the accuracy gate")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=("plain", "attention"), default="plain")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=0.002)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (.json)")

    a = command("attack", cmd_attack, "targeted caption / keyword attacks")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=MODES, default="caption-logits")
    a.add_argument("--targets", default="from-other-images", help="from-other-images, self, or a JSON file")
    a.add_argument("--split", default="val")
    a.add_argument("--n", type=int, default=50)
    a.add_argument("--c0", type=float, default=1.0)
    a.add_argument("--eps", type=float, default=1.0)
    a.add_argument("--lr", type=float, default=0.005)
    a.add_argument("--iters", type=int, default=1000)
    a.add_argument("--binary-steps", type=int, default=5)
    a.add_argument("--keywords", type=int, default=1, help="number of keywords M in keyword modes")
    a.add_argument("--refresh", type=int, default=5, help="inference refresh period T")
    a.add_argument("--gate-a", type=float, default=1e5)
    a.add_argument("--no-abort-early", action="store_true")
    a.add_argument("--log-every", type=int, default=10)
    a.add_argument("--no-trace", action="store_true", help="omit per-iteration logs from records")
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--beam", type=int, default=5)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--force", action="store_true", help="attack a checkpoint that failed the gate")
    a.add_argument("--out", required=True)

    b = command("baseline", cmd_baseline, "classifier-only I-FGSM / C&W baselines")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--attack", choices=("ifgsm", "cw", "both"), default="both")
    b.add_argument("--eps-inf", type=float, default=0.3)
    b.add_argument("--kappa", type=float, default=10.0)
    b.add_argument("--C", type=float, default=100.0)
    b.add_argument("--n", type=int, default=50)
    b.add_argument("--iters", type=int, default=1000, help="iterations of the 1-keyword captioner attack used for comparison")
    b.add_argument("--no-compare", action="store_true", help="skip the 1-keyword comparison attack")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--force", action="store_true")
    b.add_argument("--out", required=True)

    x = command("transfer", cmd_transfer, "score model-A adversarial examples on model B")
    x.add_argument("--model-a", required=True)
    x.add_argument("--model-b", required=True)
    x.add_argument("--adv-dir", required=True)
    x.add_argument("--data", help="override the dataset recorded in each run")
    x.add_argument("--force", action="store_true")
    x.add_argument("--out", required=True)

    e = command("eval", cmd_eval, "score caption files (one caption per line; refs split by '|||')")
    e.add_argument("--pred", required=True)
    e.add_argument("--refs", required=True)
    e.add_argument("--out", required=True)

    # required options are checked after config-file defaults are merged
    for sp in sub.choices.values():
        req = [a.dest for a in sp._actions if a.required]
        for a in sp._actions:
            a.required = False
        sp.set_defaults(required_opts=req)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = {k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()}
        except (OSError, ValueError, AttributeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        unknown = set(overrides) - {a.dest for a in sub._actions}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    missing = [d for d in args.required_opts if getattr(args, d) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s) " + ", ".join("--" + d.replace("_", "-") for d in missing))
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except GateError as e:
        log.error("%s", e)
        return EXIT_GATE
    except Exception as e:  # runtime failure: report and map to the exit code
        log.exception("runtime failure: %s", e)
        return EXIT_RUNTIME
