"""JSON checkpoints: metadata plus every weight as nested float lists.

Python's float repr is the shortest string that round-trips, so weights come
back bit-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import CaptionerModel, ModelConfig
from .vocab import Vocabulary

FORMAT = "capattack-checkpoint/1"


def to_document(model: CaptionerModel, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> dict:
    weights = {k: {"shape": list(v.shape), "data": v.tolist()} for k, v in sorted(model.params.items())}
    doc = {
        "format": FORMAT,
        "variant": model.variant,
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.words),
        "meta": meta or {},
        "weights": weights,
    }
    if extra:
        doc["extra"] = {k: {"shape": list(v.shape), "data": v.tolist()} for k, v in sorted(extra.items())}
    return doc


def save(path: str | Path, model: CaptionerModel, meta: dict | None = None, extra=None) -> None:
    Path(path).write_text(json.dumps(to_document(model, meta, extra), sort_keys=True))


def _arrays(section: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in section.items()}


def from_document(doc: dict) -> tuple[CaptionerModel, dict, dict[str, np.ndarray]]:
    if doc.get("format") != FORMAT:
        raise ValueError(f"not a checkpoint (format={doc.get('format')!r})")
    cfg = ModelConfig(**doc["config"])
    vocab = Vocabulary(tuple(doc["vocab"]))
    model = CaptionerModel(cfg, vocab, _arrays(doc["weights"]))
    return model, doc.get("meta", {}), _arrays(doc.get("extra", {}))


def load(path: str | Path) -> tuple[CaptionerModel, dict, dict[str, np.ndarray]]:
    return from_document(json.loads(Path(path).read_text()))
