"""Change of variables that keeps images inside the [-1, 1] box."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

CLIP = 1e-6


def to_tanh_space(image) -> np.ndarray:
    """y = arctanh(I) with I clipped to [-1 + 1e-6, 1 - 1e-6]."""
    return np.arctanh(np.clip(np.asarray(image, dtype=np.float64), -1 + CLIP, 1 - CLIP))


def from_tanh_space(w, y):
    """tanh(w + y); differentiable when ``w`` is a Tensor."""
    if isinstance(w, Tensor):
        return ad.tanh(ad.add(w, Tensor(np.asarray(y))))
    return np.tanh(np.asarray(w) + y)
