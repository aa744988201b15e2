"""Dense tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active (``with Tape() as tape:``) and
that touch at least one tensor with ``requires_grad=True`` are appended to the
tape. :func:`backward` walks the tape in exact reverse order.

All data is float64. Elementwise binary ops accept either equal shapes or a
scalar operand; nothing else broadcasts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "finite_diff_check",
    "AdamState",
    "adam_step",
]


class ShapeError(ValueError):
    pass


_node_ids = itertools.count()
_active_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class Op:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops."""

    def __init__(self):
        self.ops: list[Op] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.pop()

    def __len__(self) -> int:
        return len(self.ops)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(out_data)
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].ops.append(Op(name, out, tuple(inputs), vjp))
    return out


class Gradients(dict):
    """Gradient map keyed by node id."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t.node)
        return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, root: Tensor) -> Gradients:
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads = Gradients()
    grads[root.node] = np.ones_like(root.data)
    for op in reversed(tape.ops):
        g = grads.get(op.out.node)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.node)
            grads[inp.node] = gi if prev is None else prev + gi
    # leaves on the tape that the root never reached still get an entry
    for op in tape.ops:
        for inp in op.inputs:
            if inp.requires_grad and inp.node not in grads:
                grads[inp.node] = np.zeros_like(inp.data)
    return grads


# ---------------------------------------------------------------- elementwise


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # the kink itself belongs to the zero branch
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``. ``mask`` is constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    for t in (a, b):
        if t.data.ndim != 0 and t.shape != m.shape:
            raise ShapeError(f"where: operand {t.shape} vs mask {m.shape}")
    return _emit(
        "where",
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unscalar(np.where(m, g, 0.0), a), _unscalar(np.where(m, 0.0, g), b)),
    )


# ------------------------------------------------------------------ reductions


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def l2_norm_sq(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    shape = a.shape
    out = (ad * ad).sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (2.0 * ad * g,)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        return (2.0 * ad * np.expand_dims(g, axes),)

    return _emit("l2_norm_sq", out, (a,), vjp)


def max_over_axis(a, axis: int = -1) -> Tensor:
    """Max along ``axis``; ties route the gradient to the first index."""
    a = _as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _emit("max_over_axis", out, (a,), vjp)


def min_over_axis(a, axis: int = -1) -> Tensor:
    return neg(max_over_axis(neg(a), axis=axis))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (a,), vjp)


def log_sum_exp(a) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    p = e / s
    return _emit("log_sum_exp", out, (a,), lambda g: (np.expand_dims(g, -1) * p,))


# ----------------------------------------------------------- shape & indexing


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing only."""
    a = _as_tensor(a)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] += g
        return (ga,)

    return _emit("getitem", a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from err
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"stack: {[t.shape for t in ts]}") from err
    n = len(ts)
    return _emit(
        "stack",
        out,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def repeat_axis(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times (explicit broadcast)."""
    a = _as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _emit("repeat_axis", out, (a,), lambda g: (g.sum(axis=axis),))


def take_last(a, idx) -> Tensor:
    """``out[...] = a[..., idx[...]]``."""
    a = _as_tensor(a)
    ix = np.asarray(idx, dtype=np.int64)
    if ix.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: index {ix.shape} vs tensor {a.shape}")
    if ix.size and (ix.min() < 0 or ix.max() >= a.shape[-1]):
        raise IndexError(f"take_last: index out of range for size {a.shape[-1]}")
    ie = ix[..., None]
    out = np.take_along_axis(a.data, ie, axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ie, g[..., None], axis=-1)
        return (ga,)

    return _emit("take_last", out, (a,), vjp)


def embed_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ix = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ix.size and (ix.min() < 0 or ix.max() >= table.shape[0]):
        raise IndexError(f"embed_lookup: id out of range for {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ix.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embed_lookup", table.data[ix], (table,), vjp)


# -------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for x (n, i), w (i, o), b (o,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    return _emit(
        "linear",
        xd @ wd + b.data,
        (x, w, b),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution. ``kernel`` is (kh, kw, c_in, c_out)."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: x {x.shape}, kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")
    n, h, w_, c = x.shape
    kh, kw, _, co = kernel.shape
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (w_ + 2 * p - kw) // s + 1
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, kh, kw, c), strides=(sn, sh * s, sw * s, sh, sw, sc), writeable=False
    )
    cols = windows.reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, co)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, co)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, co)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p : p + h, p : p + w_, :] if p else gxp
        return (gx, gk, gb)

    return _emit("conv2d", out, (x, kernel, bias), vjp)


def lstm_cell(x, h, c, w_x, w_h, b) -> Tensor:
    """One LSTM step; returns ``concat([h_new, c_new], axis=1)``.

    Gate order in the 4H pre-activation: input, forget, output, candidate.
    """
    x, h, c, w_x, w_h, b = (_as_tensor(t) for t in (x, h, c, w_x, w_h, b))
    hs = h.shape[1]
    if (
        x.data.ndim != 2
        or w_x.shape != (x.shape[1], 4 * hs)
        or w_h.shape != (hs, 4 * hs)
        or b.shape != (4 * hs,)
        or c.shape != h.shape
        or x.shape[0] != h.shape[0]
    ):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}"
        )
    xd, hd, cd = x.data, h.data, c.data
    pre = xd @ w_x.data + hd @ w_h.data + b.data
    i = _sigmoid(pre[:, :hs])
    f = _sigmoid(pre[:, hs : 2 * hs])
    o = _sigmoid(pre[:, 2 * hs : 3 * hs])
    u = np.tanh(pre[:, 3 * hs :])
    c_new = f * cd + i * u
    tc = np.tanh(c_new)
    h_new = o * tc

    def vjp(g):
        gh, gc = g[:, :hs], g[:, hs:]
        gc_tot = gc + gh * o * (1.0 - tc * tc)
        gpre = np.concatenate(
            [
                gc_tot * u * i * (1.0 - i),
                gc_tot * cd * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                gc_tot * i * (1.0 - u * u),
            ],
            axis=1,
        )
        return (
            gpre @ w_x.data.T,
            gpre @ w_h.data.T,
            gc_tot * f,
            xd.T @ gpre,
            hd.T @ gpre,
            gpre.sum(axis=0),
        )

    return _emit("lstm_cell", np.concatenate([h_new, c_new], axis=1), (x, h, c, w_x, w_h, b), vjp)


# ------------------------------------------------------------- grad checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
    skip_kinks: bool = False,
    order: int = 2,
    report: dict | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``coords`` restricts the comparison to flat indices of ``x``. With
    ``skip_kinks`` a coordinate whose one-sided differences disagree by more
    than 1% (a kink inside [x-h, x+h]) is dropped from the comparison.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so loses less to cancellation on small gradients; kinks are then
    looked for in [x-2h, x+2h]. ``report``, if given, receives the number
    of coordinates compared and skipped.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        out = f(xt)
    grad = backward(tape, out).of(xt).reshape(-1)

    def value(arr):
        return float(np.asarray(f(Tensor(arr)).data).reshape(-1)[0])

    flat = x.reshape(-1)

    def at(i, step):
        y = flat.copy()
        y[i] += step
        return value(y.reshape(x.shape))

    f0 = value(x) if skip_kinks else 0.0
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    compared = skipped = 0
    for i in idxs:
        fp, fm = at(i, h), at(i, -h)
        if order == 4:
            fp2, fm2 = at(i, 2 * h), at(i, -2 * h)
        if skip_kinks:
            reach = h if order == 2 else 2 * h
            hi, lo = (fp, fm) if order == 2 else (fp2, fm2)
            fwd, bwd = (hi - f0) / reach, (f0 - lo) / reach
            kink = abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-6)
            if order == 4 and not kink:
                # smooth f: the h and 2h central estimates agree to O(h^2)
                d1, d2 = (fp - fm) / (2 * h), (fp2 - fm2) / (4 * h)
                kink = abs(d1 - d2) > 1e-6 * max(abs(d1), abs(d2)) + 1e-10
            if kink:
                skipped += 1
                continue
        if order == 2:
            num = (fp - fm) / (2 * h)
        else:
            num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
        worst = max(worst, abs(num - grad[i]) / (abs(grad[i]) + 1e-8))
        compared += 1
    if report is not None:
        report.update(compared=compared, skipped=skipped)
    return worst


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected ADAM. Returns new parameter arrays; ``state`` is updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.shape} vs grad {g.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1**t)
        v_hat = state.v[k] / (1 - b2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state
