"""Dense float32 tensors with a tape-based reverse-mode autodiff.

Operations record onto the innermost active :class:`Tape`. Outside of a tape
nothing is recorded, which is how rollouts run forward passes cheaply::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)

Leading batch dimensions are supported by every op that the model needs.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DTYPE: type = np.float32
_TAPES: list["Tape"] = []
_UIDS = itertools.count()


class NumericError(ArithmeticError):
    """A NaN/Inf appeared where the contract requires finite values."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.uid = next(_UIDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.uid for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.uid


@dataclass
class Tape:
    """Ordered record of differentiable operations (topological by construction)."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def leaves(self) -> list[Tensor]:
        produced = {n.output.uid for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and t.uid not in produced and t.uid not in seen:
                    seen[t.uid] = t
        return list(seen.values())


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], bw, op: str) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(inputs, out, bw, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is exactly zero outside the open interval."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


# ---------------------------------------------------------------- reductions & shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((table.shape[0], flat.size), dtype=g.dtype)
        onehot[flat, np.arange(flat.size)] = 1.0
        return (onehot @ g.reshape(-1, table.shape[1]),)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis, for any number of leading dims."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (w.shape[1],)), inputs, bw, "linear")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 2-D convolution.

    x: [B, H, W, Cin], w: [k, k, Cin, Cout], b: [Cout] -> [B, Ho, Wo, Cout]
    """
    k = w.shape[0]
    bsz, hgt, wid, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (hgt + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    cols = np.empty((bsz, ho, wo, k, k, cin), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols2 = cols.reshape(bsz * ho * wo, k * k * cin)
    w2 = w.data.reshape(k * k * cin, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(bsz, ho, wo, k, k, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + hgt, padding:padding + wid, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(bsz, ho, wo, cout), inputs, bw, "conv2d")


# ---------------------------------------------------------------- normalisation & softmax


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot L2-normalise a zero-norm row")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


MASK_FILL = -1e9


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``.

    q: [..., n, d_k], k: [..., m, d_k], v: [..., m, d_v]; ``mask`` is a boolean
    array broadcastable to [..., n, m] where True marks an allowed key.
    Returns (output, weights).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask leaves a query row with no keys")
        scores = scores + Tensor(np.where(mask, 0.0, MASK_FILL))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every requires_grad leaf on ``tape``.

    Grads are overwritten, not accumulated. Leaves (and any extra ``params``)
    that no path connects to ``loss`` receive zeros.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.uid)
            grads[inp.uid] = gi if prev is None else prev + gi
    targets = {t.uid: t for t in tape.leaves()}
    for p in params:
        if p.requires_grad:
            targets.setdefault(p.uid, p)
    for uid, t in targets.items():
        g = grads.get(uid)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               numeric_dtype=np.float64) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds its forward pass from ``params`` each call. The analytic pass
    runs at float32; the finite-difference oracle runs at ``numeric_dtype``.
    Error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: f produced a non-finite value")
    backward(loss, tape, params)
    analytic = [p.grad.astype(np.float64).copy() for p in params]

    originals = [p.data for p in params]
    worst = 0.0
    try:
        with precision(numeric_dtype), no_grad():
            for p in params:
                p.data = p.data.astype(numeric_dtype)
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    x0 = flat[i]
                    flat[i] = x0 + h
                    fp = float(f().data)
                    flat[i] = x0 - h
                    fm = float(f().data)
                    flat[i] = x0
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise NumericError("grad_check: f produced a non-finite value")
                    num = (fp - fm) / (2 * h)
                    an = a.reshape(-1)[i]
                    worst = max(worst, abs(an - num) / max(1.0, abs(an), abs(num)))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.data.dtype)
