"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tracked tensor.
Untracked tensors (frozen weights, masks, data) behave as constants, and no
gradient work is done for them during :func:`backward`.

    tape = Tape()
    w = tape.watch(np.ones((3, 2)))
    loss = sum_all(matmul(x, w))
    backward(tape, loss)
    w.grad  # ndarray, same shape as w
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-5
COS_EPS = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


@dataclass
class Node:
    kind: str
    input_ids: tuple[int | None, ...]
    output_id: int
    saved: dict[str, Any]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    leaves: list["Tensor"] = field(default_factory=list)
    _count: int = 0

    def _new_id(self) -> int:
        self._count += 1
        return self._count - 1

    def watch(self, value, name: str | None = None) -> "Tensor":
        """Register ``value`` as a differentiable leaf and return it."""
        t = value if isinstance(value, Tensor) else Tensor(value, name=name)
        if t.tape is not None:
            raise ContractError(f"tensor {t.name!r} is already tracked")
        t.tape = self
        t.tape_id = self._new_id()
        t.grad = None
        self.leaves.append(t)
        return t

    def clear(self) -> None:
        """Drop recorded operations and leaves.

        Tensors point back at their tape, so a finished tape sits in a
        reference cycle together with every array it saved; clearing it lets
        that memory go right away instead of at the next cyclic collection.
        """
        self.nodes.clear()
        self.leaves.clear()


class Tensor:
    __slots__ = ("data", "grad", "tape", "tape_id", "name")

    def __init__(self, data, name: str | None = None):
        # float64 ndarrays are wrapped without copying
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Registration machinery
# ---------------------------------------------------------------------------

_BACKWARD: dict[str, Callable[..., tuple]] = {}


def _register_backward(kind: str):
    def deco(fn):
        _BACKWARD[kind] = fn
        return fn

    return deco


def _common_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands are tracked on different tapes")
            tape = t.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, **saved) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    tape = _common_tape(inputs)
    if tape is None:
        result.tape = None
        result.tape_id = None
        return result
    result.tape = tape
    result.tape_id = tape._new_id()
    saved["needs"] = tuple(t.tape is not None for t in inputs)
    tape.nodes.append(Node(kind, tuple(t.tape_id for t in inputs), result.tape_id, saved))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    return _emit("add", (a, b), out, a_shape=a.shape, b_shape=b.shape)


@_register_backward("add")
def _add_bwd(g, needs, a_shape, b_shape):
    return (
        _unbroadcast(g, a_shape) if needs[0] else None,
        _unbroadcast(g, b_shape) if needs[1] else None,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc
    return _emit("sub", (a, b), out, a_shape=a.shape, b_shape=b.shape)


@_register_backward("sub")
def _sub_bwd(g, needs, a_shape, b_shape):
    return (
        _unbroadcast(g, a_shape) if needs[0] else None,
        _unbroadcast(-g, b_shape) if needs[1] else None,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    return _emit("mul", (a, b), out, a=a.data, b=b.data)


@_register_backward("mul")
def _mul_bwd(g, needs, a, b):
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` are batch axes.

    ``b`` may be a plain matrix ``[k, n]`` shared across the batch, or carry the
    same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents {a.shape[:-2]} vs {b.shape[:-2]}")
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the folded batch instead of a per-item loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    return _emit("matmul", (a, b), out, a=a.data, b=b.data)


@_register_backward("matmul")
def _matmul_bwd(g, needs, a, b):
    ga = gb = None
    if needs[0]:
        if b.ndim == 2 and a.ndim > 2:
            ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        else:
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _emit("reshape", (x,), out, in_shape=x.shape)


@_register_backward("reshape")
def _reshape_bwd(g, needs, in_shape):
    return (g.reshape(in_shape),)


def swapaxes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    x = as_tensor(x)
    return _emit("swapaxes", (x,), np.swapaxes(x.data, ax1, ax2), ax1=ax1, ax2=ax2)


@_register_backward("swapaxes")
def _swapaxes_bwd(g, needs, ax1, ax2):
    return (np.swapaxes(g, ax1, ax2),)


def getitem(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back additively."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=DTYPE)
    return _emit("getitem", (x,), out, index=index, in_shape=x.shape)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


@_register_backward("getitem")
def _getitem_bwd(g, needs, index, in_shape):
    gx = np.zeros(in_shape, dtype=DTYPE)
    if _is_basic(index):
        gx[index] = g
    else:
        np.add.at(gx, index, g)
    return (gx,)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of ``x`` along axis 0 (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]
    return _emit("take", (x,), out, indices=idx, in_shape=x.shape)


@_register_backward("take")
def _take_bwd(g, needs, indices, in_shape):
    gx = np.zeros(in_shape, dtype=DTYPE)
    np.add.at(gx, indices, g)
    return (gx,)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}") from exc
    sizes = [p.shape[axis] for p in parts]
    return _emit("concat", parts, out, axis=axis, sizes=sizes)


@_register_backward("concat")
def _concat_bwd(g, needs, axis, sizes):
    splits = np.cumsum(sizes)[:-1]
    pieces = np.split(g, splits, axis=axis)
    return tuple(p if n else None for p, n in zip(pieces, needs))


def expand(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis of extent ``batch``."""
    x = as_tensor(x)
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _emit("expand", (x,), out)


@_register_backward("expand")
def _expand_bwd(g, needs):
    return (g.sum(axis=0),)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit("sum_all", (x,), np.array(x.data.sum()), in_shape=x.shape)


@_register_backward("sum_all")
def _sum_all_bwd(g, needs, in_shape):
    return (np.full(in_shape, g, dtype=DTYPE),)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return mul(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax_rows", (x,), y, y=y)


@_register_backward("softmax_rows")
def _softmax_bwd(g, needs, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each vector along the last axis, then apply ``gain``/``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last extent {d}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    return _emit("layer_norm", (x, gain, bias), out, xhat=xhat, inv=inv, gain=gain.data)


@_register_backward("layer_norm")
def _layer_norm_bwd(g, needs, xhat, inv, gain):
    gx = ggain = gbias = None
    if needs[0]:
        gh = g * gain
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
    if needs[1]:
        ggain = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    if needs[2]:
        gbias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggain, gbias


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    return _emit("gelu", (x,), x.data * cdf, x=x.data, cdf=cdf)


@_register_backward("gelu")
def _gelu_bwd(g, needs, x, cdf):
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


# ---------------------------------------------------------------------------
# Losses and similarity
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is ``[B, C]``; a single ``[C]`` row is treated as a batch of one.
    """
    logits = as_tensor(logits)
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractError(f"label out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = logsum - shifted[rows, labels]
    probs = np.exp(shifted - logsum[:, None])
    return _emit(
        "cross_entropy", (logits,), np.array(nll.mean()),
        probs=probs, labels=labels, in_shape=logits.shape,
    )


@_register_backward("cross_entropy")
def _cross_entropy_bwd(g, needs, probs, labels, in_shape):
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    d *= g / len(labels)
    return (d.reshape(in_shape),)


def cosine_distance_rows(a, b, eps: float = COS_EPS) -> Tensor:
    """Row-wise ``1 - cos(a_r, b_r)`` for ``a, b`` of shape ``[R, D]``.

    A row whose norm falls below ``eps`` yields distance exactly 1 with zero
    gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"cosine_distance_rows: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    ok = (na >= eps) & (nb >= eps)
    dot = (a.data * b.data).sum(axis=1)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)
    return _emit(
        "cosine_distance_rows", (a, b), 1.0 - cos,
        a=a.data, b=b.data, na=na, nb=nb, cos=cos, ok=ok,
    )


@_register_backward("cosine_distance_rows")
def _cosine_bwd(g, needs, a, b, na, nb, cos, ok):
    safe_na = np.where(ok, na, 1.0)[:, None]
    safe_nb = np.where(ok, nb, 1.0)[:, None]
    w = np.where(ok, -g, 0.0)[:, None]
    ga = gb = None
    if needs[0]:
        ga = w * (b / (safe_na * safe_nb) - cos[:, None] * a / (safe_na * safe_na))
    if needs[1]:
        gb = w * (a / (safe_na * safe_nb) - cos[:, None] * b / (safe_nb * safe_nb))
    return ga, gb


# ---------------------------------------------------------------------------
# Reverse sweep and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Leaves the loss does not depend on receive an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss is not tracked on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        if node.output_id > loss.tape_id:
            continue
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        input_grads = _BACKWARD[node.kind](g, **node.saved)
        for tid, gi in zip(node.input_ids, input_grads):
            if tid is None or gi is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    for leaf in tape.leaves:
        g = grads.get(leaf.tape_id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)


def grad_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5) -> float:
    """Compare reverse-mode and central-difference gradients of scalar ``f``.

    Returns ``max_i |g_auto_i - g_fd_i| / max(1, |g_fd_i|)``.
    """
    base = np.array(as_tensor(theta).data, dtype=DTYPE)
    tape = Tape()
    leaf = tape.watch(base.copy())
    out = f(leaf)
    backward(tape, out)
    auto = leaf.grad.reshape(-1)

    flat = base.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        fd[i] = (fp - fm) / (2.0 * h)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd))))
