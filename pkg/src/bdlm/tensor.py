"""Small numpy-backed tensor with reverse-mode differentiation.

Only the operations a decoder transformer needs are provided. Every op
records its inputs and a backward closure; :func:`backward` replays the
recorded operations in reverse creation order.

Precision is process-wide: 32-bit by default, 64-bit when the environment
variable ``BDLM_PRECISION=f64`` is set or inside ``with precision("f64")``.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, EmptyLossError, InvalidPatternError

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _dtype_from_env() -> type:
    name = os.environ.get("BDLM_PRECISION", "f32").strip().lower() or "f32"
    if name not in _DTYPES:
        raise ValueError(f"BDLM_PRECISION must be one of {sorted(_DTYPES)}, got {name!r}")
    return _DTYPES[name]


_state = {"dtype": _dtype_from_env()}
_local = threading.local()  # grad recording is per thread; bench workers decode concurrently
_counter = itertools.count()


def get_dtype() -> type:
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Set the default float type, ``"f32"`` or ``"f64"``."""
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constant tensors."""
    old = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


class Tensor:
    """Dense array plus optional gradient buffer and backward record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ComputationTape:
    """The recorded operations reachable from one output, in execution order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self, out: Tensor, seed: np.ndarray) -> list[Tensor]:
        """Propagate ``seed`` from ``out`` to the leaves; returns ops visited."""
        grads: dict[int, np.ndarray] = {id(out): seed}
        visited = []
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            visited.append(node)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    ComputationTape.from_output(loss).replay(loss, seed)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def add_all(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take(a: Tensor, index: slice | np.ndarray, axis: int) -> Tensor:
    """Select entries along ``axis`` (slice or integer array)."""
    axis = axis % a.ndim
    key = (slice(None),) * axis + (index,)
    src = a.shape
    dtype = a.data.dtype

    def bw(g):
        out = np.zeros(src, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _node(a.data[key], (a,), bw)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _node(out, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


# ---------------------------------------------------------------------------
# model ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across all leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"token id out of range [0, {weight.shape[0]})")
    W = weight.data

    def bw(g):
        out = np.zeros_like(W)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (out,)

    return _node(W[ids], (weight,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm weight {weight.shape} vs input {x.shape}")
    xd, w = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gx_hat = g * w
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _node(xhat * w, (x, weight), bw)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding over the last axis; ``positions`` indexes axis -2."""
    dh = x.shape[-1]
    if dh % 2:
        raise DimensionError("rotary embedding needs an even head dimension")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise DimensionError(f"need {x.shape[-2]} positions, got {pos.shape}")
    half = dh // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = pos[:, None] * freqs[None, :]
    dtype = x.data.dtype
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)

    def rot(v, s):
        v1, v2 = v[..., :half], v[..., half:]
        return np.concatenate([v1 * cos - v2 * s, v1 * s + v2 * cos], axis=-1)

    return _node(rot(x.data, sin), (x,), lambda g: (rot(g, -sin),))


def _pattern_array(pattern, shape: tuple[int, int]) -> np.ndarray:
    allowed = pattern.dense() if hasattr(pattern, "dense") else np.asarray(pattern, dtype=bool)
    if allowed.shape != shape:
        raise DimensionError(f"pattern shape {allowed.shape} does not match scores {shape}")
    return allowed


def softmax_masked(scores: Tensor, pattern) -> Tensor:
    """Row softmax over the admissible keys only.

    ``pattern`` is an AttentionPattern or a boolean (q, k) array; it is shared
    by all leading axes of ``scores``. Disallowed entries are excluded from the
    reduction and come out exactly 0.
    """
    allowed = _pattern_array(pattern, scores.shape[-2:])
    if not allowed.any(axis=-1).all():
        raise InvalidPatternError("attention pattern has a query row with no allowed key")
    s = scores.data
    row_max = np.where(allowed, s, s.min()).max(axis=-1, keepdims=True)
    e = np.exp(np.where(allowed, s - row_max, 0.0)) * allowed
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (scores,), bw)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, labels, active) -> Tensor:
    """Summed negative log-likelihood over the active rows of ``logits``.

    Inactive rows contribute exactly zero to the value and the gradient; their
    labels are not inspected.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (n, V), got {logits.shape}")
    n, V = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    active = np.asarray(active, dtype=bool).reshape(-1)
    if labels.shape != (n,) or active.shape != (n,):
        raise DimensionError("labels and active flags must have one entry per logits row")
    rows = np.flatnonzero(active)
    if rows.size == 0:
        raise EmptyLossError("no active positions")
    lab = labels[rows]
    if lab.min() < 0 or lab.max() >= V:
        raise DimensionError(f"active label out of range [0, {V})")
    logp = log_softmax_rows(logits.data[rows])
    value = -logp[np.arange(rows.size), lab].sum()

    def bw(g):
        grad = np.zeros_like(logits.data)
        sub = np.exp(logp)
        sub[np.arange(rows.size), lab] -= 1.0
        grad[rows] = sub * g
        return (grad,)

    return _node(np.asarray(value, dtype=logits.data.dtype), (logits,), bw)
