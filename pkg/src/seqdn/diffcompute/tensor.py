"""Dense float64 tensors with reverse-mode gradients.

Every op records its parents and a closure mapping the upstream gradient to
per-parent gradients. ``backward`` walks the recorded graph in reverse
topological order once.

Shapes must match exactly. The only broadcast allowed implicitly is a Python
number (or a 0-d tensor) against a tensor; row-wise bias and row scaling are
explicit ops (``add_bias``, ``mul_rows``).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-12

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same("add", a, b)

    def fn(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same("sub", a, b)

    def fn(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (Hadamard)."""
    a, b = _lift(a), _lift(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, a), _unbroadcast(g * ad, b)

    return _make(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same("div", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g / bd, a), _unbroadcast(-g * ad / (bd * bd), b)

    return _make(ad / bd, (a, b), fn, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        return (g * c,)

    return _make(a.data * c, (a,), fn, "scalar_mul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (N, d) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: expected (N,d)+(d,), got {x.shape} + {b.shape}")

    def fn(g):
        return g, g.sum(axis=0)

    return _make(x.data + b.data, (x, b), fn, "add_bias")


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an (N, d) matrix by s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"mul_rows: expected (N,d)*(N,), got {x.shape} * {s.shape}")
    xd, sd = x.data, s.data

    def fn(g):
        return g * sd[:, None], (g * xd).sum(axis=1)

    return _make(xd * sd[:, None], (x, s), fn, "mul_rows")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return (g @ bd.T if a.requires_grad else None), (ad.T @ g if b.requires_grad else None)
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _make(ad @ bd, (a, b), fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in ts]
    if not ts:
        raise ShapeError("concat: empty input")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), fn, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in ts]
    if not ts:
        raise ShapeError("stack: empty input")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {[t.shape for t in ts]}")

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), fn, "stack")


class _Scatter:
    """Sparse gradient contribution: ``g`` lands on ``index`` of the parent."""

    __slots__ = ("index", "g", "repeats")

    def __init__(self, index, g, repeats=False):
        self.index = index
        self.g = g
        self.repeats = repeats

    def add_into(self, buf: np.ndarray) -> None:
        if self.repeats:
            np.add.at(buf, self.index, self.g)
        else:
            buf[self.index] += self.g


def slice_(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices)."""

    def fn(g):
        return (_Scatter(idx, g),)

    return _make(np.array(a.data[idx]), (a,), fn, "slice")


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows of ``a`` selected by an integer array (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim < 1:
        raise ShapeError("gather_rows: input must have at least one axis")
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def fn(g):
        return (_Scatter(index, g, repeats=True),)

    return _make(a.data[index], (a,), fn, "gather_rows")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free; exact 0.5 at 0
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a: Tensor) -> Tensor:
    s = np.asarray(_sigmoid_np(a.data))

    def fn(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def fn(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), fn, "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def fn(g):
        return (g * pos,)

    return _make(a.data * pos, (a,), fn, "relu")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), fn, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scalar_mul(sum_(a, axis), 1.0 / n)


def l2_norm(a: Tensor, axis: int | None = -1) -> Tensor:
    """Euclidean norm of a vector, or of each row when ``a`` is 2-d.

    The gradient at an exactly-zero vector is taken as zero.
    """
    ad = a.data
    if axis is None or ad.ndim == 1:
        nrm = np.asarray(np.sqrt((ad * ad).sum()))

        def fn(g):
            return (g * ad / nrm if nrm > 0 else np.zeros_like(ad),)

    else:
        nrm = np.sqrt((ad * ad).sum(axis=axis))

        def fn(g):
            safe = np.where(nrm > 0, nrm, 1.0)
            return (np.expand_dims(g / safe * (nrm > 0), axis) * ad,)

    return _make(nrm, (a,), fn, "l2_norm")


# ---------------------------------------------------------------------------
# similarities and losses
# ---------------------------------------------------------------------------


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """dot(a, b) / (|a||b| + eps), for vectors or row-by-row for matrices."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise ShapeError(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    den = na * nb + eps
    cos = dot / den

    def fn(g):
        ge = g[..., None] if ad.ndim == 2 else g
        dd = den[..., None] if ad.ndim == 2 else den
        do = dot[..., None] if ad.ndim == 2 else dot
        sa = np.where(na > 0, na, 1.0)
        sb = np.where(nb > 0, nb, 1.0)
        if ad.ndim == 2:
            sa, sb, nna, nnb = sa[:, None], sb[:, None], na[:, None], nb[:, None]
        else:
            nna, nnb = na, nb
        # d den / da = |b| a / |a|
        ga = ge * (bd / dd - do * nnb * ad / (sa * dd * dd) * (nna > 0))
        gb = ge * (ad / dd - do * nna * bd / (sb * dd * dd) * (nnb > 0))
        return ga, gb

    return _make(np.asarray(cos), (a, b), fn, "cosine_similarity")


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """(N, d) x (M, d) -> (N, M) matrix of cosine similarities."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: shapes {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    dots = ad @ bd.T
    den = np.outer(na, nb) + eps
    cos = dots / den

    def fn(g):
        q = g / den  # dL/d dots
        # dL/d den = -g * dots / den^2 ; den = na nb^T
        r = -g * dots / (den * den)
        sa = np.where(na > 0, na, 1.0)
        sb = np.where(nb > 0, nb, 1.0)
        ga = q @ bd + ((r @ nb) * (na > 0) / sa)[:, None] * ad
        gb = q.T @ ad + ((r.T @ na) * (nb > 0) / sb)[:, None] * bd
        return ga, gb

    return _make(cos, (a, b), fn, "pairwise_cosine")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` is (C,) with an int target, or (N, C) with N int targets.
    """
    z = logits.data
    if z.ndim == 1:
        tgt = np.asarray([int(target)])
        z2 = z[None, :]
    elif z.ndim == 2:
        tgt = np.asarray(target, dtype=np.int64).reshape(-1)
        if tgt.shape[0] != z.shape[0]:
            raise ShapeError(
                f"softmax_cross_entropy: {z.shape[0]} rows but {tgt.shape[0]} targets"
            )
        z2 = z
    else:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-d or 2-d, got {z.shape}")
    n, c = z2.shape
    if tgt.size and (tgt.min() < 0 or tgt.max() >= c):
        raise IndexError(f"softmax_cross_entropy: target out of range for {c} classes")
    lsm = _log_softmax_np(z2)
    rows = np.arange(n)
    loss = -lsm[rows, tgt].mean()

    def fn(g):
        p = np.exp(lsm)
        p[rows, tgt] -= 1.0
        p *= g / n
        return (p.reshape(z.shape),)

    return _make(np.asarray(loss), (logits,), fn, "softmax_cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    """mean((a - b)^2); ``b`` may be a tensor of the same shape or a number."""
    a, b = _lift(a), _lift(b)
    _check_same("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def fn(g):
        d = 2.0 * g * diff / n
        return d, _unbroadcast(-d, b)

    return _make(np.asarray((diff * diff).mean()), (a, b), fn, "mse")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # buffers created here, safe to update in place
    for node in reversed(_topo_order(loss)):
        key = id(node)
        g = grads.pop(key, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g if key in owned else g.copy()
            else:
                node.grad = node.grad + g
            owned.discard(key)
            continue
        owned.discard(key)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pkey = id(parent)
            prev = grads.get(pkey)
            if isinstance(pg, _Scatter):
                if prev is None:
                    prev = np.zeros(parent.shape)
                elif pkey not in owned:
                    prev = prev.copy()
                owned.add(pkey)
                grads[pkey] = prev
                pg.add_into(prev)
            elif prev is None:
                grads[pkey] = pg
            elif pkey in owned:
                prev += pg
            else:
                grads[pkey] = prev + pg
                owned.add(pkey)


def parameters_numel(params: Iterable[Tensor]) -> int:
    return int(sum(math.prod(p.shape) for p in params))
