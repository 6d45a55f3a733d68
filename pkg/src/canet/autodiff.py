"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation builds a node in an implicit computation graph (tensors
reference their parents, creation order doubles as a topological order).
``backward`` sweeps the graph in reverse creation order and accumulates
gradients with ``+=`` so a parameter used several times in one graph
collects contributions from every use.

Inside a ``no_grad()`` block ops compute values only and record nothing,
which is what evaluation and finite-difference probing use.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Operand values fall outside the op's documented domain."""


_GRAD_ENABLED = [True]
_ORDER = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A float64 array plus its place in the computation graph.

    ``grad`` stays ``None`` until backward first touches the node.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "order")

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.order = next(_ORDER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Named trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _ensure_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _make(data, parents: tuple, backward_fn: Callable) -> Tensor:
    if _GRAD_ENABLED[-1]:
        return Tensor(data, parents, backward_fn)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bw(g):
        _ensure_grad(a)
        a.grad += g
        _ensure_grad(b)
        b.grad += g

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(g):
        _ensure_grad(a)
        a.grad += g
        _ensure_grad(b)
        b.grad -= g

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bw(g):
        _ensure_grad(a)
        a.grad += g * b.data
        _ensure_grad(b)
        b.grad += g * a.data

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _ensure_grad(a)
        a.grad += c * g

    return _make(a.data * c, (a,), bw)


def add_const(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _ensure_grad(a)
        a.grad += g

    return _make(a.data + float(c), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _ensure_grad(a)
        a.grad += g * (1.0 - out * out)

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _ensure_grad(a)
        a.grad += g * out * (1.0 - out)

    return _make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _ensure_grad(a)
        a.grad += g * 2.0 * a.data

    return _make(a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(a.data)

    def bw(g):
        _ensure_grad(a)
        a.grad += g * 0.5 / out

    return _make(out, (a,), bw)


def absval(a: Tensor) -> Tensor:
    def bw(g):
        # subgradient 0 at exactly 0
        _ensure_grad(a)
        a.grad += g * np.sign(a.data)

    return _make(np.abs(a.data), (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive operand")

    def bw(g):
        _ensure_grad(a)
        a.grad += g / a.data

    return _make(np.log(a.data), (a,), bw)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    keep = a.data >= floor

    def bw(g):
        _ensure_grad(a)
        a.grad += g * keep

    return _make(np.maximum(a.data, floor), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    def bw(g):
        _ensure_grad(a)
        a.grad += g @ b.data.T
        _ensure_grad(b)
        b.grad += a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    if a.data.ndim != 2 or x.data.ndim != 1 or a.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {a.data.shape} x {x.data.shape}")

    def bw(g):
        _ensure_grad(a)
        a.grad += np.outer(g, x.data)
        _ensure_grad(x)
        x.grad += a.data.T @ g

    return _make(a.data @ x.data, (a, x), bw)


def vecmat(x: Tensor, a: Tensor) -> Tensor:
    if x.data.ndim != 1 or a.data.ndim != 2 or x.data.shape[0] != a.data.shape[0]:
        raise ShapeError(f"vecmat: incompatible shapes {x.data.shape} x {a.data.shape}")

    def bw(g):
        _ensure_grad(x)
        x.grad += a.data @ g
        _ensure_grad(a)
        a.grad += np.outer(x.data, g)

    return _make(x.data @ a.data, (x, a), bw)


def dot(x: Tensor, y: Tensor) -> Tensor:
    if x.data.ndim != 1 or y.data.ndim != 1 or x.data.shape != y.data.shape:
        raise ShapeError(f"dot: incompatible shapes {x.data.shape} . {y.data.shape}")

    def bw(g):
        _ensure_grad(x)
        x.grad += g * y.data
        _ensure_grad(y)
        y.grad += g * x.data

    return _make(x.data @ y.data, (x, y), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.data.shape}")

    def bw(g):
        _ensure_grad(a)
        a.grad += g.T

    return _make(a.data.T.copy(), (a,), bw)


# ---------------------------------------------------------------------------
# shape / indexing ops


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"reduce_sum: invalid axis {axis} for shape {a.data.shape}")

    def bw(g):
        _ensure_grad(a)
        if axis is None:
            a.grad += g
        else:
            a.grad += np.expand_dims(g, axis)

    return _make(a.data.sum(axis=axis), (a,), bw)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"reduce_mean: invalid axis {axis} for shape {a.data.shape}")
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        _ensure_grad(a)
        if axis is None:
            a.grad += g / n
        else:
            a.grad += np.expand_dims(g, axis) / n

    return _make(a.data.mean(axis=axis), (a,), bw)


def repeat_concat(u: Tensor, count: int) -> Tensor:
    """Tile a vector as the columns of a matrix: (d,) -> (d, count)."""
    if u.data.ndim != 1:
        raise ShapeError(f"repeat_concat: expected vector, got shape {u.data.shape}")
    if count < 1:
        raise ShapeError(f"repeat_concat: count must be >= 1, got {count}")

    def bw(g):
        _ensure_grad(u)
        u.grad += g.sum(axis=1)

    return _make(np.repeat(u.data[:, None], count, axis=1), (u,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis (0 = rows, 1 = columns)."""
    if not tensors:
        raise ShapeError("stack: empty input")
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    if axis not in (0, 1):
        raise ShapeError(f"stack: axis must be 0 or 1, got {axis}")
    ts = tuple(tensors)

    def bw(g):
        for i, t in enumerate(ts):
            _ensure_grad(t)
            t.grad += g[i] if axis == 0 else g[..., i]

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices along axis 0."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.data.shape}, {b.data.shape}")
    ra = a.data.shape[0]

    def bw(g):
        _ensure_grad(a)
        a.grad += g[:ra]
        _ensure_grad(b)
        b.grad += g[ra:]

    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), bw)


def col(a: Tensor, j: int) -> Tensor:
    """Extract column j of a matrix as a vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"col: expected 2-d, got shape {a.data.shape}")

    def bw(g):
        grad = _ensure_grad(a)
        grad[:, j] += g

    return _make(a.data[:, j].copy(), (a,), bw)


def take_row(a: Tensor, i: int) -> Tensor:
    """Extract row i of a matrix as a vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_row: expected 2-d, got shape {a.data.shape}")

    def bw(g):
        grad = _ensure_grad(a)
        grad[i] += g

    return _make(a.data[i].copy(), (a,), bw)


def embed(table: Tensor, ids) -> Tensor:
    """Gather rows ``ids`` of an embedding table as columns: (V,d),(L,) -> (d,L)."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"embed: expected (V,d) table and id vector, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embed: id out of range for table with {table.data.shape[0]} rows")

    def bw(g):
        grad = _ensure_grad(table)
        np.add.at(grad, idx, g.T)

    return _make(table.data[idx].T.copy(), (table,), bw)


def elem(x: Tensor, i: int) -> Tensor:
    """Extract entry i of a vector as a scalar."""
    if x.data.ndim != 1:
        raise ShapeError(f"elem: expected vector, got shape {x.data.shape}")

    def bw(g):
        grad = _ensure_grad(x)
        grad[i] += g

    return _make(x.data[i], (x,), bw)


# ---------------------------------------------------------------------------
# softmax


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over a vector, max-subtracted for overflow safety.

    ``mask`` is an optional boolean array; masked-out positions get score
    minus infinity, i.e. exactly zero probability and zero gradient.
    """
    if x.data.ndim != 1 or x.data.size == 0:
        raise ShapeError(f"softmax: expected non-empty vector, got shape {x.data.shape}")
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != x.data.shape:
            raise ShapeError(f"softmax: mask shape {valid.shape} != input shape {x.data.shape}")
        if not valid.any():
            raise DomainError("softmax: all positions masked")
    else:
        valid = None

    s = x.data
    if valid is None:
        e = np.exp(s - s.max())
        out = e / e.sum()
    else:
        sv = s[valid]
        e = np.zeros_like(s)
        e[valid] = np.exp(sv - sv.max())
        out = e / e.sum()

    def bw(g):
        _ensure_grad(x)
        # masked entries have out == 0, so they contribute and receive nothing
        inner = float(np.dot(g, out))
        x.grad += out * (g - inner)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# dropout


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout: rng required when training with p > 0")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# backward sweep and the finite-difference oracle


def backward(root: Tensor):
    """Accumulate gradients of a scalar root into every ancestor tensor."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    root.grad = np.ones_like(root.data)

    nodes = []
    seen = {id(root)}
    stack = [root]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node.parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)

    # creation order is a topological order: consumers run before producers
    nodes.sort(key=lambda t: t.order, reverse=True)
    for node in nodes:
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                      eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    Relative error per entry is |g_ad - g_fd| / max(1, |g_fd|); ``f`` must be
    deterministic and is re-evaluated 2 x size(params) times.
    """
    if eps <= 0:
        raise DomainError(f"finite_diff_check: eps must be positive, got {eps}")
    zero_grads(params)
    out = f()
    if not np.isfinite(out.data).all():
        raise DomainError("finite_diff_check: function value is not finite")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                err = abs(gflat[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
