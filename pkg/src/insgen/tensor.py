"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on an append-only :class:`Graph`; :func:`backward`
walks the graph in exact reverse append order.  A restricted second-order
path (:func:`grad` with ``create_graph=True``) covers the ops needed to
differentiate an input-gradient norm, which is what the R1 penalty uses.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


_local = threading.local()


def _stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = [Graph()]
        _local.grad_enabled = True
        _local.strict = False
    return _local.graphs


class Graph:
    """Append-only record of operations.  Usable as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node):
        node.graph = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def active_graph() -> Graph:
    return _stack()[-1]


def reset_graph():
    """Drop every node recorded on the active graph."""
    active_graph().reset()


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextmanager
def no_grad():
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def strict(enabled: bool = True):
    """Reject non-finite operands in every op evaluated inside the block."""
    _stack()
    prev = _local.strict
    _local.strict = enabled
    try:
        yield
    finally:
        _local.strict = prev


def is_strict() -> bool:
    _stack()
    return _local.strict


class Node:
    __slots__ = ("kind", "inputs", "out", "vjp", "vjp_t", "graph", "index")

    def __init__(self, kind, inputs, out, vjp, vjp_t=None):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp
        self.vjp_t = vjp_t


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by a Python scalar")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind, tensors):
    if not is_strict():
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: non-finite input of shape {t.shape}")


def _emit(kind, inputs, out_data, vjp, vjp_t=None) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, vjp, vjp_t)
        active_graph().record(node)
        out.node = node
    return out


def _binary_shapes(kind, a, b):
    if a.shape == b.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, t):
    # scalar-with-tensor broadcasting is the only broadcasting rule
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("matmul", (a, b))
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g, need):
        return (g @ b.data.T if need[0] else None,
                a.data.T @ g if need[1] else None)

    def vjp_t(g, need):
        return (matmul(g, transpose(b)) if need[0] else None,
                matmul(transpose(a), g) if need[1] else None)

    return _emit("matmul", (a, b), a.data @ b.data, vjp, vjp_t)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(),
                 lambda g, need: (g.T,), lambda g, need: (transpose(g),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", (a, b))
    _binary_shapes("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g, need: (_reduce_to(g, a), _reduce_to(g, b)),
                 lambda g, need: (_reduce_t(g, a), _reduce_t(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("sub", (a, b))
    _binary_shapes("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g, need: (_reduce_to(g, a), _reduce_to(-g, b)),
                 lambda g, need: (_reduce_t(g, a), _reduce_t(scalar_mul(g, -1.0), b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", (a, b))
    _binary_shapes("mul", a, b)

    def vjp(g, need):
        return (_reduce_to(g * b.data, a) if need[0] else None,
                _reduce_to(g * a.data, b) if need[1] else None)

    def vjp_t(g, need):
        return (_reduce_t(mul(g, b), a) if need[0] else None,
                _reduce_t(mul(g, a), b) if need[1] else None)

    return _emit("mul", (a, b), a.data * b.data, vjp, vjp_t)


def _reduce_t(g, t):
    if t.data.ndim == 0 and g.data.ndim != 0:
        return tsum(g)
    return g


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    _check_finite("scalar-mul", (a,))
    c = float(c)
    return _emit("scalar-mul", (a,), a.data * c,
                 lambda g, need: (g * c,), lambda g, need: (scalar_mul(g, c),))


def add_bias(x, b) -> Tensor:
    """Add a bias vector to every row of a matrix."""
    x, b = as_tensor(x), as_tensor(b)
    _check_finite("add-bias", (x, b))
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add-bias: shape mismatch {x.shape} vs {b.shape}")

    def vjp_t(g, need):
        if not need[1]:
            return g, None
        ones = Tensor(np.ones((1, g.shape[0])))
        return g, reshape_vec(matmul(ones, g))

    return _emit("add-bias", (x, b), x.data + b.data,
                 lambda g, need: (g, g.sum(axis=0)), vjp_t)


def reshape_vec(a) -> Tensor:
    """Flatten a (1, n) or (n, 1) matrix to a vector."""
    a = as_tensor(a)
    shape = a.shape
    return _emit("reshape", (a,), a.data.reshape(-1),
                 lambda g, need: (g.reshape(shape),),
                 lambda g, need: (_reshape_to(g, shape),))


def _reshape_to(g, shape):
    return _emit("reshape", (g,), g.data.reshape(shape),
                 lambda h, need: (h.reshape(g.shape),),
                 lambda h, need: (_reshape_to(h, g.shape),))


def _leaky_scale(pre, slope):
    # branch-free; np.where is several times slower on random signs
    scale = (pre > 0).astype(np.float64)
    scale *= 1.0 - slope
    scale += slope
    return scale


def dense(x, w, b, slope: float | None = None) -> Tensor:
    """Fused ``leaky_relu(x @ w + b)``; ``slope=None`` leaves the layer linear."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_finite("dense", (x, w, b))
    if (x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1
            or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]):
        raise ShapeError(f"dense: shape mismatch {x.shape} @ {w.shape} + {b.shape}")
    pre = x.data @ w.data
    pre += b.data
    if slope is None:
        scale = None
        out = pre
    else:
        scale = _leaky_scale(pre, slope)
        out = pre * scale

    def vjp(g, need):
        gp = g if scale is None else g * scale
        return (gp @ w.data.T if need[0] else None,
                x.data.T @ gp if need[1] else None,
                gp.sum(axis=0) if need[2] else None)

    def vjp_t(g, need):
        gp = g if scale is None else mul(g, Tensor(scale))
        gb = None
        if need[2]:
            gb = reshape_vec(matmul(Tensor(np.ones((1, gp.shape[0]))), gp))
        return (matmul(gp, transpose(w)) if need[0] else None,
                matmul(transpose(x), gp) if need[1] else None,
                gb)

    return _emit("dense", (x, w, b), out, vjp, vjp_t)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    _check_finite("leaky-relu", (x,))
    scale = _leaky_scale(x.data, slope)

    def vjp_t(g, need):
        return (mul(g, Tensor(scale)),)

    return _emit("leaky-relu", (x,), x.data * scale,
                 lambda g, need: (g * scale,), vjp_t)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("softplus", (x,))
    return _emit("softplus", (x,), np.logaddexp(0.0, x.data),
                 lambda g, need: (g * expit(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("exp", (x,))
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g, need: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("log", (x,))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", (x,), out, lambda g, need: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("square", (x,))
    return _emit("square", (x,), x.data * x.data,
                 lambda g, need: (2.0 * g * x.data,),
                 lambda g, need: (scalar_mul(mul(g, x), 2.0),))


def tsum(x) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    x = as_tensor(x)
    _check_finite("sum", (x,))
    shape = x.shape

    def vjp_t(g, need):
        return (mul(Tensor(np.ones(shape)), g),)

    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g, need: (np.full(shape, float(g)),), vjp_t)


def mean(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("mean", (x,))
    shape, n = x.shape, x.size

    def vjp_t(g, need):
        return (mul(Tensor(np.full(shape, 1.0 / n)), g),)

    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g, need: (np.full(shape, float(g) / n),), vjp_t)


def l2_normalize(x) -> Tensor:
    """Scale every row to unit Euclidean norm; zero rows stay zero."""
    x = as_tensor(x)
    _check_finite("l2-normalize", (x,))
    if x.data.ndim != 2:
        raise ShapeError(f"l2-normalize: expected a matrix, got shape {x.shape}")
    norm = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))[:, None]
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x.data / safe, 0.0)

    def vjp(g, need):
        dot = np.einsum("ij,ij->i", g, y)[:, None]
        return (np.where(norm > 0, (g - y * dot) / safe, 0.0),)

    return _emit("l2-normalize", (x,), y, vjp)


def row_dot(a, b) -> Tensor:
    """Row-wise inner products of two equally shaped matrices, as (B, 1)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("dot-product", (a, b))
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"dot-product: shape mismatch {a.shape} vs {b.shape}")
    out = np.einsum("ij,ij->i", a.data, b.data)[:, None]
    return _emit("dot-product", (a, b), out,
                 lambda g, need: (g * b.data if need[0] else None,
                                  g * a.data if need[1] else None))


def logsumexp_rows(x) -> Tensor:
    """Numerically stable log-sum-exp across each row, as (B, 1)."""
    x = as_tensor(x)
    _check_finite("log-sum-exp", (x,))
    if x.data.ndim != 2:
        raise ShapeError(f"log-sum-exp: expected a matrix, got shape {x.shape}")
    top = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - top)
    s = e.sum(axis=1, keepdims=True)
    out = top + np.log(s)
    soft = e / s
    return _emit("log-sum-exp", (x,), out, lambda g, need: (g * soft,))


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    _check_finite("gather-rows", (x,))
    index = np.asarray(index, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"gather-rows: expected a matrix, got shape {x.shape}")
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ShapeError(f"gather-rows: index out of range for shape {x.shape}")
    shape = x.shape
    n = index.size
    contiguous = n > 0 and index[0] >= 0 and np.array_equal(index, np.arange(index[0], index[0] + n))

    def vjp(g, need):
        out = np.zeros(shape)
        if contiguous:
            out[index[0]:index[0] + n] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("gather-rows", (x,), x.data[index], vjp)


def concat_rows(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    _check_finite("concat-rows", parts)
    if not parts:
        raise ShapeError("concat-rows: nothing to concatenate")
    width = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1:] != width:
            raise ShapeError(f"concat-rows: shape mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _emit("concat-rows", parts, np.concatenate([p.data for p in parts]),
                 lambda g, need: tuple(np.split(g, bounds)))


def batch_matvec(x, mats) -> Tensor:
    """Per-row linear map: row i of the output is ``mats[i] @ x[i]``.

    ``mats`` is a constant (B, d, d) array; only ``x`` is differentiated.
    """
    x = as_tensor(x)
    _check_finite("batch-matvec", (x,))
    mats = np.asarray(mats.data if isinstance(mats, Tensor) else mats, dtype=np.float64)
    if x.data.ndim != 2 or mats.shape != (x.shape[0], x.shape[1], x.shape[1]):
        raise ShapeError(f"batch-matvec: shape mismatch {x.shape} vs {mats.shape}")
    out = np.einsum("bij,bj->bi", mats, x.data)
    return _emit("batch-matvec", (x,), out,
                 lambda g, need: (np.einsum("bij,bi->bj", mats, g),))


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "add-bias": add_bias,
    "leaky-relu": leaky_relu,
    "dense": dense,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sum": tsum,
    "mean": mean,
    "l2-normalize": l2_normalize,
    "dot-product": row_dot,
    "log-sum-exp": logsumexp_rows,
    "square": square,
    "gather-rows": gather_rows,
    "concat-rows": lambda *parts: concat_rows(parts),
    "batch-matvec": batch_matvec,
}


def eval_op(kind: str, *inputs, **params) -> Tensor:
    """Evaluate a registered op by name, e.g. ``eval_op("leaky-relu", x, slope=0.2)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise TensorError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------- backward


def _accumulate(t, g):
    # never in place: vjp outputs may alias one another
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires-grad ancestor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones(loss.shape)
    node = loss.node
    if node is None:
        _accumulate(loss, seed)
        return
    graph = node.graph
    if node.index >= len(graph.nodes) or graph.nodes[node.index] is not node:
        raise TensorError("backward: the graph holding this loss was reset")
    pending = {id(loss): seed}
    for n in reversed(graph.nodes[: node.index + 1]):
        g = pending.pop(id(n.out), None)
        if g is None:
            continue
        _accumulate(n.out, g)
        need = tuple(t.requires_grad for t in n.inputs)
        for t, gi in zip(n.inputs, n.vjp(g, need)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate(t, gi)
            elif t.node.graph is not graph:
                raise TensorError("backward: input recorded on a different graph")
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False):
    """Gradients of a scalar ``output`` w.r.t. ``inputs``, returned not accumulated.

    With ``create_graph`` the result is itself a differentiable expression,
    built from the second-order rules of matmul, transpose, add, sub, mul,
    scalar-mul, add-bias, dense, leaky-relu, square, sum and mean.
    """
    if output.data.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    wanted = {id(t) for t in inputs}
    result = {}
    node = output.node
    if node is None:
        return [Tensor(np.ones(t.shape)) if t is output else Tensor(np.zeros(t.shape))
                for t in inputs]
    nodes = node.graph.nodes[: node.index + 1]

    # only propagate along paths that reach a requested input
    live = set(wanted)
    for n in nodes:
        if any(id(t) in live for t in n.inputs):
            live.add(id(n.out))

    if create_graph:
        pending = {id(output): Tensor(np.ones(output.shape))}
    else:
        pending = {id(output): np.ones(output.shape)}
    for n in reversed(nodes):
        g = pending.pop(id(n.out), None)
        if g is None:
            continue
        need = tuple(id(t) in live for t in n.inputs)
        if create_graph:
            if n.vjp_t is None:
                raise TensorError(f"grad: op {n.kind!r} has no second-order rule")
            grads = n.vjp_t(g, need)
        else:
            grads = n.vjp(g, need)
        for t, gi in zip(n.inputs, grads):
            key = id(t)
            if gi is None or key not in live:
                continue
            if key in wanted:
                result[key] = gi if key not in result else result[key] + gi
            if t.node is not None:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    out = []
    for t in inputs:
        g = result.get(id(t))
        if g is None:
            g = np.zeros(t.shape)
        out.append(g if isinstance(g, Tensor) else Tensor(g))
    return out


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between backward and central finite differences.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor and must be
    deterministic.  Relative error per coordinate is
    ``|a - b| / max(1, |a|, |b|)``.  ``coords`` restricts the check to a
    subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Graph():
        y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise NonFiniteError("grad_check: non-finite loss at the base point")
        backward(y)
    analytic = np.zeros(base.size) if x.grad is None else x.grad.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    # probes keep gradient recording on: f may itself take a derivative (R1)
    with Graph():
        for i in idx:
            probe = flat.copy()
            probe[i] = flat[i] + step
            hi = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] = flat[i] - step
            lo = f(Tensor(probe.reshape(base.shape))).item()
            reset_graph()
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"grad_check: non-finite value at coordinate {i}", index=i)
            numeric = (hi - lo) / (2 * step)
            a = analytic[i]
            if not np.isfinite(a):
                raise NonFiniteError(f"grad_check: non-finite gradient at coordinate {i}", index=i)
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
