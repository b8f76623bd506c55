"""Reverse-mode automatic differentiation over numpy arrays.

A `Tape` records one forward evaluation as a flat, topologically ordered
list of `Node`s whose values are float64 arrays. `Tape.backward` walks the
list once in reverse and accumulates exact gradients into every parameter
leaf. There is no implicit broadcasting: every shape adaptation is an
explicit primitive, so a shape bug fails at graph construction, never
silently in the gradients.

The primitive set is the closure of what the field and renderer need:
elementwise arithmetic and activations, (mat)mul/affine, concatenation,
row gather/scatter, segment sums, exclusive cumulative sums along rows,
and constant row scalings. Values are never mutated by backward; a tape
can be re-evaluated in place with `refresh()` (used by the
finite-difference oracles) but differentiated only once.
"""

from __future__ import annotations

import numpy as np

DIV_EPS = 1e-12
LOG_EPS = 1e-12


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class TapeError(RuntimeError):
    """Invalid tape usage (non-scalar root, second backward, ...)."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


class Node:
    """One recorded value: an array plus how it was produced."""

    __slots__ = ("value", "grad", "op", "parents", "aux", "needs_grad")

    def __init__(self, value, op, parents=(), aux=None, needs_grad=False):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.aux = aux
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"{op}: {a.value.shape} vs {b.value.shape}")


def _acc(node: Node, g: np.ndarray):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


class Tape:
    """Append-only record of one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}
        self._used = False

    # ------------------------------------------------------------------
    # leaves

    def _push(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        v = _as_f64(value)
        return self._push(Node(v, "const", aux=v))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Trainable leaf. Holds a reference (not a copy) of `value`."""
        if value.dtype != np.float64:
            raise TypeError(f"param {name!r} must be float64, got {value.dtype}")
        if name in self._params:
            raise TapeError(f"param {name!r} already bound to this tape")
        node = self._push(Node(value, "param", aux=value, needs_grad=True))
        self._params[name] = node
        return node

    # ------------------------------------------------------------------
    # elementwise

    def _unary(self, op: str, a: Node, aux=None) -> Node:
        v = _FORWARD[op]((a.value,), aux)
        return self._push(Node(v, op, (a,), aux, a.needs_grad))

    def _binary(self, op: str, a: Node, b: Node, aux=None) -> Node:
        v = _FORWARD[op]((a.value, b.value), aux)
        return self._push(Node(v, op, (a, b), aux, a.needs_grad or b.needs_grad))

    def add(self, a: Node, b: Node) -> Node:
        _same_shape(a, b, "add")
        return self._binary("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape(a, b, "sub")
        return self._binary("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        _same_shape(a, b, "mul")
        return self._binary("mul", a, b)

    def div(self, a: Node, b: Node) -> Node:
        """Elementwise a/b with |b| clamped to DIV_EPS (zero subgradient when clamped)."""
        _same_shape(a, b, "div")
        return self._binary("div", a, b)

    def neg(self, a: Node) -> Node:
        return self._unary("neg", a)

    def exp(self, a: Node) -> Node:
        return self._unary("exp", a)

    def log(self, a: Node) -> Node:
        """log of max(a, LOG_EPS); zero subgradient where the clamp is active."""
        return self._unary("log", a)

    def relu(self, a: Node) -> Node:
        return self._unary("relu", a)

    def softplus(self, a: Node) -> Node:
        return self._unary("softplus", a)

    def sigmoid(self, a: Node) -> Node:
        return self._unary("sigmoid", a)

    def clamp_min(self, a: Node, lo: float) -> Node:
        return self._unary("clamp_min", a, float(lo))

    def scale(self, a: Node, c: float) -> Node:
        """Multiply by a python scalar constant."""
        return self._unary("scale", a, float(c))

    def add_scalar(self, a: Node, c: float) -> Node:
        return self._unary("add_scalar", a, float(c))

    # ------------------------------------------------------------------
    # reductions and linear algebra

    def sum(self, a: Node) -> Node:
        """Sum of all entries; result has shape ()."""
        return self._unary("sum", a)

    def sum_rows(self, a: Node) -> Node:
        """(n, k) -> (n, 1) row sums."""
        if a.value.ndim != 2:
            raise ShapeMismatch(f"sum_rows: expected 2-d, got {a.value.shape}")
        return self._unary("sum_rows", a)

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 1 or a.value.shape != b.value.shape:
            raise ShapeMismatch(f"dot: {a.value.shape} vs {b.value.shape}")
        return self._binary("dot", a, b)

    def matvec(self, w: Node, x: Node) -> Node:
        """(m, n) @ (n,) -> (m,)."""
        if w.value.ndim != 2 or x.value.ndim != 1 or w.value.shape[1] != x.value.shape[0]:
            raise ShapeMismatch(f"matvec: {w.value.shape} @ {x.value.shape}")
        return self._binary("matvec", w, x)

    def matmul(self, a: Node, b: Node) -> Node:
        """(n, k) @ (k, m) -> (n, m)."""
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
        return self._binary("matmul", a, b)

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """x @ w + b with b broadcast over rows: (n,k) @ (k,m) + (m,)."""
        if (
            x.value.ndim != 2
            or w.value.ndim != 2
            or x.value.shape[1] != w.value.shape[0]
            or b.value.shape != (w.value.shape[1],)
        ):
            raise ShapeMismatch(
                f"affine: {x.value.shape} @ {w.value.shape} + {b.value.shape}"
            )
        v = x.value @ w.value + b.value
        return self._push(
            Node(v, "affine", (x, w, b), None, x.needs_grad or w.needs_grad or b.needs_grad)
        )

    def concat(self, parts: list[Node], axis: int = 1) -> Node:
        if not parts:
            raise ShapeMismatch("concat: empty part list")
        v = np.concatenate([p.value for p in parts], axis=axis)
        sizes = [p.value.shape[axis] for p in parts]
        return self._push(
            Node(v, "concat", tuple(parts), (axis, sizes), any(p.needs_grad for p in parts))
        )

    # ------------------------------------------------------------------
    # indexed reads/writes

    def gather(self, a: Node, idx: np.ndarray) -> Node:
        """Row read a[idx]; backward scatter-adds into a."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeMismatch(f"gather: index must be 1-d, got {idx.shape}")
        return self._unary("gather", a, idx)

    def segment_sum(self, a: Node, ids: np.ndarray, num_segments: int) -> Node:
        """Sum rows of (n, k) into (num_segments, k) buckets given by ids."""
        ids = np.asarray(ids, dtype=np.int64)
        if a.value.ndim != 2 or ids.shape != (a.value.shape[0],):
            raise ShapeMismatch(f"segment_sum: {a.value.shape} with ids {ids.shape}")
        return self._unary("segment_sum", a, (ids, int(num_segments)))

    def row_scale(self, a: Node, w: np.ndarray) -> Node:
        """Scale row i of (n, k) by the constant w[i]."""
        w = _as_f64(w).reshape(-1)
        if a.value.ndim != 2 or w.shape[0] != a.value.shape[0]:
            raise ShapeMismatch(f"row_scale: {a.value.shape} with weights {w.shape}")
        return self._unary("row_scale", a, w)

    def mul_cols(self, a: Node, s: Node) -> Node:
        """Multiply each row of (n, k) by the (n, 1) column node s."""
        if a.value.ndim != 2 or s.value.shape != (a.value.shape[0], 1):
            raise ShapeMismatch(f"mul_cols: {a.value.shape} with {s.value.shape}")
        return self._binary("mul_cols", a, s)

    def cumsum_exclusive(self, a: Node) -> Node:
        """(n, k) exclusive prefix sums along axis 1."""
        if a.value.ndim != 2:
            raise ShapeMismatch(f"cumsum_exclusive: expected 2-d, got {a.value.shape}")
        return self._unary("cumsum_exclusive", a)

    def reshape(self, a: Node, shape: tuple) -> Node:
        if int(np.prod(shape)) != a.value.size:
            raise ShapeMismatch(f"reshape: {a.value.shape} -> {shape}")
        return self._unary("reshape", a, (tuple(shape), a.value.shape))

    # ------------------------------------------------------------------
    # execution

    def refresh(self):
        """Recompute every node value in topological order.

        Parameter leaves re-read their bound arrays, so perturbing a bound
        array in place and calling refresh re-evaluates the whole tape.
        Used by finite-difference tests; does not touch gradients.
        """
        for node in self.nodes:
            if node.op in ("const", "param"):
                node.value = node.aux
            else:
                node.value = _FORWARD[node.op](
                    tuple(p.value for p in node.parents), node.aux
                )

    def backward(self, root: Node) -> None:
        """Reverse accumulation from a scalar root. Single use per tape."""
        if self._used:
            raise TapeError("backward() already called on this tape")
        if root.value.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.value.shape}")
        self._used = True
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None or not node.needs_grad or node.op in ("const", "param"):
                continue
            _BACKWARD[node.op](node)

    def param_grads(self) -> dict[str, np.ndarray]:
        """Gradient per bound parameter; exact zeros for disconnected ones."""
        out = {}
        for name, node in self._params.items():
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


# ----------------------------------------------------------------------
# forward table (used at construction and by refresh)

def _guard_denominator(b: np.ndarray) -> np.ndarray:
    return np.where(np.abs(b) < DIV_EPS, np.copysign(DIV_EPS, b), b)


def _fwd_cumsum_exclusive(vals, aux):
    (a,) = vals
    c = np.cumsum(a, axis=1)
    c[:, 1:] = c[:, :-1]
    c[:, 0] = 0.0
    return c


def _fwd_segment_sum(vals, aux):
    (a,) = vals
    ids, num = aux
    n, k = a.shape
    flat = ids[:, None] * k + np.arange(k, dtype=np.int64)[None, :]
    out = np.bincount(flat.ravel(), weights=a.ravel(), minlength=num * k)
    return out.reshape(num, k)


_FORWARD = {
    "add": lambda v, aux: v[0] + v[1],
    "sub": lambda v, aux: v[0] - v[1],
    "mul": lambda v, aux: v[0] * v[1],
    "div": lambda v, aux: v[0] / _guard_denominator(v[1]),
    "neg": lambda v, aux: -v[0],
    "exp": lambda v, aux: np.exp(v[0]),
    "log": lambda v, aux: np.log(np.maximum(v[0], LOG_EPS)),
    "relu": lambda v, aux: np.maximum(v[0], 0.0),
    "softplus": lambda v, aux: softplus(v[0]),
    "sigmoid": lambda v, aux: sigmoid(v[0]),
    "clamp_min": lambda v, aux: np.maximum(v[0], aux),
    "scale": lambda v, aux: v[0] * aux,
    "add_scalar": lambda v, aux: v[0] + aux,
    "sum": lambda v, aux: np.asarray(np.sum(v[0])),
    "sum_rows": lambda v, aux: np.sum(v[0], axis=1, keepdims=True),
    "dot": lambda v, aux: np.asarray(np.dot(v[0], v[1])),
    "matvec": lambda v, aux: v[0] @ v[1],
    "matmul": lambda v, aux: v[0] @ v[1],
    "affine": lambda v, aux: v[0] @ v[1] + v[2],
    "concat": lambda v, aux: np.concatenate(v, axis=aux[0]),
    "gather": lambda v, aux: v[0][aux],
    "segment_sum": _fwd_segment_sum,
    "row_scale": lambda v, aux: v[0] * aux[:, None],
    "mul_cols": lambda v, aux: v[0] * v[1],
    "cumsum_exclusive": _fwd_cumsum_exclusive,
    "reshape": lambda v, aux: v[0].reshape(aux[0]),
}


# ----------------------------------------------------------------------
# backward table

def _scatter_add_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray):
    # bincount beats np.add.at for the duplicate-heavy index sets seen here
    n, k = target.shape
    flat = idx[:, None] * k + np.arange(k, dtype=np.int64)[None, :]
    target += np.bincount(
        flat.ravel(), weights=rows.ravel(), minlength=n * k
    ).reshape(n, k)


def _bwd_add(n):
    a, b = n.parents
    if a.needs_grad:
        _acc(a, n.grad)
    if b.needs_grad:
        _acc(b, n.grad)


def _bwd_sub(n):
    a, b = n.parents
    if a.needs_grad:
        _acc(a, n.grad)
    if b.needs_grad:
        _acc(b, -n.grad)


def _bwd_mul(n):
    a, b = n.parents
    if a.needs_grad:
        _acc(a, n.grad * b.value)
    if b.needs_grad:
        _acc(b, n.grad * a.value)


def _bwd_div(n):
    a, b = n.parents
    denom = _guard_denominator(b.value)
    if a.needs_grad:
        _acc(a, n.grad / denom)
    if b.needs_grad:
        open_region = np.abs(b.value) >= DIV_EPS
        _acc(b, np.where(open_region, -n.grad * a.value / (denom * denom), 0.0))


def _bwd_neg(n):
    _acc(n.parents[0], -n.grad)


def _bwd_exp(n):
    _acc(n.parents[0], n.grad * n.value)


def _bwd_log(n):
    a = n.parents[0]
    open_region = a.value >= LOG_EPS
    _acc(a, np.where(open_region, n.grad / np.maximum(a.value, LOG_EPS), 0.0))


def _bwd_relu(n):
    a = n.parents[0]
    _acc(a, n.grad * (a.value > 0))


def _bwd_softplus(n):
    a = n.parents[0]
    _acc(a, n.grad * sigmoid(a.value))


def _bwd_sigmoid(n):
    _acc(n.parents[0], n.grad * n.value * (1.0 - n.value))


def _bwd_clamp_min(n):
    a = n.parents[0]
    _acc(a, n.grad * (a.value >= n.aux))


def _bwd_scale(n):
    _acc(n.parents[0], n.grad * n.aux)


def _bwd_add_scalar(n):
    _acc(n.parents[0], n.grad)


def _bwd_sum(n):
    a = n.parents[0]
    _acc(a, np.broadcast_to(n.grad, a.value.shape))


def _bwd_sum_rows(n):
    a = n.parents[0]
    _acc(a, np.broadcast_to(n.grad, a.value.shape))


def _bwd_dot(n):
    a, b = n.parents
    if a.needs_grad:
        _acc(a, n.grad * b.value)
    if b.needs_grad:
        _acc(b, n.grad * a.value)


def _bwd_matvec(n):
    w, x = n.parents
    if w.needs_grad:
        _acc(w, np.outer(n.grad, x.value))
    if x.needs_grad:
        _acc(x, w.value.T @ n.grad)


def _bwd_matmul(n):
    a, b = n.parents
    if a.needs_grad:
        _acc(a, n.grad @ b.value.T)
    if b.needs_grad:
        _acc(b, a.value.T @ n.grad)


def _bwd_affine(n):
    x, w, b = n.parents
    if x.needs_grad:
        _acc(x, n.grad @ w.value.T)
    if w.needs_grad:
        _acc(w, x.value.T @ n.grad)
    if b.needs_grad:
        _acc(b, n.grad.sum(axis=0))


def _bwd_concat(n):
    axis, sizes = n.aux
    offset = 0
    for p, size in zip(n.parents, sizes):
        if p.needs_grad:
            sl = [slice(None)] * n.grad.ndim
            sl[axis] = slice(offset, offset + size)
            _acc(p, n.grad[tuple(sl)])
        offset += size


def _bwd_gather(n):
    a = n.parents[0]
    if a.grad is None:
        a.grad = np.zeros_like(a.value)
    if a.value.ndim == 2:
        _scatter_add_rows(a.grad, n.aux, n.grad)
    else:
        np.add.at(a.grad, n.aux, n.grad)


def _bwd_segment_sum(n):
    a = n.parents[0]
    ids, _ = n.aux
    _acc(a, n.grad[ids])


def _bwd_row_scale(n):
    _acc(n.parents[0], n.grad * n.aux[:, None])


def _bwd_mul_cols(n):
    a, s = n.parents
    if a.needs_grad:
        _acc(a, n.grad * s.value)
    if s.needs_grad:
        _acc(s, np.sum(n.grad * a.value, axis=1, keepdims=True))


def _bwd_cumsum_exclusive(n):
    # d/dx_j of sum_i g_i * cumsum_ex(x)_i  =  sum_{i > j} g_i
    g = n.grad
    rev = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
    _acc(n.parents[0], rev - g)


def _bwd_reshape(n):
    _acc(n.parents[0], n.grad.reshape(n.aux[1]))


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "neg": _bwd_neg,
    "exp": _bwd_exp,
    "log": _bwd_log,
    "relu": _bwd_relu,
    "softplus": _bwd_softplus,
    "sigmoid": _bwd_sigmoid,
    "clamp_min": _bwd_clamp_min,
    "scale": _bwd_scale,
    "add_scalar": _bwd_add_scalar,
    "sum": _bwd_sum,
    "sum_rows": _bwd_sum_rows,
    "dot": _bwd_dot,
    "matvec": _bwd_matvec,
    "matmul": _bwd_matmul,
    "affine": _bwd_affine,
    "concat": _bwd_concat,
    "gather": _bwd_gather,
    "segment_sum": _bwd_segment_sum,
    "row_scale": _bwd_row_scale,
    "mul_cols": _bwd_mul_cols,
    "cumsum_exclusive": _bwd_cumsum_exclusive,
    "reshape": _bwd_reshape,
}
