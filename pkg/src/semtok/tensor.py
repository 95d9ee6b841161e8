"""Float64 tensors with define-by-run reverse-mode autodiff.

Only the operations the model needs are provided. Broadcasting is limited to
two cases: a 1-D row vector added/multiplied onto every row of a matrix, and
a single-element tensor onto anything.

Every op records an op tag, its parents and a saved context; the backward
rule for a tag lives in ``BACKWARD``. Ops also report floating point work to
an optional per-thread counter (see ``count_flops``).
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class ContractError(ValueError):
    pass


_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


class FlopCounter:
    """Accumulates floating point operations per op tag."""

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextmanager
def count_flops():
    prev = getattr(_local, "counter", None)
    counter = FlopCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _flops(op, n):
    c = getattr(_local, "counter", None)
    if c is not None:
        c.add(op, int(n))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self.ctx = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data

    def detach(self):
        return _const(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar, got shape {self.shape}")
        order = _topo(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = BACKWARD[node.op](g, node)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _const(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t.op = None
    t.parents = ()
    t.ctx = None
    t.name = None
    return t


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return _const(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data):
    return _const(np.asarray(data, dtype=np.float64))


def _node(data, op, parents, ctx=None):
    t = _const(data)
    if is_grad_enabled():
        for p in parents:
            if p.requires_grad:
                t.requires_grad = True
                t.op = op
                t.parents = parents
                t.ctx = ctx
                break
    return t


BACKWARD = {}


def _rule(name):
    def deco(f):
        BACKWARD[name] = f
        return f

    return deco


def _bcast_kind(a, b):
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row"
    raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def _bdata(b, kind):
    return b.data.reshape(()) if kind == "scalar" else b.data


def _reduce_to(g, kind, shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.sum(axis=0)


# ------------------------------------------------------------- elementwise

def add(a, b):
    kind = _bcast_kind(a, b)
    _flops("add", a.size)
    return _node(a.data + _bdata(b, kind), "add", (a, b), kind)


@_rule("add")
def _add_bwd(g, node):
    a, b = node.parents
    return g, _reduce_to(g, node.ctx, b.shape)


def sub(a, b):
    kind = _bcast_kind(a, b)
    _flops("sub", a.size)
    return _node(a.data - _bdata(b, kind), "sub", (a, b), kind)


@_rule("sub")
def _sub_bwd(g, node):
    a, b = node.parents
    return g, -_reduce_to(g, node.ctx, b.shape)


def mul(a, b):
    kind = _bcast_kind(a, b)
    _flops("mul", a.size)
    return _node(a.data * _bdata(b, kind), "mul", (a, b), kind)


@_rule("mul")
def _mul_bwd(g, node):
    a, b = node.parents
    return g * _bdata(b, node.ctx), _reduce_to(g * a.data, node.ctx, b.shape)


def scale(a, c):
    _flops("scale", a.size)
    return _node(a.data * c, "scale", (a,), c)


@_rule("scale")
def _scale_bwd(g, node):
    return (g * node.ctx,)


def add_scalar(a, c):
    _flops("add_scalar", a.size)
    return _node(a.data + c, "add_scalar", (a,))


@_rule("add_scalar")
def _add_scalar_bwd(g, node):
    return (g,)


def scale_rows(a, s):
    """Multiply row ``i`` of a matrix by ``s[i]``."""
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows: {a.shape} vs {s.shape}")
    _flops("scale_rows", a.size)
    return _node(a.data * s.data[:, None], "scale_rows", (a, s))


@_rule("scale_rows")
def _scale_rows_bwd(g, node):
    a, s = node.parents
    return g * s.data[:, None], (g * a.data).sum(axis=1)


def relu(a):
    _flops("relu", a.size)
    return _node(np.maximum(a.data, 0.0), "relu", (a,))


@_rule("relu")
def _relu_bwd(g, node):
    # relu'(0) := 0
    return (g * (node.parents[0].data > 0.0),)


def sigmoid(a):
    _flops("sigmoid", 4 * a.size)
    return _node(expit(a.data), "sigmoid", (a,))


@_rule("sigmoid")
def _sigmoid_bwd(g, node):
    y = expit(node.parents[0].data)
    return (g * y * (1.0 - y),)


def gelu(a):
    """GELU, tanh approximation."""
    _flops("gelu", 8 * a.size)
    return _node(kernels.gelu_fwd(a.data), "gelu", (a,))


@_rule("gelu")
def _gelu_bwd(g, node):
    return (kernels.gelu_bwd(np.ascontiguousarray(g), node.parents[0].data),)


# ------------------------------------------------------------- reductions

def sum(a):  # noqa: A001
    """Sum of all entries, correctly rounded (order independent)."""
    _flops("sum", a.size)
    return _node(np.array(math.fsum(a.data.ravel())), "sum", (a,))


@_rule("sum")
def _sum_bwd(g, node):
    return (np.full(node.parents[0].shape, float(g)),)


def mean(a):
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    _flops("mean", a.size + 1)
    return _node(np.array(math.fsum(a.data.ravel()) * (1.0 / a.size)), "mean", (a,))


@_rule("mean")
def _mean_bwd(g, node):
    a = node.parents[0]
    return (np.full(a.shape, float(g) * (1.0 / a.size)),)


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    _flops("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[1])
    return _node(a.data @ b.data, "matmul", (a, b))


@_rule("matmul")
def _matmul_bwd(g, node):
    a, b = node.parents
    return g @ b.data.T, a.data.T @ g


def matvec(a, v):
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: {a.shape} @ {v.shape}")
    _flops("matvec", 2 * a.size)
    return _node(a.data @ v.data, "matvec", (a, v))


@_rule("matvec")
def _matvec_bwd(g, node):
    a, v = node.parents
    return np.outer(g, v.data), a.data.T @ g


# ------------------------------------------------------------- structural

def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose needs 2-D, got {a.shape}")
    return _node(a.data.T.copy(), "transpose", (a,))


@_rule("transpose")
def _transpose_bwd(g, node):
    return (g.T,)


def reshape(a, shape):
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape {a.shape} -> {tuple(shape)}") from None
    return _node(out, "reshape", (a,))


@_rule("reshape")
def _reshape_bwd(g, node):
    return (g.reshape(node.parents[0].shape),)


def concat_rows(parts):
    parts = tuple(parts)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.ndim != 2 for p in parts):
        raise DimensionError(f"concat_rows: {[p.shape for p in parts]}")
    return _node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts)


@_rule("concat_rows")
def _concat_rows_bwd(g, node):
    out = []
    start = 0
    for p in node.parents:
        stop = start + p.shape[0]
        out.append(g[start:stop])
        start = stop
    return out


def slice_rows(a, start, stop):
    if not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f"slice_rows [{start}:{stop}] of {a.shape}")
    return _node(a.data[start:stop].copy(), "slice_rows", (a,), (start, stop))


@_rule("slice_rows")
def _slice_rows_bwd(g, node):
    a = node.parents[0]
    start, stop = node.ctx
    out = np.zeros(a.shape)
    out[start:stop] = g
    return (out,)


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows index out of range for {a.shape}")
    return _node(a.data[idx], "gather_rows", (a,), idx)


@_rule("gather_rows")
def _gather_rows_bwd(g, node):
    out = np.zeros(node.parents[0].shape)
    np.add.at(out, node.ctx, g)
    return (out,)


def embedding_lookup(table, idx):
    """Rows of a parameter table selected by integer ids."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range for table {table.shape}")
    return _node(table.data[idx], "embedding_lookup", (table,), idx)


@_rule("embedding_lookup")
def _embedding_bwd(g, node):
    out = np.zeros(node.parents[0].shape)
    np.add.at(out, node.ctx, g)
    return (out,)


def scatter_rows(base, idx, src):
    """Copy of ``base`` with rows ``idx`` replaced by the rows of ``src``."""
    idx = np.asarray(idx, dtype=np.int64)
    if src.shape[0] != idx.size or base.shape[1:] != src.shape[1:]:
        raise DimensionError(f"scatter_rows: {src.shape} into {base.shape} at {idx.size} rows")
    out = base.data.copy()
    out[idx] = src.data
    return _node(out, "scatter_rows", (base, src), idx)


@_rule("scatter_rows")
def _scatter_rows_bwd(g, node):
    idx = node.ctx
    gb = g.copy()
    gb[idx] = 0.0
    return gb, g[idx]


def select_rows(mask, a, b):
    """Rows of ``a`` where ``mask`` is true, rows of ``b`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != (a.shape[0],):
        raise DimensionError(f"select_rows: {a.shape}, {b.shape}, mask {mask.shape}")
    m = mask[:, None]
    return _node(np.where(m, a.data, b.data), "select_rows", (a, b), m)


@_rule("select_rows")
def _select_rows_bwd(g, node):
    m = node.ctx
    return np.where(m, g, 0.0), np.where(m, 0.0, g)


# ------------------------------------------------------------- nn kernels

def _full_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise DimensionError(f"mask {mask.shape} not broadcastable to {shape}") from None
    return np.ascontiguousarray(mask)


def softmax_lastdim(a, mask=None):
    """Row softmax over the last axis; masked (False) entries come out exactly 0."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_lastdim needs 2-D, got {a.shape}")
    mask = np.ones(a.shape, dtype=bool) if mask is None else _full_mask(mask, a.shape)
    if not mask.any(axis=1).all():
        raise DegenerateRowError("softmax row with every entry masked")
    _flops("softmax", 5 * a.size)
    y = kernels.softmax_fwd(np.ascontiguousarray(a.data), mask)
    return _node(y, "softmax", (a,), y)


@_rule("softmax")
def _softmax_bwd(g, node):
    return (kernels.softmax_bwd(np.ascontiguousarray(g), node.ctx),)


def layernorm(a, gain, bias, eps=1e-6):
    if a.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise DimensionError(f"layernorm: {a.shape}, gain {gain.shape}, bias {bias.shape}")
    _flops("layernorm", 8 * a.size)
    y, xhat, rstd = kernels.layernorm_fwd(np.ascontiguousarray(a.data), gain.data, bias.data, eps)
    return _node(y, "layernorm", (a, gain, bias), (xhat, rstd))


@_rule("layernorm")
def _layernorm_bwd(g, node):
    xhat, rstd = node.ctx
    return kernels.layernorm_bwd(np.ascontiguousarray(g), xhat, rstd, node.parents[1].data)


def attention(q, k, v, heads, keymask=None):
    """Multi-head scaled dot-product attention over the rows of q, k, v.

    ``keymask`` (1-D bool, True = visible) hides padded key rows; hidden keys
    get exactly zero weight.
    """
    m, d = q.shape
    if k.shape != (m, d) or v.shape != (m, d) or d % heads:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape} heads={heads}")
    keymask = np.ones(m, dtype=bool) if keymask is None else np.asarray(keymask, dtype=bool)
    if keymask.shape != (m,):
        raise DimensionError(f"key mask {keymask.shape} for {m} rows")
    if not keymask.any():
        raise DegenerateRowError("attention with every key padded")
    _flops("attention", 4 * m * m * d + 6 * m * m * heads)
    out, p = kernels.attention_fwd(
        np.ascontiguousarray(q.data), np.ascontiguousarray(k.data),
        np.ascontiguousarray(v.data), heads, keymask)
    return _node(out, "attention", (q, k, v), (p, heads))


@_rule("attention")
def _attention_bwd(g, node):
    q, k, v = node.parents
    p, heads = node.ctx
    return kernels.attention_bwd(np.ascontiguousarray(g), q.data, k.data, v.data, p, heads)


def cross_entropy(logits, label):
    """Negative log-likelihood of ``label`` under softmax(logits), logits 1-D."""
    if logits.ndim != 1 or not 0 <= label < logits.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, label {label}")
    z = logits.data - logits.data.max()
    lse = math.log(math.fsum(np.exp(z)))
    _flops("cross_entropy", 5 * logits.size)
    return _node(np.array(lse - z[label]), "cross_entropy", (logits,), int(label))


@_rule("cross_entropy")
def _cross_entropy_bwd(g, node):
    x = node.parents[0].data
    p = np.exp(x - x.max())
    p /= p.sum()
    p[node.ctx] -= 1.0
    return (float(g) * p,)


def make_rng(seed, *keys):
    """Counter-based generator (Philox) keyed by a seed plus integer path.

    The same (seed, keys) gives the same stream on every platform, so
    independent streams can be derived for (step, sample) or (layer, row)
    without sharing state.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))
