"""Small reverse-mode differentiation core on float64 numpy arrays.

Every primitive builds a node holding its forward value plus a closure that
maps the upstream gradient to one gradient per parent.  Nodes are only
recorded when at least one parent requires a gradient, so evaluating frozen
parts of a model costs no graph memory.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CorruptTensor, NonFiniteValue, ShapeMismatch, ZeroNormVector

LAYER_NORM_EPS = 1e-5
ZERO_NORM = 1e-12


class Tensor:
    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- reverse pass --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar --------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    """|a| with subgradient 0 at the kink."""
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo, hi):
    """Clamp to constant bounds; gradient passes only strictly inside them."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.minimum(np.maximum(a.data, lo), hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        return (_unbroadcast(g * mask, a.shape),)

    return _node(out, (a,), backward)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def getitem(a, index):
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with integers or arrays, not tensors")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward)


def gather(a, idx):
    """Rows of ``a`` selected by an integer index vector."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather index outside [0, {a.shape[0]})")
    return getitem(a, idx)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a):
    """Running sum along axis 0."""
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=0)
    return _node(out, (a,), lambda g: (np.cumsum(g[::-1], axis=0)[::-1],))


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2:  # matrix @ vector
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2:  # vector @ matrix
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _node(out, (a, b), backward)


def conv1d(x, weight, bias=None, stride=1, padding=1):
    """Convolution along time.

    ``x`` is (T, C_in), ``weight`` is (K, C_in, C_out); zero padding of
    ``padding`` frames on both ends.  Output is (T_out, C_out) with
    ``T_out = (T + 2*padding - K) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv1d input {x.shape} vs kernel {weight.shape}")
    k, c_in, c_out = weight.shape
    t_in = x.shape[0]
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeMismatch(f"conv1d input of length {t_in} too short for kernel {k}")
    padded = np.zeros((t_in + 2 * padding, c_in))
    padded[padding:padding + t_in] = x.data
    rows = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = padded[rows].reshape(t_out, k * c_in)
    w2 = weight.data.reshape(k * c_in, c_out)
    out = cols @ w2
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"conv1d bias {bias.shape} vs {c_out} channels")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        dcols = (g @ w2.T).reshape(t_out, k, c_in)
        dpad = np.zeros_like(padded)
        np.add.at(dpad, rows, dcols)
        grads = [dpad[padding:padding + t_in], (cols.T @ g).reshape(k, c_in, c_out)]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward)


# ----------------------------------------------------------------------
# normalisation and probabilities
# ----------------------------------------------------------------------
def row_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward)


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalise each row over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gamma, beta), backward)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of -log softmax(logits)[row, target]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, targets]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (g * p / n,)

    return _node(loss, (logits,), backward)


# ----------------------------------------------------------------------
# similarity
# ----------------------------------------------------------------------
def normalize_rows(x):
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(norms < ZERO_NORM):
        raise ZeroNormVector("row with (near) zero norm")
    return x / sqrt(tsum(x * x, axis=-1, keepdims=True))


def cosine_similarity(x, y):
    """Cosine of the angle between two vectors."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 1 or x.shape != y.shape or x.shape[0] < 1:
        raise ShapeMismatch(f"cosine of {x.shape} and {y.shape}")
    return tsum(normalize_rows(x) * normalize_rows(y))


def cosine_matrix(x, y):
    """All-pairs cosine: entry (i, j) = cos(x_i, y_j)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeMismatch(f"cosine matrix of {x.shape} and {y.shape}")
    return matmul(normalize_rows(x), transpose(normalize_rows(y)))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "sqrt": sqrt, "abs": tabs, "tanh": tanh,
    "relu": relu, "sigmoid": sigmoid, "clip": clip,
    "reshape": reshape, "transpose": transpose, "getitem": getitem,
    "gather": gather, "concat": concat, "stack": stack,
    "sum": tsum, "mean": tmean, "cumsum": cumsum,
    "matmul": matmul, "conv1d": conv1d,
    "row_softmax": row_softmax, "log_softmax": log_softmax,
    "layer_norm": layer_norm, "softmax_cross_entropy": softmax_cross_entropy,
}


def primitive_set():
    """Name -> callable for every differentiable primitive."""
    return dict(PRIMITIVES)


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------
@dataclass
class GradReport:
    max_abs_rel_error: float
    worst_coordinate: tuple
    analytic: float
    numeric: float
    checked: int = 0
    excluded: int = 0

    def passed(self, tol=1e-4):
        return self.max_abs_rel_error < tol


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _scalar_value(f):
    out = f()
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(value):
        raise NonFiniteValue("objective is not finite at a probe point")
    return value


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon=1e-5, exclusion=None) -> GradReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` rebuilds the scalar objective from the current values of
    ``params`` each call.  ``exclusion(param_index, coord)`` returns True for
    coordinates that must be skipped (e.g. perturbations crossing a firing
    threshold).  Parameter data is restored after every probe.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteValue("objective is not finite at the base point")
    out.backward()

    worst = GradReport(0.0, (), 0.0, 0.0)
    checked = excluded = 0
    for pi, p in enumerate(params):
        analytic_all = np.zeros_like(p.data) if p.grad is None else p.grad
        for coord in np.ndindex(p.data.shape):
            if exclusion is not None and exclusion(pi, coord):
                excluded += 1
                continue
            orig = p.data[coord]
            p.data[coord] = orig + epsilon
            f_plus = _scalar_value(f)
            p.data[coord] = orig - epsilon
            f_minus = _scalar_value(f)
            p.data[coord] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = float(analytic_all[coord])
            err = relative_error(analytic, numeric)
            checked += 1
            if err > worst.max_abs_rel_error or not worst.worst_coordinate:
                worst = GradReport(err, (pi,) + tuple(coord), analytic, numeric)
    worst.checked, worst.excluded = checked, excluded
    return worst


def signature_exclusion(params: Sequence[Tensor], signature: Callable[[], object], epsilon):
    """Exclusion predicate skipping coordinates whose +-epsilon move changes
    ``signature()`` (any hashable summary of discrete decisions)."""
    base = signature()

    def exclude(pi, coord):
        p = params[pi]
        orig = p.data[coord]
        try:
            for delta in (epsilon, -epsilon):
                p.data[coord] = orig + delta
                if signature() != base:
                    return True
            return False
        finally:
            p.data[coord] = orig

    return exclude


# ----------------------------------------------------------------------
# binary serialisation: b"TNSR", u32 rank, u64 dims, f64 row-major (LE)
# ----------------------------------------------------------------------
TENSOR_MAGIC = b"TNSR"


def write_tensor(stream, array):
    array = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(array.tobytes(order="C"))


def read_tensor(stream):
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise CorruptTensor(f"bad tensor magic {magic!r}")
    head = stream.read(4)
    if len(head) != 4:
        raise CorruptTensor("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    raw_dims = stream.read(8 * rank)
    if len(raw_dims) != 8 * rank:
        raise CorruptTensor("truncated tensor dims")
    dims = struct.unpack(f"<{rank}Q", raw_dims)
    count = int(np.prod(dims)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise CorruptTensor("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_to_bytes(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob):
    return read_tensor(io.BytesIO(blob))


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)
