"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is deliberately small: tensors wrap numpy arrays, every
operation records a vector-Jacobian closure, and ``Tensor.backward`` runs
one reverse topological sweep from a scalar root.  Gradients accumulate
into ``.grad`` until ``zero_grad`` is called, matching the usual optimizer
loop.  Results that do not depend on any gradient-requiring input carry no
graph at all, so frozen-model inference never pays for bookkeeping.

Everything is double precision: the text attack differentiates through
exp/log chains that single precision cannot push through finite-difference
verification at the tolerances we test.

Graphs are not thread safe.  Keep each graph and the tensors it creates on
a single thread; independent graphs may run in parallel as long as shared
parameter tensors are frozen (requires_grad False).
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class AutodiffError(ValueError):
    """Base class for errors raised by the tensor engine."""


class DomainError(AutodiffError):
    """An input is outside the mathematical domain of the operation."""


class ParameterError(AutodiffError):
    """A hyperparameter (temperature, step size, ...) is invalid."""


class GraphError(AutodiffError):
    """The differentiation API was misused (non-scalar root, bad shapes)."""


class NumericalError(AutodiffError):
    """A non-finite value surfaced where finite arithmetic was required."""


class SerializationError(AutodiffError):
    """A tensor blob could not be parsed."""


_Vjp = Callable[[np.ndarray], tuple]


class Tensor:
    """Dense float64 array, optionally tracked by the reverse-mode graph.

    ``values`` and ``grad`` (once populated) always share one shape.  After
    ``backward`` from a scalar root, every reachable node with
    ``requires_grad`` holds the chain-rule derivative of the root in
    ``grad``; repeated backward calls accumulate until ``zero_grad``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: _Vjp | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar root, accumulating into ``.grad``."""
        if self.values.size != 1:
            raise GraphError(f"backward() requires a scalar root, got shape {self.shape}")
        order = _toposort(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in order:
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in node._vjp(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and arrays lift to constants.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: tuple, vjp: _Vjp, op: str) -> Tensor:
    out = Tensor(values)
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
            out._op = op
            break
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes ordered so every node precedes all of its parents."""
    post: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return ((a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(g, b.values.shape)))

    return _node(a.values + b.values, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return ((a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(-g, b.values.shape)))

    return _node(a.values - b.values, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.values, b.values

    def vjp(g):
        return ((a, _unbroadcast(g * bv, av.shape)), (b, _unbroadcast(g * av, bv.shape)))

    return _node(av * bv, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.values, b.values

    def vjp(g):
        return (
            (a, _unbroadcast(g / bv, av.shape)),
            (b, _unbroadcast(-g * av / (bv * bv), bv.shape)),
        )

    return _node(av / bv, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return ((a, -g),)

    return _node(-a.values, (a,), vjp, "neg")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)

    def vjp(g):
        return ((a, g * out),)

    return _node(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    """Natural log with a floor of ``LOG_FLOOR`` guarding against -inf."""
    a = _lift(a)
    floored = np.maximum(a.values, LOG_FLOOR)
    mask = a.values >= LOG_FLOOR

    def vjp(g):
        return ((a, g * mask / floored),)

    return _node(np.log(floored), (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.values)

    def vjp(g):
        return ((a, g * 0.5 / out),)

    return _node(out, (a,), vjp, "sqrt")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.values)

    def vjp(g):
        return ((a, g * (1.0 - out * out)),)

    return _node(out, (a,), vjp, "tanh")


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    a = _lift(a)
    av = a.values
    cdf = 0.5 * (1.0 + _erf(av * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * av * av) * _INV_SQRT2PI
        return ((a, g * (cdf + av * pdf)),)

    return _node(av * cdf, (a,), vjp, "gelu")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    av = a.values
    mask = (av >= lo) & (av <= hi)

    def vjp(g):
        return ((a, g * mask),)

    return _node(np.clip(av, lo, hi), (a,), vjp, "clamp")


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    av = a.values

    def vjp(g):
        if axis is None and not keepdims:
            return ((a, np.broadcast_to(g, av.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, av.shape).copy()),)

    return _node(av.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean; doubles as mean pooling over sequence positions."""
    a = _lift(a)
    av = a.values
    if axis is None:
        count = av.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([av.shape[i] for i in axes]))

    def vjp(g):
        if axis is None and not keepdims:
            return ((a, np.broadcast_to(g / count, av.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / count, av.shape).copy()),)

    return _node(av.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def max_along(a, axis: int) -> Tensor:
    """Max reduction; gradient flows to the first maximal entry per slice."""
    a = _lift(a)
    av = a.values
    amax = av.argmax(axis=axis)

    def vjp(g):
        z = np.zeros_like(av)
        np.put_along_axis(z, np.expand_dims(amax, axis), np.expand_dims(g, axis), axis)
        return ((a, z),)

    return _node(av.max(axis=axis), (a,), vjp, "max_along")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.values, b.values

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return ((a, g * bv), (b, g * av))
        if av.ndim == 1:
            return ((a, bv @ g), (b, np.outer(av, g)))
        if bv.ndim == 1:
            return ((a, np.outer(g, bv)), (b, av.T @ g))
        return ((a, g @ bv.T), (b, av.T @ g))

    return _node(np.asarray(av @ bv), (a, b), vjp, "matmul")


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b for 2-d x; the workhorse of every projection."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    xv, wv = x.values, w.values

    def vjp(g):
        return ((x, g @ wv.T), (w, xv.T @ g), (b, _unbroadcast(g, b.values.shape)))

    return _node(xv @ wv + b.values, (x, w, b), vjp, "linear")


def multi_head_attention(qkv, heads: int, bias: np.ndarray | None = None) -> Tensor:
    """All attention heads of one block, fused into a single node.

    ``qkv`` is the (S, 3H) projection output; head h reads its query, key,
    and value slices, forms row-softmax((q k^T)/sqrt(dh) + bias), and the
    per-head contexts are re-concatenated to (S, H).  ``bias`` is an
    optional constant (S, S) additive mask (causal masking).
    """
    qkv = _lift(qkv)
    s, h3 = qkv.values.shape
    if h3 % 3:
        raise GraphError(f"qkv width {h3} is not divisible by 3")
    width = h3 // 3
    if width % heads:
        raise GraphError(f"hidden width {width} is not divisible by {heads} heads")
    dh = width // heads
    scale = 1.0 / np.sqrt(dh)
    parts = qkv.values.reshape(s, 3, heads, dh).transpose(1, 2, 0, 3)
    q, k, v = parts[0], parts[1], parts[2]
    scores = q @ k.transpose(0, 2, 1) * scale
    if bias is not None:
        scores = scores + bias
    scores = scores - scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    context = att @ v

    def vjp(g):
        go = g.reshape(s, heads, dh).transpose(1, 0, 2)
        dv = att.transpose(0, 2, 1) @ go
        da = go @ v.transpose(0, 2, 1)
        ds = (da - (da * att).sum(axis=-1, keepdims=True)) * att * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dqkv = np.stack((dq, dk, dv)).transpose(2, 0, 1, 3).reshape(s, h3)
        return ((qkv, dqkv),)

    return _node(context.transpose(1, 0, 2).reshape(s, width), (qkv,), vjp, "multi_head_attention")


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.values.ndim != 2:
        raise GraphError(f"transpose expects a 2-d tensor, got shape {a.shape}")

    def vjp(g):
        return ((a, g.T),)

    return _node(a.values.T, (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.values.shape

    def vjp(g):
        return ((a, g.reshape(src)),)

    return _node(a.values.reshape(shape), (a,), vjp, "reshape")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _lift(a)
    av = a.values
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        z = np.zeros_like(av)
        z[idx] = g
        return ((a, z),)

    return _node(av[idx].copy(), (a,), vjp, "narrow")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    if not parts:
        raise GraphError("concat needs at least one tensor")
    parts = tuple(_lift(p) for p in parts)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(zip(parts, np.split(g, offsets, axis=axis)))

    return _node(np.concatenate([p.values for p in parts], axis=axis), parts, vjp, "concat")


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.values.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(np.argmax((ids < 0) | (ids >= n)))
        raise DomainError(f"gather_rows: id {int(ids[bad])} at position {bad} outside table of {n} rows")

    def vjp(g):
        z = np.zeros_like(table.values)
        np.add.at(z, ids, g)
        return ((table, z),)

    return _node(table.values[ids], (table,), vjp, "gather_rows")


def extract_patches(a, patch: int) -> Tensor:
    """Slice a (C, H, W) image into row-major flattened square patches.

    Output row ``gy * (W/patch) + gx`` holds patch (gy, gx) flattened in
    (C, patch, patch) order, matching the inverse reassembly in the vjp.
    """
    a = _lift(a)
    av = a.values
    if av.ndim != 3:
        raise GraphError(f"extract_patches expects (C, H, W), got shape {a.shape}")
    c, h, w = av.shape
    if h % patch or w % patch:
        raise DomainError(f"extract_patches: {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch

    def vjp(g):
        back = g.reshape(gh, gw, c, patch, patch).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
        return ((a, back),)

    out = av.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    return _node(out, (a,), vjp, "extract_patches")


# ---------------------------------------------------------------------------
# normalization


def softmax(a, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax with max-subtraction for stability."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    a = _lift(a)
    z = a.values / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((a, (g - inner) * y / tau),)

    return _node(y, (a,), vjp, "softmax")


def layer_norm(a, gain, bias) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    av = a.values
    mu = av.mean(axis=-1, keepdims=True)
    centered = av - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * istd
    gv = gain.values

    def vjp(g):
        gx = g * gv
        dx = istd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (
            (a, dx),
            (gain, _unbroadcast(g * xhat, gain.values.shape)),
            (bias, _unbroadcast(g, bias.values.shape)),
        )

    return _node(xhat * gv + bias.values, (a, gain, bias), vjp, "layer_norm")


PRIMITIVE_NAMES = frozenset(
    {
        "add", "sub", "mul", "div", "neg",
        "exp", "log", "sqrt", "tanh", "gelu", "clamp",
        "sum", "mean", "max_along",
        "matmul", "linear", "multi_head_attention",
        "transpose", "reshape", "narrow", "concat",
        "gather_rows", "extract_patches",
        "softmax", "layer_norm",
    }
)


# ---------------------------------------------------------------------------
# composites used across the codebase


def log_softmax(a, axis: int = -1) -> Tensor:
    """Composed from registered primitives; the max shift is a constant."""
    a = _lift(a)
    shift = a.values.max(axis=axis, keepdims=True)
    shifted = sub(a, shift)
    lse = log(reduce_sum(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def stack_rows(tensors: Sequence) -> Tensor:
    """Stack same-size tensors as rows of a 2-d tensor."""
    return concat([reshape(t, (1, _lift(t).values.size)) for t in tensors], axis=0)


def cosine_similarity(u, v) -> Tensor:
    """cos(u, v) in [-1, 1] for 1-d tensors, differentiable in both."""
    u, v = _lift(u), _lift(v)
    if u.values.ndim != 1 or v.values.ndim != 1:
        raise GraphError("cosine_similarity expects 1-d tensors")
    if u.values.shape != v.values.shape or u.values.size < 1:
        raise GraphError(
            f"cosine_similarity expects matching non-empty lengths, got {u.shape} and {v.shape}"
        )
    if not np.any(u.values):
        raise DomainError("cosine_similarity: first argument has zero norm")
    if not np.any(v.values):
        raise DomainError("cosine_similarity: second argument has zero norm")
    dot = reduce_sum(mul(u, v))
    nu = sqrt(reduce_sum(mul(u, u)))
    nv = sqrt(reduce_sum(mul(v, v)))
    return div(dot, mul(nu, nv))


def softmax_with_temperature(logits, tau: float) -> Tensor:
    """Probability vector over a 1-d logit tensor at temperature ``tau``."""
    logits = _lift(logits)
    if logits.values.ndim != 1:
        raise GraphError(f"softmax_with_temperature expects a 1-d tensor, got shape {logits.shape}")
    return softmax(logits, tau=tau, axis=-1)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, points, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps one or more tensors to a scalar tensor and must be pure.
    Error per coordinate is |analytic - numeric| / max(1, |numeric|); the
    maximum over all coordinates of all inputs is returned.
    """
    if step <= 0:
        raise ParameterError(f"grad_check step must be positive, got {step}")
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], (Tensor, np.ndarray)):
        pts = list(points)
    else:
        pts = [points]
    leaves = [Tensor(np.array(_lift(p).values, dtype=np.float64, copy=True), requires_grad=True) for p in pts]
    out = f(*leaves)
    if out.values.size != 1:
        raise GraphError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.values) for leaf in leaves
    ]

    def evaluate() -> float:
        return f(*[Tensor(leaf.values) for leaf in leaves]).item()

    worst = 0.0
    for li, leaf in enumerate(leaves):
        flat = leaf.values.reshape(-1)
        aflat = analytic[li].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric) or not np.isfinite(aflat[i]):
                raise NumericalError(f"non-finite derivative at input {li}, coordinate {i}")
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# flat binary tensor layout (checkpoint building block)

DTYPE_TAG_FLOAT64 = 1


def write_tensor(fh, array: np.ndarray) -> None:
    """Header (rank, extents as u64 LE, dtype tag byte) + row-major f64."""
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<Q", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(bytes([DTYPE_TAG_FLOAT64]))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    head = fh.read(8)
    if len(head) != 8:
        raise SerializationError("truncated tensor header")
    rank = struct.unpack("<Q", head)[0]
    if rank > 32:
        raise SerializationError(f"implausible tensor rank {rank}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise SerializationError("truncated tensor extents")
    extents = struct.unpack(f"<{rank}Q", raw) if rank else ()
    tag = fh.read(1)
    if len(tag) != 1 or tag[0] != DTYPE_TAG_FLOAT64:
        raise SerializationError(f"unsupported element type tag {tag!r}")
    count = int(np.prod(extents)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise SerializationError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64)
