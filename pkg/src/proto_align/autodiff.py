"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Primitives record onto a thread-local :class:`Tape` while one is active;
recording order is the forward execution order and :func:`backward` walks it
strictly in reverse, accumulating exact vector-Jacobian products. Forward
evaluation with no active tape (or on inputs that do not require gradients)
skips all bookkeeping, so inference pays no graph cost.

Everything is computed in 64-bit floats: the finite-difference checks this
package is verified against are not reliable in 32-bit.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeMismatch(ValueError):
    """Inputs do not conform to a primitive's signature."""


_state = threading.local()


def _tapes():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


class Tape:
    """Append-only record of one forward graph. Use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        assert popped is self
        return False


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tensor:
    """Dense float64 array participating in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def detach(self):
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, inputs, vjp):
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    stack = _tapes()
    if out.requires_grad and stack:
        tape = stack[-1]
        out._tape = tape
        out._index = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, vjp, op))
    return out


def backward(out):
    """Accumulate reverse-mode gradients of a recorded scalar into .grad.

    Every requires_grad ancestor (leaves and intermediates) receives its
    gradient exactly once per call; repeated calls without zero_grad
    accumulate.
    """
    if not isinstance(out, Tensor):
        raise TypeError("backward expects a Tensor")
    if out.data.ndim != 0 and out.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {out.shape}")
    if out._tape is None:
        raise ValueError("output was not produced by recorded primitives "
                         "(no active Tape at construction, or it requires no grad)")
    pending = {id(out): (out, np.ones_like(out.data))}
    nodes = out._tape.nodes
    for node in reversed(nodes[:out._index + 1]):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        tensor, g = entry
        tensor.grad = g if tensor.grad is None else tensor.grad + g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = pending.get(id(inp))
            if prev is None:
                pending[id(inp)] = (inp, gi)
            else:
                pending[id(inp)] = (inp, prev[1] + gi)
    for tensor, g in pending.values():
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

PRIMITIVES = {}


def _primitive(fn):
    PRIMITIVES[fn.__name__] = fn
    return fn


def apply_primitive(op, *inputs, **kwargs):
    """Apply a primitive by name (the registry powers the gradient suite)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape))
                 if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


@_primitive
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), vjp)


@_primitive
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), vjp)


@_primitive
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record("mul", a.data * b.data, (a, b), vjp)


@_primitive
def scale(x, c):
    x = as_tensor(x)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _record("scale", x.data * c, (x,), vjp)


@_primitive
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} "
                            "do not broadcast")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


@_primitive
def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", out, (x,), vjp)


@_primitive
def log(x):
    x = as_tensor(x)

    def vjp(g):
        return (g / x.data,)

    return _record("log", np.log(x.data), (x,), vjp)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@_primitive
def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), vjp)


@_primitive
def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _record("relu", out, (x,), vjp)


@_primitive
def absolute(x):
    x = as_tensor(x)

    def vjp(g):
        return (g * np.sign(x.data),)

    return _record("absolute", np.abs(x.data), (x,), vjp)


@_primitive
def softmax(x, axis=-1):
    """Row-softmax with max-subtraction (logits at tau=0.01 scale by 100)."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (x,), vjp)


@_primitive
def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_primitive
def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("tensor_sum", out, (x,), vjp)


@_primitive
def tensor_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axes]))

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)

    return _record("tensor_mean", out, (x,), vjp)


@_primitive
def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", np.transpose(x.data, axes), (x,), vjp)


@_primitive
def reshape(x, shape):
    x = as_tensor(x)
    orig = x.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record("reshape", x.data.reshape(shape), (x,), vjp)


@_primitive
def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", np.concatenate(datas, axis=axis), tuple(parts), vjp)


@_primitive
def gather_rows(x, index):
    """out[i] = x[index[i]]; the VJP scatter-adds duplicate indices."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeMismatch(f"gather_rows: index must be 1-d, got {index.shape}")
    if x.ndim < 1:
        raise ShapeMismatch("gather_rows: input must have rows")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("gather_rows", x.data[index], (x,), vjp)


@_primitive
def l2_normalize(x, axis=-1):
    """Rows scaled to unit Euclidean norm; zero rows are rejected."""
    x = as_tensor(x)
    n = np.linalg.norm(x.data, axis=axis, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("l2_normalize: zero-norm slice (cosine undefined)")
    out = x.data / n

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * dot) / n,)

    return _record("l2_normalize", out, (x,), vjp)


@_primitive
def conv2d(x, w, stride=1, pad=0):
    """NHWC convolution with (KH, KW, Cin, Cout) weights; no implicit bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: needs 4-d input and weight, got {x.shape} "
                            f"and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d: input channels {x.shape} do not match "
                            f"weight {w.shape}")
    k = kernels
    out = k.conv2d_forward(x.data, w.data, stride, pad)
    h, wd = x.shape[1], x.shape[2]
    kh, kw = w.shape[0], w.shape[1]

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = k.conv2d_grad_input(g, w.data, h, wd, stride, pad)
        gw = k.conv2d_grad_weight(g, x.data, kh, kw, stride, pad)
        return gx, gw

    return _record("conv2d", out, (x, w), vjp)


@_primitive
def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of NHWC maps."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample2x: needs 4-d input, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    b, h, w, c = x.shape

    def vjp(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _record("upsample2x", out, (x,), vjp)


@_primitive
def substitute_forward(soft, hard):
    """Straight-through: forward emits ``hard`` exactly, backward flows to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeMismatch(f"substitute_forward: hard {hard.shape} must match "
                            f"soft {soft.shape}")

    def vjp(g):
        return (g,)

    return _record("substitute_forward", hard.copy(), (soft,), vjp)


def stop_gradient(x):
    """Identity forward; contributes zero gradient to ancestors of x."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# composites used throughout the model code
# ---------------------------------------------------------------------------

def l1_norm(x):
    """Sum of absolute values over the whole tensor."""
    return tensor_sum(absolute(x))


def cosine_similarity(a, b, axis=-1):
    """Row-wise cosine; zero-norm rows are rejected by l2_normalize."""
    return tensor_sum(mul(l2_normalize(a, axis=axis), l2_normalize(b, axis=axis)),
                      axis=axis)


def affine(x, w, b):
    """x @ w.T + b for trailing feature axes."""
    return add(matmul(x, transpose(w)), b)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)       # (flat idx, analytic, numeric, err)
    nonfinite: list = field(default_factory=list)      # flat idx where f blew up
    tol: float = 0.0

    @property
    def passed(self):
        return not self.nonfinite and self.max_rel_error <= self.tol


def grad_check(f, x, step=1e-5, tol=1e-6, max_coords=None, rng=None):
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``f`` must be deterministic. Checks every coordinate of ``x`` unless
    ``max_coords`` caps the count (sampled without replacement from ``rng``).
    Relative error uses max(|analytic|, |numeric|, 1e-6) as the denominator.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = as_tensor(x)
    probe = Tensor(base.data.copy(), requires_grad=True)
    with Tape():
        out = f(probe)
        if out.data.ndim != 0 and out.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    flat = base.data.copy().reshape(-1)
    n = flat.size
    coords = np.arange(n)
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))

    report = GradCheckReport(max_rel_error=0.0, n_checked=len(coords), tol=tol)
    work = flat.copy()
    for i in coords:
        orig = work[i]
        work[i] = orig + step
        fp = float(f(Tensor(work.reshape(base.shape))).data)
        work[i] = orig - step
        fm = float(f(Tensor(work.reshape(base.shape))).data)
        work[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            report.nonfinite.append(int(i))
            continue
        numeric = (fp - fm) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(numeric), 1e-6)
        err = abs(analytic[i] - numeric) / denom
        if err > report.max_rel_error:
            report.max_rel_error = float(err)
        if err > tol:
            report.failures.append((int(i), float(analytic[i]), float(numeric),
                                    float(err)))
    return report
