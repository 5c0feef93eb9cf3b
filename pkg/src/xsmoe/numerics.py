"""Dense tensors with taped reverse-mode gradients.

Arrays are contiguous row-major floats (float32 by default; float64 is
available for high-precision gradient oracles via `using_dtype`). Every
differentiable primitive appends a node to the active tape when gradients
are being tracked; `backward` replays the tape once, in reverse, then
clears it. Training is single-threaded per tape; inference should run
under `no_grad()` so nothing is recorded.
"""

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_default_dtype = np.float32
_grad_enabled = True
_finite_checks = False


def set_default_dtype(dtype):
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_finite_checks(flag: bool):
    """When on, every primitive asserts its output is finite (test aid)."""
    global _finite_checks
    _finite_checks = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording; outputs created inside never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_default_dtype))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Light operator sugar; everything routes through the primitives below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputeGraph:
    """Ordered tape of recorded primitives.

    Execution order is already topological, so the backward pass is a single
    reverse sweep that visits each node exactly once.
    """

    def __init__(self):
        self.nodes = []

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append((op, inputs, output, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_graph = ComputeGraph()


def graph() -> ComputeGraph:
    return _graph


def _finite_or_die(op, arr):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by {op}")


def _make(op, inputs, out_data, backward_fn):
    _finite_or_die(op, out_data)
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = track
    out.name = None
    if track:
        _graph.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor):
    """Populate grads of every requires_grad leaf reachable from `loss`.

    The tape is cleared afterwards. A loss that tracks no gradients (eval
    mode or frozen-only graph) is a no-op.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        _graph.clear()
        return
    loss.grad = np.ones_like(loss.data)
    for op, inputs, output, backward_fn in reversed(_graph.nodes):
        if output.grad is None:
            continue  # branch not reachable from the loss
        backward_fn(output.grad)
    _graph.clear()


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make("mul", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make("neg", (a,), -a.data, bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _make("scale", (a,), a.data * np.asarray(s, dtype=a.data.dtype), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make("matmul", (a, b), out, bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for weight matrices stored (out_features, in_features)."""
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    out = np.matmul(x.data, w.data.T)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.matmul(g, w.data))
        if w.requires_grad:
            gf = g.reshape(-1, w.shape[0])
            xf = x.data.reshape(-1, w.shape[1])
            w.accumulate_grad(gf.T @ xf)

    return _make("linear", (x, w), out, bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make("transpose", (a,), np.ascontiguousarray(np.transpose(a.data, axes)), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(orig))

    return _make("reshape", (a,), np.ascontiguousarray(a.data.reshape(shape)), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make("concat", tuple(tensors), out, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = g
            a.accumulate_grad(buf)

    return _make("slice", (a,), np.ascontiguousarray(a.data[sl]), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi_cdf

    def bw(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            x.accumulate_grad(g * (phi_cdf + xd * pdf))

    return _make("gelu", (x,), out.astype(xd.dtype, copy=False), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out * (g - inner))

    return _make("softmax", (x,), out, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        if x.requires_grad:
            sm = np.exp(out)
            x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", (x,), out, bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return _make("log", (x,), out, bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * out)

    return _make("exp", (x,), out, bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g / n))

    return _make("mean", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype), bw)


def tensor_sum(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return _make("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), bw)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    sq = np.sum(x.data * x.data, axis=axis, keepdims=True)
    nrm = np.sqrt(sq)
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def bw(g):
        if x.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            safe = np.where(nrm > 0, nrm, 1.0)
            x.accumulate_grad(gk * x.data / safe)

    return _make("l2_norm", (x,), np.ascontiguousarray(out), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs features {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gain.data * xhat + bias.data

    def bw(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gh - m1 - xhat * m2))

    return _make("layer_norm", (x, gain, bias), out, bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; the identity when rate == 0 or in eval mode."""
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    mask = keep / (1.0 - rate)
    out = x.data * mask

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make("dropout", (x,), out.astype(x.data.dtype, copy=False), bw)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back."""
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table with {table.shape[0]} rows"
        )
    out = table.data[idx]

    def bw(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table.accumulate_grad(buf)

    return _make("embedding_lookup", (table,), np.ascontiguousarray(out), bw)


def gather_rows(x: Tensor, col_idx) -> Tensor:
    """out[i] = x[i, col_idx[i]] for a 2-D tensor."""
    col_idx = np.asarray(col_idx)
    if x.ndim != 2 or col_idx.ndim != 1 or col_idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: got x {x.shape}, idx {col_idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, col_idx]

    def bw(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[rows, col_idx] = g
            x.accumulate_grad(buf)

    return _make("gather_rows", (x,), np.ascontiguousarray(out), bw)
