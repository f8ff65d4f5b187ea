"""Dense float64 tensors with reverse-mode autodiff over an explicit tape.

Every differentiable op records a node on the current thread's tape when grad
mode is on and at least one input requires grad. ``backward`` walks the tape
once in reverse, so node order is the topological order by construction.

Ops also report ``(op name, output tensor, flop count)`` to any registered
observers; the runtime ledger and FLOP counter hook in there.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

DTYPE = np.float64

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

# Nominal FLOPs per output element for the non-matmul ops.
FLOPS_PER_ELEMENT = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "neg": 1,
    "scale": 1,
    "exp": 1,
    "log": 1,
    "gelu": 8,
    "softplus": 3,
    "relu": 1,
    "softmax": 5,
    "log_softmax": 5,
    "layer_norm": 8,
}


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
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
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape and modes


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable ops; append order is topological."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.observers: list = []


_state = _ThreadState()


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run with a private tape, restoring the previous one afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def observe(observer):
    """Register ``observer.on_op(op, out, flops)`` for ops run in this block."""
    _state.observers.append(observer)
    try:
        yield observer
    finally:
        _state.observers.remove(observer)


def _emit(op: str, out: Tensor, flops: int) -> None:
    for obs in _state.observers:
        obs.on_op(op, out, flops)


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp: Callable, flops: int) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.record(Node(op, inputs, out, vjp))
    if _state.observers:
        _emit(op, out, int(flops))
    return out


def constant(data, op: str = "const") -> Tensor:
    """Wrap an array as a non-differentiable tensor and report it as an allocation."""
    out = Tensor(data)
    if _state.observers:
        _emit(op, out, 0)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    The tape is consumed.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    tape = _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    produced = set()
    for node in reversed(tape.nodes):
        key = id(node.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        leaves.pop(key, None)
        node.output.grad = g
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                leaves[k] = t
    for k, g in grads.items():
        t = leaves[k]
        if k in produced:
            t.grad = g
        else:
            t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), out.size)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _result(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), out.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _result(
        out, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        out.size,
    )


def neg(a: Tensor) -> Tensor:
    out = -a.data
    return _result(out, "neg", (a,), lambda g: (-g,), out.size)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c
    return _result(out, "scale", (a,), lambda g: (g * c,), out.size)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,), out.size)


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)
    return _result(out, "log", (a,), lambda g: (g / ad,), out.size)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0)
    return _result(out, "relu", (a,), lambda g: (g * (ad > 0),), out.size)


def gelu(a: Tensor) -> Tensor:
    """0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))"""
    x = a.data
    inner = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (a,), vjp, out.size * FLOPS_PER_ELEMENT["gelu"])


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(out, "softplus", (a,), lambda g: (g * sig,), out.size * FLOPS_PER_ELEMENT["softplus"])


# --------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(src),), 0)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, "transpose", (a,), lambda g: (g.transpose(inv),), 0)


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    out = np.array(a.data[index], dtype=DTYPE)

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, "slice", (a,), vjp, 0)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, "concat", tensors, vjp, 0)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    out = weight.data[ids]
    rows = weight.shape

    def vjp(g):
        full = np.zeros(rows, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _result(out, "embedding", (weight,), vjp, 0)


# --------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(out, "sum", (a,), vjp, a.size)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics (batched, batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    out = ad @ bd
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _result(out, "matmul", (a, b), vjp, 2 * batch * m * k * n)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    rows = int(np.prod(x.shape[:-1]))
    flops = 2 * rows * wd.shape[0] * wd.shape[1] + (rows * wd.shape[0] if bias is not None else 0)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "linear", inputs, vjp, flops)


def attention_scores(q: Tensor, k: Tensor, scale_: float) -> Tensor:
    """``(q @ kᵀ)·scale`` over the trailing two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention_scores: q {q.shape} vs k {k.shape}")
    qd, kd = q.data, k.data
    out = (qd @ np.swapaxes(kd, -1, -2)) * scale_
    n, d = qd.shape[-2:]
    m = kd.shape[-2]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1

    def vjp(g):
        g = g * scale_
        gq = g @ kd if q.requires_grad else None
        gk = np.swapaxes(g, -1, -2) @ qd if k.requires_grad else None
        return gq, gk

    return _result(out, "attn_scores", (q, k), vjp, 2 * batch * n * m * d + batch * n * m)


# --------------------------------------------------------------------------
# normalisation and probabilities


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1, op: str = "softmax") -> Tensor:
    """exp((x − max)/T) normalised along ``axis``."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature if temperature != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    inv_t = 1.0 / temperature

    def vjp(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out * inv_t,)

    return _result(out, op, (x,), vjp, out.size * FLOPS_PER_ELEMENT["softmax"])


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, temperature, axis=-1)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature if temperature != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    inv_t = 1.0 / temperature

    def vjp(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) * inv_t,)

    return _result(out, "log_softmax", (x,), vjp, out.size * FLOPS_PER_ELEMENT["log_softmax"])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(out, "layer_norm", (x, gain, bias), vjp, out.size * FLOPS_PER_ELEMENT["layer_norm"])


def pick(x: Tensor, index) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a matrix ``x``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: matrix {x.shape} with index {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]
    src = x.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        full[rows, index] = g
        return (full,)

    return _result(out, "pick", (x,), vjp, 0)


# --------------------------------------------------------------------------
# convolution


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel 2-D convolution. x: [B, C, H, W]; weight: [C, kh, kw]; bias: [C]."""
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[0] != x.shape[1] or bias.shape != (x.shape[1],):
        raise DimensionError(f"depthwise_conv2d: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    B, C, H, W = x.shape
    _, kh, kw = weight.shape
    s = int(stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"depthwise_conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    wd = weight.data
    out = np.zeros((B, C, Ho, Wo), dtype=DTYPE)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] * wd[None, :, u, v, None, None]
    out += bias.data[None, :, None, None]

    def vjp(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd)
        for u in range(kh):
            for v in range(kw):
                win = xp[:, :, u:u + s * Ho:s, v:v + s * Wo:s]
                gw[:, u, v] = (g * win).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] += g * wd[None, :, u, v, None, None]
        gx = None if gxp is None else gxp[:, :, pad:pad + H, pad:pad + W]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, "dwconv", (x, weight, bias), vjp, 2 * out.size * kh * kw)
