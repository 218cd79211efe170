"""Dense-tensor reverse-mode automatic differentiation.

Small numpy-backed engine: a ``Tensor`` wraps a dense array, and while a
``Tape`` is active every primitive records the node needed to replay the
chain rule backwards. With no active tape the primitives are plain numpy
calls, which is what evaluation-mode code paths use.

Gradient flow starts at tensors created with ``requires_grad=True`` and
propagates through everything derived from them. ``backward`` fills the
``grad`` field of those tensors (accumulating, as in most frameworks).
Precision follows the input arrays: float64 for gradient checking,
float32 for training.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class NumericError(Exception):
    """A non-finite value surfaced during forward or backward."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def param(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: object  # out_grad -> tuple of input grads (None = no flow)


@dataclass
class Tape:
    """Recorded operations, appended in construction (topological) order.

    A tape is confined to the thread that opened it; threads never share an
    active tape, so independent tapes can run in parallel workers.
    """

    nodes: list = field(default_factory=list)
    tracked: set = field(default_factory=set)
    check_finite: bool = False

    def __enter__(self):
        _local().stack.append(self)
        return self

    def __exit__(self, *exc):
        _local().stack.pop()
        return False


_STATE = threading.local()


def _local():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE


def active_tape() -> Tape | None:
    stack = _local().stack
    return stack[-1] if stack else None


def _record(op, inputs, out_values, backward_fn) -> Tensor:
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None and any(
        x.requires_grad or id(x) in tape.tracked for x in inputs
    ):
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
        tape.tracked.add(id(out))
    return out


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor feeding ``output``.

    Fan-out accumulates additively; requires_grad tensors on the tape with
    no path to the output receive zero gradients.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ValueError("backward needs a tape (none active, none given)")
    if output.values.size != 1:
        raise ValueError(f"backward expects a scalar output, got shape {output.values.shape}")
    grads: dict[int, np.ndarray] = {
        id(output): np.ones_like(output.values)
    }
    leaves: dict[int, Tensor] = {}
    if output.requires_grad:
        leaves[id(output)] = output
    for node in reversed(tape.nodes):
        for x in node.inputs:
            if x.requires_grad:
                leaves[id(x)] = x
        g = grads.get(id(node.output))
        if g is None:
            continue
        if tape.check_finite and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient flowing out of `{node.op}`")
        input_grads = node.backward_fn(g)
        for x, gx in zip(node.inputs, input_grads):
            if gx is None:
                continue
            acc = grads.get(id(x))
            grads[id(x)] = gx if acc is None else acc + gx
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.values)
        g = g.astype(leaf.values.dtype, copy=False).reshape(leaf.values.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values
    return _record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values
    return _record(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values
    return _record(
        "mul", (a, b), out,
        lambda g: (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = a.values * c
    return _record("scale", (a,), out, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar."""
    out = a.values + c
    return _record("shift", (a,), out, lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra and indexing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    out = a.values @ b.values
    return _record(
        "matmul", (a, b), out,
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _record("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.values.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.values.shape),))


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: out[i] = table[index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    out = table.values[index]

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, index, g)
        return (gt,)

    return _record("gather_rows", (table,), out, backward_fn)


def scatter_add_rows(values: Tensor, index, num_rows: int) -> Tensor:
    """out[j] = sum of values[i] over i with index[i] == j."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + values.values.shape[1:], dtype=values.values.dtype)
    np.add.at(out, index, values.values)
    return _record("scatter_add_rows", (values,), out, lambda g: (g[index],))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", tuple(tensors), out, backward_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.values[..., start:stop].copy()

    def backward_fn(g):
        ga = np.zeros_like(a.values)
        ga[..., start:stop] = g
        return (ga,)

    return _record("slice_last", (a,), out, backward_fn)


def pick_last(a: Tensor, index) -> Tensor:
    """out[i] = a[i, index[i]] for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.values.shape[0])
    out = a.values[rows, index]

    def backward_fn(g):
        ga = np.zeros_like(a.values)
        ga[rows, index] = g
        return (ga,)

    return _record("pick_last", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities

def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (a.values > 0),))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    x = a.values
    out = np.where(x > 0, x, slope * x)
    return _record(
        "leaky_relu", (a,), out,
        lambda g: (g * np.where(x > 0, 1.0, slope),),
    )


# Expected slope of the randomized-leaky rectifier's sampling interval
# [1/8, 1/3]; used as a fixed slope in both train and eval modes.
RRELU_SLOPE = (1.0 / 8.0 + 1.0 / 3.0) / 2.0


def rrelu(a: Tensor) -> Tensor:
    return leaky_relu(a, RRELU_SLOPE)


def softmax(a: Tensor) -> Tensor:
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# convolution, dropout, reductions

def conv1d(x: Tensor, kernels: Tensor) -> Tensor:
    """Same-padded 1-D convolution along the last (feature) axis.

    x: (batch, in_channels, length); kernels: (out_channels, in_channels, w)
    with odd w. Output: (batch, out_channels, length).
    """
    xv, kv = x.values, kernels.values
    if xv.ndim != 3 or kv.ndim != 3:
        raise ValueError("conv1d expects x (B, Cin, L) and kernels (Cout, Cin, w)")
    if xv.shape[1] != kv.shape[1]:
        raise ValueError(f"channel mismatch: input {xv.shape[1]}, kernels {kv.shape[1]}")
    w = kv.shape[2]
    if w % 2 != 1:
        raise ValueError("same padding needs an odd kernel width")
    pad = w // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, w, axis=2)  # (B, Cin, L, w)
    out = np.einsum("bilw,oiw->bol", windows, kv)

    def backward_fn(g):
        gk = np.einsum("bol,bilw->oiw", g, windows)
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, w, axis=2)  # (B, Cout, L, w)
        gx = np.einsum("bolw,oiw->bil", gwin, kv[:, :, ::-1])
        return (gx, gk)

    return _record("conv1d", (x, kernels), out, backward_fn)


def dropout(a: Tensor, p: float, gen: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: zero a fraction p and rescale survivors by 1/(1-p)."""
    if not train or p <= 0.0:
        return a
    if gen is None:
        raise ValueError("train-mode dropout needs a generator")
    keep = (gen.random(a.values.shape) >= p).astype(a.values.dtype) / (1.0 - p)
    out = a.values * keep
    return _record("dropout", (a,), out, lambda g: (g * keep,))


def tensor_sum(a: Tensor) -> Tensor:
    out = a.values.sum()
    return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.values.shape),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.values.size
    out = a.values.mean()
    return _record("mean", (a,), out, lambda g: (np.broadcast_to(g / n, a.values.shape),))


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn, inputs, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the given tensors to a scalar Tensor and must be
    deterministic (run dropout in eval mode). Error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for x in inputs:
        x.values = np.ascontiguousarray(x.values)  # ravel below must be a view
        x.requires_grad = True
        x.grad = None
    with Tape(check_finite=True) as tape:
        out = fn(*inputs)
        if out.values.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(out.values)):
            raise NumericError("non-finite forward value at the checked output")
        backward(out, tape)

    def run():
        return float(fn(*inputs).values)

    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.values)
        flat = x.values.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = run()
            flat[i] = orig - eps
            f_minus = run()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.values) for p in params]
    state.v = [np.zeros_like(p.values) for p in params]
    return state


def adam_step(params, state: AdamState) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero."""
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.values.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - state.beta1 ** t)
        v_hat = state.v[i] / (1.0 - state.beta2 ** t)
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
