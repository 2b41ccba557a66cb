"""Dense tensors with reverse-mode automatic differentiation.

The operation set is exactly what the branched VGG-style networks and the
patch-filtering autoencoder need: elementwise arithmetic, matmul, 3x3
stride-1 same-padding convolution, 2x2/2 max pooling, relu, batch norm,
inverted dropout, row softmax, cross entropy, nearest-neighbour 2x
upsampling, and a few shape/reduction helpers.  No broadcasting beyond bias
addition.

Numeric precision is selectable per build: float32 (default, fast) or
float64 (for tight gradient checks), via ``set_default_dtype`` or the
``HIERPATH_PRECISION`` environment variable read at import time.
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = _DTYPES[os.environ.get("HIERPATH_PRECISION", "float32")]


def set_default_dtype(name: str) -> None:
    """Select the precision used by tensors created from here on."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    Data is stored row-major; shape must have rank >= 1 with strictly
    positive extents.  ``grad`` stays None until a backward pass (or
    ``zero_grad``) allocates it, and accumulates across backward passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # keep an ndarray's float precision; cast everything else
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"zero-extent dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class TapeNode:
    """One recorded operation: inputs, output and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; node order is a topological order.

    Use as a context manager around the forward pass, then call
    ``backward(tape, loss)``.  Tapes nest: the innermost active tape
    records.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape stack corrupted"


_tape_stack: list[Tape] = []


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if _tape_stack and out.requires_grad:
        _tape_stack[-1].nodes.append(TapeNode(op, inputs, out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The seed gradient is 1.  Gradients of intermediate tensors live only in
    a scratch map; leaves accumulate into their ``grad`` buffer.
    """
    if loss.numel != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, piece in zip(node.inputs, node.backward(g)):
            if piece is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + piece
            else:
                grads[key] = piece
            holders[key] = tensor
    for key, g in grads.items():
        leaf = holders[key]
        if leaf.requires_grad and key not in produced:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise {kind}: shape {a.shape} vs {b.shape}")
    if kind == "add":
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if kind == "subtract":
        return _record("subtract", (a, b), a.data - b.data, lambda g: (g, -g))
    if kind == "multiply":
        ad, bd = a.data, b.data
        return _record("multiply", (a, b), ad * bd, lambda g: (g * bd, g * ad))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("subtract", a, b)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("multiply", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: [N,D] + [D]."""
    if len(x.shape) != 2 or len(b.shape) != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: {x.shape} + {b.shape}")
    return _record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias: [N,C,H,W] + [C]."""
    if len(x.shape) != 4 or len(b.shape) != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_channel_bias: {x.shape} + {b.shape}")
    out = x.data + b.data[None, :, None, None]
    return _record("add_channel_bias", (x, b), out,
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# convolution and pooling (the fixed 3x3/s1/p1 and 2x2/s2 configurations)

def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Cross-correlation, 3x3 kernel, stride 1, padding 1 (shape-preserving).

    Computed as nine shifted GEMMs (one per kernel offset) so peak memory
    stays proportional to the activation size even at 224x224 extents.
    """
    if len(x.shape) != 4 or len(kernel.shape) != 4:
        raise ValueError(f"conv2d needs rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    if kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {kernel.shape[2:]}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    n, c, h, w = x.shape
    f = kernel.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    kd = kernel.data
    acc = np.zeros((n, h, w, f), dtype=x.data.dtype)
    for a in range(3):
        for b in range(3):
            acc += np.tensordot(xp[:, :, a:a + h, b:b + w], kd[:, :, a, b],
                                axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def back(g):
        dk = np.empty_like(kd)
        dxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                sl = xp[:, :, a:a + h, b:b + w]
                dk[:, :, a, b] = np.tensordot(g, sl, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, a:a + h, b:b + w] += np.tensordot(
                    g, kd[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
        return dxp[:, :, 1:1 + h, 1:1 + w], dk

    return _record("conv2d", (x, kernel), out, back)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2; gradient goes to the first (row-major) max."""
    if len(x.shape) != 4:
        raise ValueError(f"maxpool2d needs rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    windows = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        buf = np.zeros_like(windows)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        dx = (buf.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (dx,)

    return _record("maxpool2d", (x,), out, back)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 block."""
    if len(x.shape) != 4:
        raise ValueError(f"upsample2d needs rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2d", (x,), out, back)


# ---------------------------------------------------------------------------
# activations and regularizers

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


class BatchNormState:
    """Per-channel scale/shift plus running statistics.

    Running statistics are exponential moving averages with momentum 0.9
    over the (biased) batch statistics; epsilon is 1e-5.
    """

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(num_features, dtype=_default_dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=_default_dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=_default_dtype)
        self.running_var = np.ones(num_features, dtype=_default_dtype)
        self.momentum = momentum
        self.eps = eps
        self.num_features = num_features


def batch_norm(x: Tensor, state: BatchNormState, training: bool,
               update_running: bool = True) -> Tensor:
    """Normalize per channel over the batch ([N,D]) or batch+space ([N,C,H,W])."""
    if len(x.shape) == 2:
        axes, view = (0,), (1, -1)
    elif len(x.shape) == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm needs rank-2 or rank-4 input, got {x.shape}")
    nch = x.shape[1]
    if nch != state.num_features:
        raise ValueError(f"batch_norm feature mismatch: input {nch}, state {state.num_features}")
    gamma, beta = state.gamma, state.beta
    gview = gamma.data.reshape(view)
    bview = beta.data.reshape(view)

    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(view)) * inv.reshape(view)
        out = gview * xhat + bview

        def back_infer(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return g * gview * inv.reshape(view), dgamma, dbeta

        return _record("batch_norm", (x, gamma, beta), out, back_infer)

    if x.shape[0] < 2:
        raise ValueError("batch_norm in train mode needs batch size >= 2")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(view)) * inv.reshape(view)
    out = gview * xhat + bview
    if update_running:
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    count = x.numel // nch

    def back_train(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dx = (gview * inv.reshape(view)) * (
            g - dbeta.reshape(view) / count - xhat * dgamma.reshape(view) / count
        )
        return dx, dgamma, dbeta

    return _record("batch_norm", (x, gamma, beta), out, back_train)


def dropout(x: Tensor, p: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.data.dtype)
    return _record("dropout", (x,), x.data * factor, lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# softmax and losses

def softmax(logits: Tensor) -> Tensor:
    """Row softmax over [N,C] with max-subtraction for stability."""
    if len(logits.shape) != 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax needs [N,C] with C >= 2, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax input contains non-finite values")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _record("softmax", (logits,), p, back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) at integer targets; scalar output."""
    if len(logits.shape) != 2:
        raise ValueError(f"cross_entropy needs [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ValueError(f"cross_entropy targets shape {targets.shape} for {n} rows")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"cross_entropy target index out of range [0,{c})")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("cross_entropy input contains non-finite values")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = logsumexp - shifted[rows, targets]
    out = np.array([losses.mean()], dtype=logits.data.dtype)

    def back(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, targets] -= 1.0
        return (p * (g.reshape(()) / n),)

    return _record("cross_entropy", (logits,), out, back)


# ---------------------------------------------------------------------------
# shape and reduction helpers

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    out = np.array([x.data.sum()], dtype=x.data.dtype)
    return _record("sum_all", (x,), out,
                   lambda g: (np.full(x.shape, g.reshape(()), dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.numel
    out = np.array([x.data.mean()], dtype=x.data.dtype)
    return _record("mean_all", (x,), out,
                   lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# verification harness

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4,
                      samples: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic map from ``x`` to a scalar tensor.  The
    probe step for coordinate i is ``step * max(1, |x_i|)``; ``samples``
    limits how many coordinates are probed (all by default).  The error for
    one coordinate is |analytic - central| / max(1, |analytic|, |central|).
    """
    saved_grad, saved_rg = x.grad, x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    backward(tape, out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    x.grad, x.requires_grad = saved_grad, saved_rg

    flat = x.data.reshape(-1)
    if samples is None or samples >= flat.size:
        indices = np.arange(flat.size)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(flat.size, size=samples, replace=False)

    worst = 0.0
    for i in indices:
        orig = flat[i]
        h = step * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        hi = float(flat[i])  # the representable value actually probed
        fp = f(x).item()
        flat[i] = orig - h
        lo = float(flat[i])
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (hi - lo)
        a = float(analytic[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def dump_tensor(t: Tensor, path) -> None:
    """Debug dump: first line is the shape, then row-major decimal values."""
    with open(path, "w") as fh:
        fh.write(" ".join(str(n) for n in t.shape) + "\n")
        for v in t.data.reshape(-1):
            fh.write(repr(float(v)) + "\n")
