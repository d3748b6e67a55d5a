"""Tape-based reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: float64 compute, a global execution
tape, and only the operations the steering network and its losses need
(strided 2D convolution, GeLU, channel concat, elementwise arithmetic,
spatial softmax, global average pooling, dense layers, reductions).
There is no broadcasting beyond the conv/linear bias add; any other
shape mismatch raises :class:`DimensionError`.

Forward results are deterministic for identical inputs: every reduction
uses a fixed numpy evaluation order and there is no threading at this
layer beyond what BLAS applies inside a single call.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class DimensionError(ValueError):
    """Shape mismatch between operands, with the offending axes named."""


class TapeError(RuntimeError):
    """Misuse of the execution tape (double backward, detached loss)."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf where finite values are required."""


class Tensor:
    """N-dimensional float64 array participating in the gradient tape.

    Tensors are treated as immutable once created; new values arise only
    as op outputs. ``grad`` is ``None`` until ``backward`` reaches the
    tensor (absent means zero).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def validate_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.count_nonzero(~np.isfinite(self.data)))
            raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
        return self

    def __repr__(self) -> str:
        grad = "grad" if self.grad is not None else "no-grad"
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, {grad})"


class Parameter(Tensor):
    """Trainable tensor with a dotted-path name unique within a model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _ACTIVE


def reset_tape() -> None:
    """Drop all recorded operations and allow a fresh backward pass."""
    global _ACTIVE
    _ACTIVE = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor reachable from ``loss``.

    Traverses the active tape in exact reverse execution order. Calling
    twice without ``reset_tape`` is an error, as is a loss that never
    went through a recorded op.
    """
    if loss.ndim != 0:
        raise DimensionError(f"backward() needs a rank-0 loss, got shape {loss.shape}")
    tape = _ACTIVE
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; call reset_tape() first")
    if not loss.requires_grad or not any(node.out is loss for node in tape.nodes):
        raise TapeError("loss is detached from the active tape")

    loss.grad = np.ones((), dtype=DTYPE)
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        for inp, gin in zip(node.inputs, node.vjp(gout)):
            if gin is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gin
            else:
                inp.grad = inp.grad + gin
    tape.consumed = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIkk weights plus bias.

    Kernel sizes 1 and 3 only; output spatial size follows
    floor((H + 2*padding - k) / stride) + 1 and must stay >= 1.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got {x.ndim}-D")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weight must be [Cout,Cin,k,k], got {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise DimensionError(f"conv2d: kernel size {k} unsupported (only 1 and 3)")
    n, cin, h, wid = x.shape
    cout, cin_w = w.shape[0], w.shape[1]
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight in-channels {cin_w} (axis 1)")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    hout = (h + 2 * padding - k) // stride + 1
    wout = (wid + 2 * padding - k) // stride + 1
    if hout < 1 or wout < 1:
        raise DimensionError(
            f"conv2d: output {hout}x{wout} collapses for input {h}x{wid}, k={k}, "
            f"stride={stride}, padding={padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # im2col: gather the k*k shifted views, then a single GEMM per batch.
    cols6 = np.empty((n, cin, k, k, hout, wout), dtype=DTYPE)
    for a in range(k):
        for c in range(k):
            cols6[:, :, a, c] = xp[:, :, a : a + stride * hout : stride, c : c + stride * wout : stride]
    cols = cols6.reshape(n, cin * k * k, hout * wout)
    w2 = w.data.reshape(cout, cin * k * k)
    out2 = np.matmul(w2, cols)
    out2 += b.data[:, None]
    out = Tensor(out2.reshape(n, cout, hout, wout))

    def vjp(g):
        g2 = g.reshape(n, cout, hout * wout)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, hout, wout)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for c in range(k):
                    gxp[:, :, a : a + stride * hout : stride, c : c + stride * wout : stride] += gcols[:, :, a, c]
            gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense layer: x[N,Fin] @ w[Fout,Fin]^T + b[Fout]."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"linear: need 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: in-features {x.shape[1]} != weight in-features {w.shape[1]} (axis 1)")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = Tensor(x.data @ w.data.T + b.data)

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU x * Phi(x) with the erf-based standard normal CDF."""
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor(x.data * phi_cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi_cdf + x.data * pdf),)

    return _record(out, (x,), vjp)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate NCHW maps along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"channel_concat: need 4-D inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"channel_concat: batch/spatial axes must match, got {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def vjp(g):
        ga = g[:, :ca] if a.requires_grad else None
        gb = g[:, ca:] if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise scale*x + shift with constant coefficients."""
    out = Tensor(x.data * scale + shift)
    return _record(out, (x,), lambda g: (g * scale,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the H*W positions of every (n, c) slice.

    Stabilized by per-slice max subtraction; each output slice is a
    probability distribution over positions.
    """
    if x.ndim != 4:
        raise DimensionError(f"spatial_softmax: need NCHW input, got {x.ndim}-D")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    z = flat - flat.max(axis=2, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=2, keepdims=True)
    out = Tensor(y.reshape(x.shape))

    def vjp(g):
        gf = g.reshape(n, c, h * w)
        dot = (gf * y).sum(axis=2, keepdims=True)
        return ((y * (gf - dot)).reshape(x.shape),)

    return _record(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W per channel: NCHW -> NC."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: need NCHW input, got {x.ndim}-D")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) * (1.0 / (h * w)),)

    return _record(out, (x,), vjp)


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.full(x.shape, float(g), dtype=DTYPE),))


def reduce_mean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    inv = 1.0 / x.size
    return _record(out, (x,), lambda g: (np.full(x.shape, float(g) * inv, dtype=DTYPE),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))
