"""Minimal dense-array reverse-mode autodiff.

Values are numpy float64 arrays of rank <= 4.  Each `Tensor` records its
parents and a backward closure; `Tensor.backward()` walks the graph once in
reverse topological order and accumulates gradients (shared subexpressions
sum).  Spike nonlinearities get a hard forward (Heaviside) with an arctangent
surrogate derivative attached.

A process-global multiplication counter can be armed with `count_mults()`;
the dense kernels (matmul, conv2d, triangular membership eval) report the
number of scalar multiplications they execute while it is armed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """Non-finite value produced by a forward pass."""


# ---------------------------------------------------------------------------
# multiplication counter
# ---------------------------------------------------------------------------

class MultCounter:
    """Counts scalar multiplications executed by instrumented kernels.

    Use as a context manager; nesting is not supported (inner counter wins).
    """

    _active = None

    def __init__(self):
        self.mults = 0

    def __enter__(self):
        self._prev = MultCounter._active
        MultCounter._active = self
        return self

    def __exit__(self, *exc):
        MultCounter._active = self._prev
        return False


def count_mults() -> MultCounter:
    return MultCounter()


def record_mults(n: int) -> None:
    c = MultCounter._active
    if c is not None:
        c.mults += int(n)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    return arr


class Tensor:
    """Node in the autodiff graph: a value plus a backward rule."""

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], None] | None = None,
                 name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.value)):
            raise NumericError(f"non-finite values in tensor {self.name or ''}")
        return self

    # -- graph traversal ----------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of self w.r.t. every reachable parent.

        Visits each node exactly once in reverse topological order.
        """
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            node.grad = None
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.value.shape)

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: "Tensor", g: np.ndarray) -> None:
    """Lazily accumulate a gradient contribution into `t`."""
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value + b.value

    def backward(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return Tensor(out_val, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value - b.value

    def backward(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, -(_unbroadcast(g, b.value.shape)))

    return Tensor(out_val, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value * b.value

    def backward(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(out_val, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value / b.value

    def backward(g):
        _acc(a, _unbroadcast(g / b.value, a.value.shape))
        _acc(b, _unbroadcast(-g * a.value / (b.value ** 2), b.value.shape))

    return Tensor(out_val, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0  # derivative 0 at exactly 0 (left limit)
    out_val = np.where(mask, a.value, 0.0)

    def backward(g):
        _acc(a, g * mask)

    return Tensor(out_val, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.exp(a.value)

    def backward(g):
        _acc(a, g * out_val)

    return Tensor(out_val, (a,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    out_val = np.where(take_a, a.value, b.value)

    def backward(g):
        _acc(a, _unbroadcast(g * take_a, a.value.shape))
        _acc(b, _unbroadcast(g * ~take_a, b.value.shape))

    return Tensor(out_val, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value >= b.value
    out_val = np.where(take_a, a.value, b.value)

    def backward(g):
        _acc(a, _unbroadcast(g * take_a, a.value.shape))
        _acc(b, _unbroadcast(g * ~take_a, b.value.shape))

    return Tensor(out_val, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions / shaping
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.value.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.value.shape))

    return Tensor(out_val, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_val = a.value.reshape(shape)

    def backward(g):
        _acc(a, g.reshape(a.value.shape))

    return Tensor(out_val, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_val = a.value.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _acc(a, g.transpose(inv))

    return Tensor(out_val, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_val = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum([t.value.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return Tensor(out_val, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# dense kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands via np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.value.shape} @ {b.value.shape}")
    out_val = np.matmul(a.value, b.value)
    record_mults(out_val.size // out_val.shape[-1] * a.value.shape[-1]
                 * b.value.shape[-1])

    def backward(g):
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)),
                               a.value.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g),
                               b.value.shape))

    return Tensor(out_val, (a, b), backward)


def conv2d_extents(h: int, w: int, l: int, stride: int, padding: int):
    """Output extents of an l x l kernel at the given stride/padding."""
    h_out = (h + 2 * padding - l) // stride + 1
    w_out = (w + 2 * padding - l) // stride + 1
    return h_out, w_out


def _im2col(x: np.ndarray, l: int, stride: int, padding: int):
    """(B,C,H,W) -> (B, C*l*l, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    h_out, w_out = conv2d_extents(h, w, l, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {l} exceeds padded input {h}x{w} (p={padding})")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (l, l), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # (B,C,Ho,Wo,l,l)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * l * l, h_out * w_out)
    return np.ascontiguousarray(cols), h_out, w_out


def _col2im(cols: np.ndarray, x_shape, l: int, stride: int, padding: int):
    """Scatter-add the inverse of `_im2col`."""
    b, c, h, w = x_shape
    h_out, w_out = conv2d_extents(h, w, l, stride, padding)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(b, c, l, l, h_out, w_out)
    for i in range(l):
        for j in range(l):
            xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] \
                += cols[:, :, i, j]
    if padding:
        xp = xp[:, :, padding:h + padding, padding:w + padding]
    return xp


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    `x` is (C,H,W) or batched (B,C,H,W); `kernels` is (C_out,C,l,l).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4 or kernels.value.ndim != 4:
        raise ShapeError("conv2d expects (B,C,H,W) input and (Cout,C,l,l) kernels")
    c_out, c_k, l, l2 = kernels.value.shape
    if l != l2:
        raise ShapeError("conv2d kernels must be square")
    if xv.shape[1] != c_k:
        raise ShapeError(f"conv2d channel mismatch: input {xv.shape[1]}, kernel {c_k}")

    cols, h_out, w_out = _im2col(xv, l, stride, padding)
    kmat = kernels.value.reshape(c_out, c_k * l * l)
    out = np.matmul(kmat, cols)                       # (B, Cout, Ho*Wo)
    record_mults(out.size * kmat.shape[1])
    out = out.reshape(xv.shape[0], c_out, h_out, w_out)
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g[None] if squeeze else g
        gmat = gb.reshape(gb.shape[0], c_out, h_out * w_out)
        _acc(kernels, np.einsum("bop,bcp->oc", gmat, cols).reshape(
            kernels.value.shape))
        dcols = np.matmul(kmat.T, gmat)
        dx = _col2im(dcols, xv.shape, l, stride, padding)
        _acc(x, dx[0] if squeeze else dx)

    return Tensor(out, (x, kernels), backward)


# ---------------------------------------------------------------------------
# spike nonlinearity
# ---------------------------------------------------------------------------

def arctan_surrogate_grad(u: np.ndarray, alpha: float) -> np.ndarray:
    """Derivative of (1/pi) arctan(pi*alpha*u/2) + 1/2 at u (u = v - threshold)."""
    return (alpha / 2.0) / (1.0 + (math.pi * alpha * u / 2.0) ** 2)


def arctan_surrogate(u: np.ndarray, alpha: float) -> np.ndarray:
    """Smooth spike stand-in (1/pi) arctan(pi*alpha*u/2) + 1/2."""
    return np.arctan(math.pi * alpha * u / 2.0) / math.pi + 0.5


_SOFT_SPIKE = False


class soft_spike_forward:
    """Context manager: spike ops forward the smooth surrogate instead of the
    hard Heaviside, so finite differences agree with the surrogate backward.
    Used only by gradient checks."""

    def __enter__(self):
        global _SOFT_SPIKE
        self._prev = _SOFT_SPIKE
        _SOFT_SPIKE = True
        return self

    def __exit__(self, *exc):
        global _SOFT_SPIKE
        _SOFT_SPIKE = self._prev
        return False


def surrogate_spike(u, threshold: float = 1.0, alpha: float = 2.0) -> Tensor:
    """Heaviside(u - threshold) forward (>= fires), arctangent surrogate backward."""
    if alpha <= 0:
        raise ValueError("surrogate alpha must be positive")
    u = as_tensor(u)
    if _SOFT_SPIKE:
        out_val = arctan_surrogate(u.value - threshold, alpha)
    else:
        out_val = (u.value >= threshold).astype(np.float64)
    sg = arctan_surrogate_grad(u.value - threshold, alpha)

    def backward(g):
        _acc(u, g * sg)

    return Tensor(out_val, (u,), backward)


def surrogate_spike_below(u, threshold: float, alpha: float = 2.0) -> Tensor:
    """Heaviside(threshold - u): fires 1 when u <= threshold (ternary negative arm)."""
    if alpha <= 0:
        raise ValueError("surrogate alpha must be positive")
    u = as_tensor(u)
    if _SOFT_SPIKE:
        out_val = arctan_surrogate(threshold - u.value, alpha)
    else:
        out_val = (u.value <= threshold).astype(np.float64)
    sg = arctan_surrogate_grad(threshold - u.value, alpha)

    def backward(g):
        _acc(u, -g * sg)

    return Tensor(out_val, (u,), backward)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_val = xhat * gamma.value + beta.value

    def backward(g):
        _acc(gamma, _unbroadcast(g * xhat, gamma.value.shape))
        _acc(beta, _unbroadcast(g, beta.value.shape))
        gx = g * gamma.value
        _acc(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor(out_val, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
               step: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `f` maps a Tensor to a scalar Tensor.  Where the analytic path goes
    through surrogate spikes, this checks against the surrogate derivative
    (the graph's own backward), which is the documented contract.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy())
    out = f(xt)
    out.check_finite()
    out.backward()
    analytic = xt.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x.copy())).value)
        flat[i] = orig - step
        fm = float(f(Tensor(x.copy())).value)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("non-finite output during finite differencing")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))
