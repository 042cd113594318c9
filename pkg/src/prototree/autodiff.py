"""Dense tensors with reverse-mode differentiation.

A small numpy-backed engine. Values live in a numpy array; every
differentiable operation computes its result eagerly and, when a tape is
active and some input participates in gradients, records a backward
closure. Shapes are explicit everywhere: tensor-tensor operations require
identical shapes, and the only broadcasting allowed is python-scalar with
tensor. This keeps every gradient rule auditable.

Precision is carried by the arrays themselves: float32 for training,
float64 for derivative checks. Mixing the two in one operation is an
error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense multidimensional array, optionally tracked for gradients.

    ``grad`` exists exactly when ``requires_grad`` is set and accumulates
    additively across backward passes until :meth:`zero_grad`.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.array(values, dtype=dtype, copy=True) if dtype else np.asarray(values)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


class Tape:
    """Records one forward pass; freed after its backward pass.

    A tape and the tensors flowing through it belong to a single thread.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d tensor into every tracked tensor's grad."""
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if self._consumed:
            raise ValueError("tape already consumed by a previous backward pass")
        loss.grad += np.ones_like(loss.values)
        for out, bwd in reversed(self._nodes):
            bwd(out.grad)
        # free the pass: bounded memory inside training loops
        self._nodes.clear()
        self._consumed = True


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss recorded on a tape."""
    if loss._tape is None:
        raise ValueError("backward called on a tensor not recorded on any tape")
    loss._tape.backward(loss)


def record_op(values: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording ``backward_fn`` if gradients are live.

    ``backward_fn`` receives the output gradient and must accumulate into
    each input's ``grad`` (guarding on ``requires_grad`` itself).
    """
    if _TAPES and any(t.requires_grad for t in inputs):
        out = Tensor(values, requires_grad=True)
        tape = _TAPES[-1]
        out._tape = tape
        tape._nodes.append((out, backward_fn))
        return out
    return Tensor(values)


def _as_pair(a, b):
    """Validate an elementwise pair: same-shape tensors or tensor+scalar."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise ValueError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    elif not (a_t or b_t):
        raise TypeError("elementwise op needs at least one Tensor")
    return a_t, b_t


def add(a, b) -> Tensor:
    a_t, b_t = _as_pair(a, b)
    av = a.values if a_t else a
    bv = b.values if b_t else b
    out = av + bv

    def bwd(g):
        if a_t and a.requires_grad:
            a.grad += g
        if b_t and b.requires_grad:
            b.grad += g

    return record_op(out, [t for t in (a, b) if isinstance(t, Tensor)], bwd)


def sub(a, b) -> Tensor:
    a_t, b_t = _as_pair(a, b)
    av = a.values if a_t else a
    bv = b.values if b_t else b
    out = av - bv

    def bwd(g):
        if a_t and a.requires_grad:
            a.grad += g
        if b_t and b.requires_grad:
            b.grad -= g

    return record_op(out, [t for t in (a, b) if isinstance(t, Tensor)], bwd)


def mul(a, b) -> Tensor:
    a_t, b_t = _as_pair(a, b)
    av = a.values if a_t else a
    bv = b.values if b_t else b
    out = av * bv

    def bwd(g):
        if a_t and a.requires_grad:
            a.grad += g * bv
        if b_t and b.requires_grad:
            b.grad += g * av

    return record_op(out, [t for t in (a, b) if isinstance(t, Tensor)], bwd)


def neg(a: Tensor) -> Tensor:
    out = -a.values

    def bwd(g):
        if a.requires_grad:
            a.grad -= g

    return record_op(out, [a], bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * out

    return record_op(out, [a], bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.values)

    def bwd(g):
        if a.requires_grad:
            a.grad += g / a.values

    return record_op(out, [a], bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * (a.values > 0)

    return record_op(out, [a], bwd)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for stability at large |x|
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * out * (1.0 - out)

    return record_op(out, [a], bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    v = a.values
    if v.ndim < 1 or v.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    if not np.isfinite(v).all():
        raise ValueError("softmax rejects non-finite input")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            a.grad += out * (g - inner)

    return record_op(out, [a], bwd)


def tsum(a: Tensor) -> Tensor:
    out = a.values.sum(dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.grad += g  # scalar broadcast

    return record_op(np.asarray(out), [a], bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.values.size
    out = a.values.sum(dtype=a.dtype) / n

    def bwd(g):
        if a.requires_grad:
            a.grad += g / n

    return record_op(np.asarray(out), [a], bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul handles 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    out = a.values @ b.values

    def bwd(g):
        if a.requires_grad:
            a.grad += g @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ g

    return record_op(out, [a, b], bwd)


def select_column(a: Tensor, j: int) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("select_column expects a 2-D tensor")
    out = a.values[:, j].copy()

    def bwd(g):
        if a.requires_grad:
            a.grad[:, j] += g

    return record_op(out, [a], bwd)


def stack_columns(cols: Sequence[Tensor]) -> Tensor:
    if not cols:
        raise ValueError("stack_columns needs at least one column")
    n = cols[0].values.shape
    for c in cols:
        if c.values.shape != n:
            raise ValueError("stack_columns needs same-shape 1-D columns")
    out = np.stack([c.values for c in cols], axis=1)

    def bwd(g):
        for i, c in enumerate(cols):
            if c.requires_grad:
                c.grad += g[:, i]

    return record_op(out, list(cols), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols_grad: np.ndarray, padded_shape, kh: int, kw: int,
            stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=cols_grad.dtype)
    cg = cols_grad.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride,
                j:j + stride * ow:stride] += cg[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCkk kernel stack."""
    if x.values.ndim != 4 or kernel.values.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if x.dtype != kernel.dtype:
        raise ValueError(f"dtype mismatch: {x.dtype} vs {kernel.dtype}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"zero-sized output: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding),
                               (padding, padding)))
    else:
        xp = x.values
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kflat = kernel.values.reshape(f, -1)
    out = np.matmul(kflat[None], cols).reshape(n, f, oh, ow)

    def bwd(g):
        gf = g.reshape(n, f, oh * ow)
        if kernel.requires_grad:
            kernel.grad += np.matmul(gf, cols.transpose(0, 2, 1)) \
                .sum(axis=0).reshape(kernel.shape)
        if x.requires_grad:
            cols_grad = np.matmul(kflat.T[None], gf)
            gx = _col2im(cols_grad, xp.shape, kh, kw, stride, oh, ow)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            x.grad += gx

    return record_op(out, [x, kernel], bwd)


def channel_bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if x.values.ndim != 4 or bias.values.ndim != 1:
        raise ValueError("channel_bias_add expects NCHW input and 1-D bias")
    if x.shape[1] != bias.shape[0]:
        raise ValueError(f"bias length {bias.shape[0]} != channels {x.shape[1]}")
    out = x.values + bias.values.reshape(1, -1, 1, 1)

    def bwd(g):
        if x.requires_grad:
            x.grad += g
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))

    return record_op(out, [x, bias], bwd)


def finite_difference_grad(f: Callable[[], float], tensor: Tensor,
                           step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f()`` w.r.t. ``tensor`` in place.

    ``f`` must re-run the forward computation from ``tensor.values``.
    Meant for float64 tensors; the returned array matches the tensor shape.
    """
    flat = tensor.values.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(tensor.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())
