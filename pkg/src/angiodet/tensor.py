"""Dense-tensor substrate: shaped arrays, numeric kernels, analytic backward
passes, and a finite-difference gradient checker.

All kernels operate on contiguous row-major numpy arrays. Two precisions are
supported: float32 (training/inference default) and float64 (gradient
checking). Every op is a pure function; backward passes take the upstream
gradient plus whatever the forward cached and return input gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_MAGIC_PREFIX = b"ATNBLOB"
_DTYPE_CODE = {np.dtype(np.float32): b"4", np.dtype(np.float64): b"8"}
_CODE_DTYPE = {b"4": np.dtype(np.float32), b"8": np.dtype(np.float64)}


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's precondition."""


@dataclass
class Tensor:
    """A shaped, contiguous, row-major array of scalars (up to 4 axes)."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.array)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.array = arr

    @property
    def shape(self) -> tuple:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    def to_blob(self) -> bytes:
        """Serialize: 8-byte magic, axis count, extents (LE u64), scalars (LE IEEE-754)."""
        code = _DTYPE_CODE[self.array.dtype]
        head = _MAGIC_PREFIX + code
        head += struct.pack("<Q", self.array.ndim)
        head += struct.pack(f"<{self.array.ndim}Q", *self.array.shape)
        body = self.array.astype(self.array.dtype.newbyteorder("<")).tobytes()
        return head + body

    @classmethod
    def from_blob(cls, blob: bytes) -> "Tensor":
        if blob[:7] != _MAGIC_PREFIX:
            raise ValueError("bad tensor blob magic")
        dtype = _CODE_DTYPE.get(blob[7:8])
        if dtype is None:
            raise ValueError("unknown tensor blob dtype code")
        ndim = struct.unpack_from("<Q", blob, 8)[0]
        shape = struct.unpack_from(f"<{ndim}Q", blob, 16)
        off = 16 + 8 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=n, offset=off)
        return cls(arr.astype(dtype).reshape(shape))


@dataclass
class Param:
    """A trainable tensor with a same-shaped gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError("grad shape must equal value shape")

    def zero_grad(self):
        self.grad.fill(0.0)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray):
    """dA = dC.B^T, dB = A^T.dC (batched over leading axes)."""
    da = dc @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dc
    # collapse broadcast batch axes, if any
    while da.ndim > a.ndim:
        da = da.sum(axis=0)
    while db.ndim > b.ndim:
        db = db.sum(axis=0)
    return da, db


# ---------------------------------------------------------------------------
# softmax

def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


# ---------------------------------------------------------------------------
# conv2d (cross-correlation)

def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv output extent {out} < 1 (n={n}, k={k}, s={stride}, p={pad})")
    return out


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (C*k*k, Ho*Wo) patch matrix."""
    c, h, w = x.shape
    ho = _conv_out_extent(h, k, stride, pad)
    wo = _conv_out_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride)
    )
    return windows.reshape(c * k * k, ho * wo).copy(), (ho, wo)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate x[Cin,H,W] with kernels w[Cout,Cin,k,k]."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError("conv2d expects x[Cin,H,W], w[Cout,Cin,k,k]")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("kernel must be square with odd extent")
    if cin != x.shape[0]:
        raise ShapeError(f"channel mismatch: x has {x.shape[0]}, kernels expect {cin}")
    cols, (ho, wo) = im2col(x, k, stride, pad)
    y = w.reshape(cout, -1) @ cols
    if b is not None:
        y = y + b[:, None]
    return y.reshape(cout, ho, wo)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, pad: int = 0,
                    cols: np.ndarray | None = None):
    """Gradients for inputs, kernels and bias of conv2d."""
    cout, cin, k, _ = w.shape
    c, h, wd = x.shape
    ho, wo = dy.shape[1], dy.shape[2]
    if cols is None:
        cols, _ = im2col(x, k, stride, pad)
    dyf = dy.reshape(cout, -1)
    dw = (dyf @ cols.T).reshape(w.shape)
    db = dyf.sum(axis=1)
    dcols = (w.reshape(cout, -1).T @ dyf).reshape(cin, k, k, ho, wo)
    dxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, ky, kx]
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# layer norm (over the trailing channel axis)

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize each trailing-axis vector to zero mean / unit variance, then affine.

    Returns (y, cache) where cache feeds layer_norm_backward.
    """
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gamma + beta
    return y, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv = cache
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dy * (s + x * s * (1.0 - s))


def bce_with_logits(z: np.ndarray, t: np.ndarray):
    """Numerically stable binary cross-entropy on logits.

    Returns (per-element loss, per-element dloss/dz).
    """
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(z) - t
    return loss, grad


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Compare f's analytic gradient at x against central differences.

    f(x) must return (scalar value, gradient array of x's shape). x is
    promoted to float64. Returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape must match input shape")
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)[0]
        flat[i] = orig - h
        fm = f(x)[0]
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
