"""Layer building blocks on top of the tensor kernels.

Each layer exposes `forward(x) -> (y, ctx)` and `backward(dy, ctx) -> dx`.
Parameter gradients accumulate into Param.grad, so one layer instance can be
applied to several inputs (e.g. the backbone over every frame of a window)
before a single optimizer step. `named_params()` yields (name, Param) pairs
for checkpointing and the optimizer.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Param,
    conv2d_backward,
    im2col,
    layer_norm,
    layer_norm_backward,
    matmul_backward,
    sigmoid,
    silu,
    silu_backward,
    softmax_lastdim,
    softmax_lastdim_backward,
)


class Module:
    """Minimal layer base: child registration and parameter iteration."""

    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def named_params(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Param):
                yield (prefix + name, v)
        for name, child in self._children():
            yield from child.named_params(prefix + name + ".")

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


class Conv2d(Module):
    """k x k cross-correlation with bias; optional SiLU activation."""

    def __init__(self, cin, cout, k=3, stride=1, pad=None, act=True,
                 rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if pad is None:
            pad = k // 2
        scale = np.sqrt(2.0 / (cin * k * k))
        self.w = Param((rng.standard_normal((cout, cin, k, k)) * scale).astype(dtype))
        self.b = Param(np.zeros(cout, dtype=dtype))
        self.k, self.stride, self.pad, self.act = k, stride, pad, act

    def forward(self, x):
        cols, (ho, wo) = im2col(x, self.k, self.stride, self.pad)
        cout = self.w.value.shape[0]
        z = (self.w.value.reshape(cout, -1) @ cols + self.b.value[:, None]).reshape(cout, ho, wo)
        y = silu(z) if self.act else z
        return y, (x, cols, z)

    def backward(self, dy, ctx):
        x, cols, z = ctx
        dz = silu_backward(dy, z) if self.act else dy
        dx, dw, db = conv2d_backward(dz, x, self.w.value, self.stride, self.pad, cols)
        self.w.grad += dw
        self.b.grad += db
        return dx


class Linear(Module):
    """Affine map over the trailing axis."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32, scale=None):
        rng = rng or np.random.default_rng(0)
        if scale is None:
            scale = np.sqrt(1.0 / cin)
        self.w = Param((rng.standard_normal((cin, cout)) * scale).astype(dtype))
        self.b = Param(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        y = x @ self.w.value + self.b.value
        return y, x

    def backward(self, dy, x):
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.w.grad += flat_x.T @ flat_dy
        self.b.grad += flat_dy.sum(axis=0)
        return (dy @ self.w.value.T).reshape(x.shape)


class LayerNorm(Module):
    def __init__(self, c, eps=1e-5, dtype=np.float32):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma.value, self.beta.value, self.eps)

    def backward(self, dy, cache):
        dx, dgamma, dbeta = layer_norm_backward(dy, cache, self.gamma.value)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class Mlp(Module):
    """2-layer token MLP with SiLU, hidden = 2*C."""

    def __init__(self, c, rng=None, dtype=np.float32):
        self.fc1 = Linear(c, 2 * c, rng=rng, dtype=dtype)
        self.fc2 = Linear(2 * c, c, rng=rng, dtype=dtype)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = silu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, ctx):
        c1, h, c2 = ctx
        da = self.fc2.backward(dy, c2)
        dh = silu_backward(da, h)
        return self.fc1.backward(dh, c1)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the token axis of (B, N, C)."""

    def __init__(self, c, n_heads, rng=None, dtype=np.float32):
        if c % n_heads:
            raise ValueError(f"channels {c} not divisible by heads {n_heads}")
        self.q = Linear(c, c, rng=rng, dtype=dtype)
        self.k = Linear(c, c, rng=rng, dtype=dtype)
        self.v = Linear(c, c, rng=rng, dtype=dtype)
        self.o = Linear(c, c, rng=rng, dtype=dtype)
        self.n_heads = n_heads
        self.head_dim = c // n_heads

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, nh, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, nh * dh)

    def forward(self, x):
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = (qh @ np.swapaxes(kh, -1, -2)) / np.sqrt(self.head_dim)
        att = softmax_lastdim(scores)
        ctxv = att @ vh
        merged = self._merge(ctxv)
        y, co = self.o.forward(merged)
        ctx = (cq, ck, cv, co, qh, kh, vh, att)
        return y, ctx

    def attention_weights(self, x):
        """Attention rows (B, heads, N, N) for inspection/tests."""
        q, _ = self.q.forward(x)
        k, _ = self.k.forward(x)
        scores = (self._split(q) @ np.swapaxes(self._split(k), -1, -2)) / np.sqrt(self.head_dim)
        return softmax_lastdim(scores)

    def backward(self, dy, ctx):
        cq, ck, cv, co, qh, kh, vh, att = ctx
        dmerged = self.o.backward(dy, co)
        dctxv = self._split(dmerged)
        datt, dvh = matmul_backward(dctxv, att, vh)
        dscores = softmax_lastdim_backward(datt, att) / np.sqrt(self.head_dim)
        dqh, dkt = matmul_backward(dscores, qh, np.swapaxes(kh, -1, -2))
        dkh = np.swapaxes(dkt, -1, -2)
        dq, dk, dv = self._merge(dqh), self._merge(dkh), self._merge(dvh)
        dx = self.q.backward(dq, cq)
        dx = dx + self.k.backward(dk, ck)
        dx = dx + self.v.backward(dv, cv)
        return dx


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of (C,H,W)."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2x_backward(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))
