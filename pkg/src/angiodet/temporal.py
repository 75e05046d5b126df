"""Temporal enhancement of per-frame feature pyramids.

Two interchangeable block types operate on a (T, C, H, W) window per pyramid
level after a learned per-frame positional offset is added:

* pure temporal attention: self-attention over the T frame tokens at each
  spatial location, then a token MLP (variant "occlunet1");
* divided space-time attention: a temporal attention sublayer, a spatial
  attention sublayer (over the H*W tokens within each frame), then a token
  MLP (variant "occlunet2").

All sublayers are pre-norm with residual connections; the center frame's
features are returned as the enhanced pyramid for the current frame.
"""

from __future__ import annotations

import numpy as np

from .nn import LayerNorm, Mlp, Module, MultiHeadSelfAttention
from .tensor import Param, ShapeError

VARIANTS = ("occlunet1", "occlunet2")


def to_temporal_tokens(x):
    """(T,C,H,W) -> (H*W, T, C): one token sequence per spatial location."""
    t, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(2, 3, 0, 1).reshape(h * w, t, c)), (t, c, h, w)


def from_temporal_tokens(tok, shape):
    t, c, h, w = shape
    return np.ascontiguousarray(tok.reshape(h, w, t, c).transpose(2, 3, 0, 1))


def to_spatial_tokens(x):
    """(T,C,H,W) -> (T, H*W, C): one token sequence per frame."""
    t, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(t, h * w, c)), (t, c, h, w)


def from_spatial_tokens(tok, shape):
    t, c, h, w = shape
    return np.ascontiguousarray(tok.reshape(t, h, w, c).transpose(0, 3, 1, 2))


class PositionalEncoding(Module):
    """Learned per-window-slot channel offset, broadcast over space."""

    def __init__(self, t_max, channels, rng=None, dtype=np.float32, scale=0.02):
        rng = rng or np.random.default_rng(0)
        self.table = Param((rng.standard_normal((t_max, channels)) * scale).astype(dtype))

    def forward(self, x):
        t = x.shape[0]
        if t > self.table.value.shape[0]:
            raise ShapeError(f"window length {t} exceeds T_max {self.table.value.shape[0]}")
        return x + self.table.value[:t, :, None, None], t

    def backward(self, dy, t):
        self.table.grad[:t] += dy.sum(axis=(2, 3))
        return dy


class _AttnResidual(Module):
    """Pre-norm attention sublayer with residual, over a token layout."""

    def __init__(self, c, n_heads, to_tokens, from_tokens, rng=None, dtype=np.float32):
        self.ln = LayerNorm(c, dtype=dtype)
        self.attn = MultiHeadSelfAttention(c, n_heads, rng=rng, dtype=dtype)
        self._to = to_tokens
        self._from = from_tokens

    def forward(self, x):
        tok, shape = self._to(x)
        normed, cn = self.ln.forward(tok)
        a, ca = self.attn.forward(normed)
        return x + self._from(a, shape), (shape, cn, ca)

    def backward(self, dy, ctx):
        shape, cn, ca = ctx
        da, _ = self._to(dy)
        dnormed = self.attn.backward(da, ca)
        dtok = self.ln.backward(dnormed, cn)
        return dy + self._from(dtok, shape)


class _MlpResidual(Module):
    """Pre-norm token MLP with residual (tokens = channel vectors)."""

    def __init__(self, c, rng=None, dtype=np.float32):
        self.ln = LayerNorm(c, dtype=dtype)
        self.mlp = Mlp(c, rng=rng, dtype=dtype)

    def forward(self, x):
        tok, shape = to_temporal_tokens(x)
        normed, cn = self.ln.forward(tok)
        m, cm = self.mlp.forward(normed)
        return x + from_temporal_tokens(m, shape), (shape, cn, cm)

    def backward(self, dy, ctx):
        shape, cn, cm = ctx
        dm, _ = to_temporal_tokens(dy)
        dnormed = self.mlp.backward(dm, cm)
        dtok = self.ln.backward(dnormed, cn)
        return dy + from_temporal_tokens(dtok, shape)


class TemporalAttentionBlock(Module):
    """Attention across frames at each spatial location, plus token MLP."""

    def __init__(self, c, n_heads, rng=None, dtype=np.float32):
        self.t_attn = _AttnResidual(c, n_heads, to_temporal_tokens,
                                    from_temporal_tokens, rng=rng, dtype=dtype)
        self.mlp = _MlpResidual(c, rng=rng, dtype=dtype)

    def forward(self, x):
        h, c1 = self.t_attn.forward(x)
        y, c2 = self.mlp.forward(h)
        return y, (c1, c2)

    def backward(self, dy, ctx):
        c1, c2 = ctx
        dh = self.mlp.backward(dy, c2)
        return self.t_attn.backward(dh, c1)


class SpatialAttentionBlock(Module):
    """Attention over spatial tokens within each frame, plus token MLP."""

    def __init__(self, c, n_heads, rng=None, dtype=np.float32):
        self.s_attn = _AttnResidual(c, n_heads, to_spatial_tokens,
                                    from_spatial_tokens, rng=rng, dtype=dtype)
        self.mlp = _MlpResidual(c, rng=rng, dtype=dtype)

    def forward(self, x):
        h, c1 = self.s_attn.forward(x)
        y, c2 = self.mlp.forward(h)
        return y, (c1, c2)

    def backward(self, dy, ctx):
        c1, c2 = ctx
        dh = self.mlp.backward(dy, c2)
        return self.s_attn.backward(dh, c1)


class DividedSpaceTimeBlock(Module):
    """Temporal sublayer, then spatial sublayer, then token MLP."""

    def __init__(self, c, n_heads, rng=None, dtype=np.float32):
        self.t_attn = _AttnResidual(c, n_heads, to_temporal_tokens,
                                    from_temporal_tokens, rng=rng, dtype=dtype)
        self.s_attn = _AttnResidual(c, n_heads, to_spatial_tokens,
                                    from_spatial_tokens, rng=rng, dtype=dtype)
        self.mlp = _MlpResidual(c, rng=rng, dtype=dtype)

    def forward(self, x):
        h, c1 = self.t_attn.forward(x)
        h, c2 = self.s_attn.forward(h)
        y, c3 = self.mlp.forward(h)
        return y, (c1, c2, c3)

    def backward(self, dy, ctx):
        c1, c2, c3 = ctx
        dh = self.mlp.backward(dy, c3)
        dh = self.s_attn.backward(dh, c2)
        return self.t_attn.backward(dh, c1)


class TemporalModule(Module):
    """Per-level positional encoding + attention blocks; emits the center
    frame's enhanced pyramid. Parameters are unshared across levels."""

    def __init__(self, variant, channels, n_heads=4, n_blocks=1, t_max=3,
                 n_levels=3, rng=None, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        rng = rng or np.random.default_rng(0)
        block_cls = TemporalAttentionBlock if variant == "occlunet1" else DividedSpaceTimeBlock
        self.variant = variant
        self.pe = [PositionalEncoding(t_max, channels, rng=rng, dtype=dtype)
                   for _ in range(n_levels)]
        self.blocks = [block_cls(channels, n_heads, rng=rng, dtype=dtype)
                       for _ in range(n_levels * n_blocks)]
        self.n_blocks = n_blocks
        self.n_levels = n_levels

    def _level_blocks(self, lvl):
        return self.blocks[lvl * self.n_blocks:(lvl + 1) * self.n_blocks]

    def forward(self, window_levels, center_index):
        """window_levels: list of (T,C,H,W) stacks, one per pyramid level."""
        outs, ctxs = [], []
        for lvl, x in enumerate(window_levels):
            x, cpe = self.pe[lvl].forward(x)
            bctxs = []
            for block in self._level_blocks(lvl):
                x, bc = block.forward(x)
                bctxs.append(bc)
            outs.append(x[center_index])
            ctxs.append((cpe, bctxs, x.shape))
        return outs, (ctxs, center_index)

    def backward(self, dlevels, ctx):
        ctxs, center_index = ctx
        dwindows = []
        for lvl, dout in enumerate(dlevels):
            cpe, bctxs, shape = ctxs[lvl]
            dx = np.zeros(shape, dtype=dout.dtype)
            dx[center_index] = dout
            for block, bc in zip(reversed(self._level_blocks(lvl)), reversed(bctxs)):
                dx = block.backward(dx, bc)
            dx = self.pe[lvl].backward(dx, cpe)
            dwindows.append(dx)
        return dwindows
