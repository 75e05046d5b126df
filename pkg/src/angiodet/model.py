"""Full pipeline model: per-frame backbone + PAFPN, temporal enhancement of
the current frame, decoupled head on the enhanced pyramid."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .detector import Backbone, DecoupledHead, Pafpn, load_checkpoint, save_checkpoint
from .nn import Module
from .temporal import VARIANTS, TemporalModule


@dataclass
class ModelConfig:
    variant: str = "occlunet1"
    channels: int = 32
    n_heads: int = 4
    n_blocks: int = 1
    num_classes: int = 1
    window: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channels % self.n_heads:
            raise ValueError("channels must be divisible by n_heads")


class OcclusionNet(Module):
    """End-to-end network over one temporal window of frames."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.backbone = Backbone(cfg.channels, rng=rng, dtype=dtype)
        self.pafpn = Pafpn(cfg.channels, rng=rng, dtype=dtype)
        self.temporal = TemporalModule(cfg.variant, cfg.channels, cfg.n_heads,
                                       cfg.n_blocks, t_max=cfg.window, rng=rng,
                                       dtype=dtype)
        self.head = DecoupledHead(cfg.channels, cfg.num_classes, rng=rng, dtype=dtype)
        self.dtype = dtype

    @property
    def center_index(self) -> int:
        return self.cfg.window // 2

    def forward(self, frames):
        """frames: list of T (3,H,W) arrays, chronological; returns head maps
        for the center frame plus a backward context."""
        if len(frames) != self.cfg.window:
            raise ValueError(f"expected {self.cfg.window} frames, got {len(frames)}")
        per_frame, bctxs, pctxs = [], [], []
        for f in frames:
            c_levels, bc = self.backbone.forward(np.asarray(f, dtype=self.dtype))
            p_levels, pc = self.pafpn.forward(c_levels)
            per_frame.append(p_levels)
            bctxs.append(bc)
            pctxs.append(pc)
        # stack per level: (T,C,H,W)
        window_levels = [np.stack([pf[lvl] for pf in per_frame]) for lvl in range(3)]
        enhanced, tctx = self.temporal.forward(window_levels, self.center_index)
        outs, hctx = self.head.forward(enhanced)
        return outs, (bctxs, pctxs, tctx, hctx)

    def backward(self, douts, ctx):
        bctxs, pctxs, tctx, hctx = ctx
        dlevels = self.head.backward(douts, hctx)
        dwindows = self.temporal.backward(dlevels, tctx)
        dframes = []
        for ti in range(self.cfg.window):
            dp = [dwindows[lvl][ti] for lvl in range(3)]
            dc = self.pafpn.backward(dp, pctxs[ti])
            dframes.append(self.backbone.backward(dc, bctxs[ti]))
        return dframes

    # -- inference-only paths (no backward context kept) ---------------

    def frame_pyramid(self, frame):
        """P-level pyramid for a single (3,H,W) frame."""
        c_levels, _ = self.backbone.forward(np.asarray(frame, dtype=self.dtype))
        p_levels, _ = self.pafpn.forward(c_levels)
        return p_levels

    def head_on_window(self, per_frame_pyramids):
        """Head maps for the center frame of a window of cached pyramids."""
        window_levels = [np.stack([pf[lvl] for pf in per_frame_pyramids])
                         for lvl in range(3)]
        enhanced, _ = self.temporal.forward(window_levels, self.center_index)
        outs, _ = self.head.forward(enhanced)
        return outs

    # -- checkpointing -------------------------------------------------

    def save(self, path: str, extra_meta: dict | None = None):
        meta = {"model": asdict(self.cfg)}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, dict(self.named_params()), meta)

    @classmethod
    def load(cls, path: str, dtype=np.float32):
        tensors, meta = load_checkpoint(path)
        cfg = ModelConfig(**meta["model"])
        model = cls(cfg, dtype=dtype)
        params = dict(model.named_params())
        if set(params) != set(tensors):
            raise ValueError("checkpoint parameter names do not match model variant")
        for name, p in params.items():
            if tuple(tensors[name].shape) != p.value.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.value[...] = tensors[name].astype(p.value.dtype)
        return model, meta
