"""Central-finite-difference verification of every analytic backward pass.

Each check builds a scalar loss around one op (or the full toy model), returns
the max relative error against central differences at 64-bit precision, and is
repeated over independent seeds. The full-model check probes the chain along
random low-dimensional input directions to keep the runtime bounded; all
other checks cover every input coordinate.
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, OcclusionNet
from .nn import MultiHeadSelfAttention
from .temporal import (
    DividedSpaceTimeBlock,
    SpatialAttentionBlock,
    TemporalAttentionBlock,
)
from .tensor import (
    conv2d,
    conv2d_backward,
    finite_diff_check,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    softmax_lastdim,
)
from .training import assign_targets, detection_loss

TOLERANCE = 1e-4


def check_matmul(seed, corrupt=False):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((4, 3))
    wout = rng.standard_normal((5, 3))

    def f(a):
        c = matmul(a, b)
        da, _ = matmul_backward(wout, a, b)
        if corrupt:
            da = da * 1.01
        return float((wout * c).sum()), da

    return finite_diff_check(f, rng.standard_normal((5, 4)))


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 2, 3, 3))
    x0 = rng.standard_normal((2, 5, 5))
    wout = rng.standard_normal((3, 3, 3))

    def f_input(x):
        y = conv2d(x, w, stride=1, pad=0)
        dx, _, _ = conv2d_backward(wout, x, w)
        return float((wout * y).sum()), dx

    def f_kernel(wk):
        y = conv2d(x0, wk, stride=1, pad=0)
        _, dw, _ = conv2d_backward(wout, x0, wk)
        return float((wout * y).sum()), dw

    return max(finite_diff_check(f_input, x0), finite_diff_check(f_kernel, w))


def check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    gamma = rng.standard_normal(6)
    beta = rng.standard_normal(6)
    wout = rng.standard_normal((4, 6))

    def f(x):
        y, cache = layer_norm(x, gamma, beta)
        dx, _, _ = layer_norm_backward(wout, cache, gamma)
        return float((wout * y).sum()), dx

    return finite_diff_check(f, rng.standard_normal((4, 6)))


def check_softmax_xent(seed):
    rng = np.random.default_rng(seed)
    target = int(rng.integers(0, 5))

    def f(z):
        p = softmax_lastdim(z)
        loss = -np.log(p[target])
        grad = p.copy()
        grad[target] -= 1.0
        return float(loss), grad

    return finite_diff_check(f, rng.standard_normal(5))


def _check_block(block_cls, seed, shape=(2, 4, 2, 2)):
    rng = np.random.default_rng(seed)
    block = block_cls(shape[1], n_heads=2, rng=rng, dtype=np.float64)
    wout = rng.standard_normal(shape)

    def f(x):
        block.zero_grad()
        y, ctx = block.forward(x)
        dx = block.backward(wout.copy(), ctx)
        return float((wout * y).sum()), dx

    return finite_diff_check(f, rng.standard_normal(shape))


def check_temporal_attention(seed):
    return _check_block(TemporalAttentionBlock, seed)


def check_spatial_attention(seed):
    return _check_block(SpatialAttentionBlock, seed)


def check_divided_block(seed):
    return _check_block(DividedSpaceTimeBlock, seed, shape=(2, 4, 2, 3))


def check_attention_params(seed):
    """Gradient w.r.t. the projection weights of one attention layer."""
    rng = np.random.default_rng(seed)
    attn = MultiHeadSelfAttention(4, 2, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 4))
    wout = rng.standard_normal((2, 3, 4))

    def f(wq):
        attn.q.w.value = wq
        attn.zero_grad()
        y, _ctx = attn.forward(x)
        attn.backward(wout.copy(), _ctx)
        return float((wout * y).sum()), attn.q.w.grad.copy()

    return finite_diff_check(f, attn.q.w.value.copy())


def check_detection_loss(seed):
    rng = np.random.default_rng(seed)
    shapes = [(4, 4), (2, 2), (1, 1)]
    target = assign_targets((13.0, 14.0, 20.0, 20.0), 0, shapes)
    sizes = [(4,) + s for s in shapes] + [(1,) + s for s in shapes] + [(2,) + s for s in shapes]

    def unpack(v):
        outs, off = [], 0
        maps = []
        for sz in sizes:
            n = int(np.prod(sz))
            maps.append(v[off:off + n].reshape(sz))
            off += n
        for lvl in range(3):
            outs.append({"reg": maps[lvl], "obj": maps[3 + lvl], "cls": maps[6 + lvl]})
        return outs

    def f(v):
        outs = unpack(v)
        loss, douts = detection_loss(outs, target)
        grads = [d["reg"] for d in douts] + [d["obj"] for d in douts] + [d["cls"] for d in douts]
        return loss, np.concatenate([g.reshape(-1) for g in grads])

    total = sum(int(np.prod(sz)) for sz in sizes)
    return finite_diff_check(f, rng.standard_normal(total) * 0.5)


def check_full_model(seed, n_dirs=6):
    """Whole pipeline (backbone+PAFPN+temporal+head+loss) probed along random
    input directions."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant="occlunet2" if seed % 2 else "occlunet1",
                      channels=8, n_heads=2, num_classes=2)
    model = OcclusionNet(cfg, rng=rng, dtype=np.float64)
    base = rng.standard_normal((3, 3, 32, 32)) * 0.3
    dirs = rng.standard_normal((n_dirs,) + base.shape)
    dirs /= np.sqrt((dirs ** 2).sum(axis=(1, 2, 3), keepdims=True))
    shapes = [(4, 4), (2, 2), (1, 1)]
    target = assign_targets((15.0, 17.0, 12.0, 12.0), 1, shapes)

    def f(a):
        model.zero_grad()
        frames = [base[i] + np.tensordot(a, dirs[:, i], axes=1) for i in range(3)]
        outs, ctx = model.forward(frames)
        loss, douts = detection_loss(outs, target)
        dframes = model.backward(douts, ctx)
        grad = np.array([sum(float((dframes[i] * dirs[k, i]).sum()) for i in range(3))
                         for k in range(n_dirs)])
        return loss, grad

    return finite_diff_check(f, np.zeros(n_dirs))


CHECKS = [
    ("matmul", check_matmul),
    ("conv2d", check_conv2d),
    ("layer_norm", check_layer_norm),
    ("softmax_xent", check_softmax_xent),
    ("temporal_attention", check_temporal_attention),
    ("spatial_attention", check_spatial_attention),
    ("divided_block", check_divided_block),
    ("attention_params", check_attention_params),
    ("detection_loss", check_detection_loss),
    ("full_model", check_full_model),
]


def run_suite(n_seeds: int = 20, corrupt: bool = False):
    """Returns rows of (name, max rel err over seeds, passed)."""
    rows = []
    for name, fn in CHECKS:
        worst = 0.0
        for seed in range(n_seeds):
            if name == "matmul":
                err = fn(seed, corrupt=corrupt)
            else:
                err = fn(seed)
            worst = max(worst, err)
        rows.append((name, worst, worst < TOLERANCE))
    return rows
