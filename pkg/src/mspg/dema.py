"""Dynamic embedded attention: windowed multi-head focus features, context-token
expansion features, a task-conditioned gate between them, and the local/global
contrastive loss that keeps the two streams apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, MlpStack, Module, glorot
from .tensor import Parameter, ShapeError


@dataclass
class DemaOutput:
    out: T.Tensor                     # fused feature, same shape as the input
    focus: list                       # per-scale focus features
    expand: list                      # per-scale expansion features
    alpha: T.Tensor                   # [B] gate weight on focus
    beta: T.Tensor                    # [B] gate weight on expansion
    contrastive: T.Tensor | None      # None when the batch has a single sample
    weights: dict = field(default_factory=dict)


def pointwise(x, w, b=None):
    """1x1 channel map: ``x[B,C,H,W]`` with ``w[O,C]`` -> ``[B,O,H,W]``."""
    O, C = w.shape
    y = T.conv2d(x, T.reshape(w, (O, C, 1, 1)), padding="valid")
    return y if b is None else y + T.reshape(b, (1, O, 1, 1))


def global_avg_pool(x):
    return T.mean(x, axes=(2, 3))


def global_max_pool(x):
    return T.max(x, axes=(2, 3))


class Dema(Module):
    def __init__(self, channels, rng, *, scales=(3, 5, 7), windows=(2, 4, 8), n_context=4,
                 tau=0.1, task_dim=4, n_tasks=1, gate_hidden=16, dropout=0.1, noise_rng=None):
        heads = len(windows)
        if heads < 1:
            raise ValueError("need at least one head")
        if channels % heads:
            raise ShapeError(f"{channels} channels not divisible by {heads} heads")
        if n_context < 2:
            raise ValueError("context attention needs at least 2 tokens")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self._C = channels
        self._scales = tuple(scales)
        self._windows = tuple(windows)
        self._tau = float(tau)
        self._dropout = dropout
        self._noise_rng = noise_rng
        ch = channels // heads
        self.scale_kernels = [glorot(rng, (channels, 1, k, k), fan_in=k * k, fan_out=k * k)
                              for k in self._scales]
        # per head: stacked query/key/value projections of its channel slice
        self.head_proj = [Parameter(rng.uniform(-1, 1, (3, ch, ch)) * math.sqrt(3.0 / ch))
                          for _ in range(heads)]
        self.head_fusion = glorot(rng, (channels, channels))
        self.ctx_avg = Linear(channels, channels, rng)
        self.ctx_max = Linear(channels, channels, rng)
        self.ctx_mix = [Linear(2 * channels, channels, rng) for _ in range(n_context - 2)]
        self.ctx_q = glorot(rng, (channels, channels))
        self.ctx_k = glorot(rng, (channels, channels))
        self.ctx_v = glorot(rng, (channels, channels))
        self.task_embedding = Parameter(rng.normal(0, 0.1, (n_tasks, task_dim)))
        self.gate = MlpStack([channels + task_dim, gate_hidden, 2], rng, ["tanh", "none"])
        self.scale_fusion = glorot(rng, (channels, channels * len(self._scales)))
        self.scale_fusion_bias = Parameter(np.zeros(channels))

    @property
    def heads(self):
        return len(self._windows)

    # -- building blocks ------------------------------------------------------
    def multi_scale_features(self, x):
        if x.shape[1] != self._C:
            raise ShapeError(f"expected {self._C} channels, got {x.shape[1]}")
        return [T.conv2d(x, k, padding="same", depthwise=True) for k in self.scale_kernels]

    def local_head_attention(self, xi, h, record=None):
        ch = self._C // self.heads
        return local_window_attention(xi[:, h * ch:(h + 1) * ch], self.head_proj[h],
                                      self._windows[h], record=record)

    def fuse_heads(self, heads):
        return fuse_heads(heads, self.head_fusion)

    def global_embed(self, x):
        avg, mx = global_avg_pool(x), global_max_pool(x)
        both = T.concat([avg, mx], axis=1)
        tokens = [self.ctx_avg(avg), self.ctx_max(mx)] + [m(both) for m in self.ctx_mix]
        return T.stack(tokens, axis=1)

    def context_attention(self, xi, ctx, record=None):
        return context_attention(xi, ctx, self.ctx_q, self.ctx_k, self.ctx_v, record=record)

    def dynamic_gate(self, x, task_id=0):
        emb = self.task_embedding[task_id:task_id + 1]
        return dynamic_gate(x, emb, self.gate)

    # -- full pass ----------------------------------------------------------------
    def forward(self, x, task_id=0, force_gate=None, record=False):
        weights = {} if record else None
        ctx = self.global_embed(x)
        if force_gate is None:
            alpha, beta, gw = self.dynamic_gate(x, task_id)
            if record:
                weights["gate"] = gw
        else:
            B = x.shape[0]
            alpha = T.tensor(np.full(B, force_gate[0]), dtype=x.dtype)
            beta = T.tensor(np.full(B, force_gate[1]), dtype=x.dtype)
        a4 = T.reshape(alpha, (-1, 1, 1, 1))
        b4 = T.reshape(beta, (-1, 1, 1, 1))
        focus, expand, fused = [], [], []
        for xi in self.multi_scale_features(x):
            heads = [self.local_head_attention(xi, h, record=weights) for h in range(self.heads)]
            fi = self.fuse_heads(heads)
            ei = self.context_attention(xi, ctx, record=weights)
            focus.append(fi)
            expand.append(ei)
            fused.append(a4 * fi + b4 * ei)
        out = pointwise(T.concat(fused, axis=1), self.scale_fusion, self.scale_fusion_bias)
        if self._noise_rng is not None:
            out = T.dropout(out, self._dropout, self._noise_rng, self.training)
        contrastive = None
        if x.shape[0] >= 2:
            terms = [lgcl_loss(global_avg_pool(f), global_avg_pool(e), self._tau)
                     for f, e in zip(focus, expand)]
            contrastive = terms[0]
            for t in terms[1:]:
                contrastive = contrastive + t
            contrastive = contrastive / len(terms)
        return DemaOutput(out, focus, expand, alpha, beta, contrastive, weights or {})


def _window_partition(x, w):
    B, c, H, W = x.shape
    ph, pw = (-H) % w, (-W) % w
    if ph or pw:
        x = T.pad2d(x, 0, ph, 0, pw)
    Hp, Wp = H + ph, W + pw
    nh, nw = Hp // w, Wp // w
    t = T.reshape(x, (B, c, nh, w, nw, w))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (B * nh * nw, w * w, c)), (B, c, H, W, nh, nw)


def _window_merge(t, w, meta):
    B, c, H, W, nh, nw = meta
    t = T.reshape(t, (B, nh, nw, w, w, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    t = T.reshape(t, (B, c, nh * w, nw * w))
    if nh * w != H or nw * w != W:
        t = t[:, :, :H, :W]
    return t


def local_window_attention(x, proj, window, record=None):
    """Scaled dot-product self-attention inside non-overlapping ``window``^2 tiles.

    ``x`` is one head's channel slice ``[B,c,H,W]``; ``proj[0..2]`` are its
    query/key/value maps.  Inputs whose extent is not a multiple of the
    window are zero-padded and the result cropped back.
    """
    H, W = x.shape[2:]
    if window < 1:
        raise ValueError("window must be positive")
    if window > H or window > W:
        raise ShapeError(f"window {window} larger than the {H}x{W} feature map")
    c = x.shape[1]
    tokens, meta = _window_partition(x, window)
    q = T.matmul(tokens, T.transpose(proj[0], (1, 0)))
    k = T.matmul(tokens, T.transpose(proj[1], (1, 0)))
    v = T.matmul(tokens, T.transpose(proj[2], (1, 0)))
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c))
    attn = T.softmax(scores, axis=-1)
    if record is not None:
        record.setdefault("local", []).append(attn.data)
    return _window_merge(T.matmul(attn, v), window, meta)


def fuse_heads(heads, w_c):
    ref = heads[0].shape
    for h in heads[1:]:
        if h.shape[0] != ref[0] or h.shape[2:] != ref[2:]:
            raise ShapeError(f"head shapes differ: {ref} vs {h.shape}")
    return pointwise(T.concat(heads, axis=1), w_c)


def context_attention(xi, ctx, wq, wk, wv, record=None):
    """Cross-attention from every spatial position of ``xi`` to the context tokens."""
    B, C, H, W = xi.shape
    if ctx.shape[0] != B or ctx.shape[2] != C:
        raise ShapeError(f"context {ctx.shape} does not match features {xi.shape}")
    if ctx.shape[1] < 2:
        raise ShapeError("context attention needs at least 2 tokens")
    pos = T.transpose(T.reshape(xi, (B, C, H * W)), (0, 2, 1))
    q = T.matmul(pos, T.transpose(wq, (1, 0)))
    k = T.matmul(ctx, T.transpose(wk, (1, 0)))
    v = T.matmul(ctx, T.transpose(wv, (1, 0)))
    attn = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(C)), axis=-1)
    if record is not None:
        record.setdefault("context", []).append(attn.data)
    e = T.matmul(attn, v)
    return T.reshape(T.transpose(e, (0, 2, 1)), (B, C, H, W))


def dynamic_gate(x, task_emb, mlp):
    """Softmax gate ``(alpha, beta)`` from pooled features and the task embedding."""
    B = x.shape[0]
    expected = mlp.layers[0].weight.shape[1] - x.shape[1]
    if task_emb.shape[-1] != expected:
        raise ShapeError(f"task embedding length {task_emb.shape[-1]} != {expected}")
    tb = T.matmul(T.tensor(np.ones((B, 1)), dtype=x.dtype), T.reshape(task_emb, (1, -1)))
    logits = mlp(T.concat([global_avg_pool(x), tb], axis=1))
    w = T.softmax(logits, axis=1)
    return w[:, 0], w[:, 1], w.data


def lgcl_loss(focus, expand, tau=0.1):
    """InfoNCE between pooled focus and expansion features.

    Sample ``i``'s positive is its own expansion feature; every other row of
    ``expand`` is a negative.  Similarity is cosine; zero vectors score 0.
    """
    B = focus.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if focus.shape != expand.shape:
        raise ShapeError(f"feature shapes differ: {focus.shape} vs {expand.shape}")
    f = T.l2_normalize(focus, axis=1)
    e = T.l2_normalize(expand, axis=1)
    logits = T.matmul(f, T.transpose(e, (1, 0))) * (1.0 / tau)
    idx = np.arange(B)
    return -T.mean(T.log_softmax(logits, axis=1)[idx, idx])
