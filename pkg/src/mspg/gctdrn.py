"""Two-flow dynamic residual block and the pooled global-enhancement branch."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .dema import Dema, global_avg_pool, pointwise
from .nn import Conv2d, Linear, Module, glorot
from .tensor import Parameter, ShapeError

FUSION_MODES = ("additive", "weighted")


class GctdrnBlock(Module):
    """Multi-kernel residual block.

    ``additive``: ``alpha * sum(branches) + beta * dema(x) + shortcut(x)``.
    ``weighted``: per-position softmax over branch scores mixes the branches,
    then the shortcut is added.
    """

    def __init__(self, c_in, rng, *, c_out=None, kernels=(3, 5, 7), mode="additive",
                 projection=True, alpha=1.0, beta=0.1, dema_kwargs=None):
        c_out = c_in if c_out is None else c_out
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if mode == "weighted" and len(kernels) < 2:
            raise ValueError("weighted fusion needs at least two branches")
        if c_in != c_out and not projection:
            raise ShapeError(f"channel change {c_in}->{c_out} needs a projection shortcut")
        self._mode = mode
        self.branches = [Conv2d(c_in, c_out, k, rng) for k in kernels]
        self.alpha = Parameter(np.array(alpha))
        self.beta = Parameter(np.array(beta))
        self.score = glorot(rng, (1, c_out))
        self.shortcut = glorot(rng, (c_out, c_in)) if c_in != c_out else None
        self.attention = Dema(c_in, rng, **(dema_kwargs or {})) if mode == "additive" else None

    _contrastive = None

    @property
    def mode(self):
        return self._mode

    @property
    def contrastive(self):
        """Contrastive loss of the last additive-mode pass (None otherwise)."""
        return self._contrastive

    def _shortcut(self, x):
        return x if self.shortcut is None else pointwise(x, self.shortcut)

    def branch_outputs(self, x):
        return [b(x) for b in self.branches]

    def forward(self, x, record=None):
        if self._mode == "additive":
            return self.forward_additive(x, record=record)
        return self.forward_weighted(x, record=record)

    def forward_additive(self, x, record=None):
        outs = self.branch_outputs(x)
        acc = outs[0]
        for o in outs[1:]:
            acc = acc + o
        att = self.attention(x, record=record is not None)
        if record is not None:
            record["dema"] = att
        a = att.out if self.shortcut is None else pointwise(att.out, self.shortcut)
        self._contrastive = att.contrastive
        return self.alpha * acc + self.beta * a + self._shortcut(x)

    def forward_weighted(self, x, record=None):
        outs = self.branch_outputs(x)
        w = branch_weights(outs, self.score)
        if record is not None:
            record["branch_weights"] = w.data
        mix = None
        for i, o in enumerate(outs):
            term = w[:, i:i + 1] * o
            mix = term if mix is None else mix + term
        self._contrastive = None
        return mix + self._shortcut(x)


def branch_weights(outs, score):
    """Softmax over branches of a shared 1x1 score map; ``[B, n_branch, H, W]``."""
    scores = T.concat([pointwise(o, score) for o in outs], axis=1)
    return T.softmax(scores, axis=1)


class GlobalEnhance(Module):
    """``F + broadcast(up(act(down(GAP(F)))))``."""

    def __init__(self, channels, rng, hidden=None, zero_init=False):
        hidden = hidden or channels
        self.down = Linear(channels, hidden, rng)
        self.up = Linear(hidden, channels, rng)
        if zero_init:
            self.up.weight.data[...] = 0

    def forward(self, f):
        g = self.up(self.down(global_avg_pool(f)).leaky_relu(0.2))
        return f + T.reshape(g, (g.shape[0], g.shape[1], 1, 1))


def block_forward_additive(x, block):
    return block.forward_additive(x)


def block_forward_weighted(x, block):
    return block.forward_weighted(x)


def global_enhance(f, params):
    return params(f)
