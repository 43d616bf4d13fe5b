"""Generator, main and auxiliary discriminators, and the adversarial losses."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .gctdrn import GctdrnBlock, GlobalEnhance
from .nn import Conv2d, Linear, MlpStack, Module, bce_logits
from .tensor import ShapeError


class Generator(Module):
    """Latent vector -> feature map -> residual blocks -> global enhancement -> head.

    ``kind="ring"`` emits 2-D points; ``kind="image"`` emits ``[1,16,16]`` images
    through a tanh head.  The output of the middle block is exposed as
    ``F_gen`` for the auxiliary discriminator.
    """

    def __init__(self, rng, *, kind="ring", latent_dim=8, channels=6, spatial=4, n_blocks=2,
                 fusion="additive", hidden=64, dema_kwargs=None, noise_rng=None):
        if kind not in ("ring", "image"):
            raise ValueError(f"unknown generator kind {kind!r}")
        self._kind = kind
        self._dz = latent_dim
        self._C, self._S = channels, spatial
        self._tap = (n_blocks - 1) // 2
        dk = dict(dema_kwargs or {})
        dk.setdefault("noise_rng", noise_rng)
        self.inp = Linear(latent_dim, channels * spatial * spatial, rng)
        self.blocks = [GctdrnBlock(channels, rng, mode=fusion, dema_kwargs=dk) for _ in range(n_blocks)]
        self.enhance = GlobalEnhance(channels, rng)
        if kind == "ring":
            self.head = MlpStack([channels * spatial * spatial, hidden, 2], rng)
        else:
            self.up1 = Conv2d(channels, channels, 3, rng)
            self.up2 = Conv2d(channels, 1, 3, rng)

    @property
    def latent_dim(self):
        return self._dz

    @property
    def feature_shape(self):
        return (self._C, self._S, self._S)

    @property
    def sample_shape(self):
        return (2,) if self._kind == "ring" else (1, 16, 16)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self._dz:
            raise ShapeError(f"latent must be [B,{self._dz}], got {z.shape}")
        B = z.shape[0]
        h = T.reshape(self.inp(z).leaky_relu(0.2), (B, self._C, self._S, self._S))
        f_gen = None
        contrastive = []
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if blk.contrastive is not None:
                contrastive.append(blk.contrastive)
            if i == self._tap:
                f_gen = h
        h = self.enhance(h)
        if self._kind == "ring":
            out = self.head(T.reshape(h, (B, -1)))
        else:
            h = self.up1(T.upsample_nearest(h, 2)).leaky_relu(0.2)
            out = self.up2(T.upsample_nearest(h, 2)).tanh()
        lgcl = None
        if contrastive:
            lgcl = contrastive[0]
            for c in contrastive[1:]:
                lgcl = lgcl + c
            lgcl = lgcl / len(contrastive)
        return out, f_gen, lgcl


def generator_forward(gen, z):
    sample, f_gen, _ = gen(z)
    return sample, f_gen


class Discriminator(Module):
    """Logit classifier that also exposes its hidden activations."""

    def __init__(self, rng, *, kind="ring", hidden=64, channels=8, dropout=0.1, noise_rng=None):
        self._kind = kind
        self._dropout = dropout
        self._noise_rng = noise_rng
        if kind == "ring":
            self.l1 = Linear(2, hidden, rng)
            self.l2 = Linear(hidden, hidden, rng)
            self.out = Linear(hidden, 1, rng)
            self._early_dim = hidden
        else:
            self.c1 = Conv2d(1, channels, 3, rng, stride=2)
            self.c2 = Conv2d(channels, 2 * channels, 3, rng, stride=2)
            self.out = Linear(2 * channels * 16, 1, rng)
            self._early_dim = channels * 64

    @property
    def early_dim(self):
        return self._early_dim

    def _drop(self, h):
        if self._noise_rng is None:
            return h
        return T.dropout(h, self._dropout, self._noise_rng, self.training)

    def early(self, x):
        if self._kind == "ring":
            return self.l1(x).leaky_relu(0.2)
        return self.c1(x).leaky_relu(0.2)

    def forward(self, x):
        """Returns ``(logits[B], [phi_1, phi_2])``."""
        B = x.shape[0]
        h1 = self.early(x)
        if self._kind == "ring":
            h2 = self.l2(self._drop(h1)).leaky_relu(0.2)
            logits = self.out(self._drop(h2))
        else:
            h2 = self.c2(self._drop(h1)).leaky_relu(0.2)
            logits = self.out(T.reshape(self._drop(h2), (B, -1)))
        return T.reshape(logits, (B,)), [h1, h2]


class AuxDiscriminator(Module):
    """Small classifier over generator mid-layer features.

    Real-side inputs come from the main discriminator's first layer (detached)
    mapped to the generator feature size by ``encoder``.
    """

    def __init__(self, feature_shape, early_dim, rng, hidden=32):
        self._shape = tuple(feature_shape)
        n = int(np.prod(self._shape))
        self.encoder = Linear(early_dim, n, rng)
        self.net = MlpStack([n, hidden, 1], rng)

    def encode_real(self, early):
        B = early.shape[0]
        return T.reshape(self.encoder(T.reshape(early, (B, -1))).tanh(), (B,) + self._shape)

    def forward(self, f):
        if tuple(f.shape[1:]) != self._shape:
            raise ShapeError(f"aux input {f.shape[1:]} != generator features {self._shape}")
        B = f.shape[0]
        return T.reshape(self.net(T.reshape(f, (B, -1))), (B,))


# -- losses ------------------------------------------------------------------------
def _check_batch(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"logit shapes differ: {a.shape} vs {b.shape}")


def loss_d_main(real_logits, fake_logits, real_target=1.0):
    """``-E log D(x) - E log(1 - D(G(z)))``; ``real_target < 1`` smooths one side."""
    _check_batch(real_logits, fake_logits)
    return bce_logits(real_logits, real_target) + bce_logits(fake_logits, 0.0)


def loss_d_aux(real_feature_logits, gen_feature_logits, printed=False):
    """Aux discriminator loss.

    Default: encoded-real features are the positive class, generator
    features the negative class.  ``printed=True`` evaluates the literal form
    with both expectations over generator features (constant-optimum; kept
    for ablations).
    """
    if printed:
        return bce_logits(gen_feature_logits, 1.0) + bce_logits(gen_feature_logits, 0.0)
    return bce_logits(real_feature_logits, 1.0) + bce_logits(gen_feature_logits, 0.0)


def loss_g(fake_main_logits, gen_feature_aux_logits=None):
    """``-E log D_main(G(z)) [- E log D_aux(F_gen)]``."""
    loss = bce_logits(fake_main_logits, 1.0)
    if gen_feature_aux_logits is not None:
        loss = loss + bce_logits(gen_feature_aux_logits, 1.0)
    return loss


def loss_g_total(l_g, l_aux, lambda_aux):
    if lambda_aux < 0:
        raise ValueError("lambda_aux must be nonnegative")
    if lambda_aux == 0:
        return l_g
    return l_g + l_aux * float(lambda_aux)


def feature_matching_loss(real_feats, fake_feats):
    """``sum_i ||mean_b phi_i(x) - mean_b phi_i(G(z))||^2 / N_i`` over aligned layers."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"layer count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    total = None
    for r, f in zip(real_feats, fake_feats):
        r, f = T.as_tensor(r), T.as_tensor(f)
        if r.shape[1:] != f.shape[1:]:
            raise ShapeError(f"feature shapes differ: {r.shape} vs {f.shape}")
        n = int(np.prod(r.shape[1:]))
        d = T.mean(r, axes=0) - T.mean(f, axes=0)
        term = T.sum(d * d) * (1.0 / n)
        total = term if total is None else total + term
    return total
