"""Layers, initialization, optimizers, weight EMA and the logit-space BCE loss."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

ACTIVATIONS = {
    "relu": lambda x: x.relu(),
    "leaky-relu": lambda x: x.leaky_relu(0.2),
    "tanh": lambda x: x.tanh(),
    "sigmoid": lambda x: x.sigmoid(),
    "none": lambda x: x,
}


class Module:
    """Minimal container: parameters and submodules are discovered by attribute walk."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield from v.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, p in params.items():
            if p.data.shape != tuple(state[k].shape):
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def glorot_bound(fan_in, fan_out):
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"zero fan: fan_in={fan_in}, fan_out={fan_out}")
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(spec, seed):
    """Glorot-uniform weights and zero biases for a list of layer shapes.

    ``spec`` is a list of ``(name, shape)``; 2-D shapes are ``(out, in)``,
    4-D shapes are conv kernels ``(out, in, k, k)``, 1-D shapes are biases.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in spec:
        shape = tuple(shape)
        if len(shape) == 1:
            out[name] = np.zeros(shape, dtype=T.get_default_dtype())
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        a = glorot_bound(shape[1] * receptive, shape[0] * receptive)
        out[name] = rng.uniform(-a, a, size=shape).astype(T.get_default_dtype())
    return out


def glorot(rng, shape, fan_in=None, fan_out=None):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive if fan_in is None else fan_in
    fan_out = shape[0] * receptive if fan_out is None else fan_out
    a = glorot_bound(fan_in, fan_out)
    return Parameter(rng.uniform(-a, a, size=shape))


class Linear(Module):
    """``y = x W^T + b`` on the last axis."""

    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = glorot(rng, (n_out, n_in))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight.T) if x.ndim == 2 else _lastaxis_linear(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


def _lastaxis_linear(x, w):
    lead = x.shape[:-1]
    y = T.matmul(x.reshape(-1, x.shape[-1]), w.T)
    return y.reshape(*lead, w.shape[0])


class MlpStack(Module):
    def __init__(self, sizes, rng, activations=None, dropout=0.0, dropout_rng=None):
        if activations is None:
            activations = ["leaky-relu"] * (len(sizes) - 2) + ["none"]
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self._acts = list(activations)
        self._dropout = dropout
        self._drop_rng = dropout_rng

    def forward(self, x, features=None):
        n = len(self.layers)
        for i, (layer, act) in enumerate(zip(self.layers, self._acts)):
            x = ACTIVATIONS[act](layer(x))
            if i < n - 1:
                if features is not None:
                    features.append(x)
                if self._drop_rng is not None:
                    x = T.dropout(x, self._dropout, self._drop_rng, self.training)
        return x


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding="same", bias=True):
        self.weight = glorot(rng, (c_out, c_in, k, k))
        self.bias = Parameter(np.zeros((1, c_out, 1, 1))) if bias else None
        self._stride = stride
        self._padding = padding

    def forward(self, x):
        y = T.conv2d(x, self.weight, stride=self._stride, padding=self._padding)
        return y + self.bias if self.bias is not None else y


# -- optimizers -------------------------------------------------------------
class AdamW:
    """AdamW with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, params, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.data.shape:
                raise ValueError(f"moment shape {m.shape} does not match parameter {p.data.shape}")
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        return {"step": self.step_count, "lr": self.lr, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for dst, src in zip(self.m + self.v, list(state["m"]) + list(state["v"])):
            if dst.shape != src.shape:
                raise ValueError("optimizer moment shape mismatch")
            dst[...] = src


class SGD:
    """Plain ``theta <- theta - lr * grad``."""

    def __init__(self, params, lr=0.1):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        return {"step": self.step_count, "lr": self.lr, "m": [], "v": []}

    def load_state(self, state):
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])


def adamw_step(params, state):
    """Functional wrapper: apply one update of ``state`` (an AdamW) to ``params``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameters are not the ones tracked by this optimizer")
    state.step()


class EMA:
    """Shadow copy ``s <- d*s + (1-d)*p`` of a set of named parameters."""

    def __init__(self, named_params, decay=0.9999):
        if not 0 <= decay <= 1:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in named_params}

    def update(self, named_params):
        d = self.decay
        for k, p in named_params:
            if k not in self.shadow:
                raise KeyError(f"untracked parameter {k}")
            s = self.shadow[k]
            if s.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            s *= d
            s += (1 - d) * p.data


def ema_update(ema, named_params):
    ema.update(named_params)


def bce_logits(logits, target):
    """Numerically stable binary cross-entropy on logits, averaged over the batch."""
    return T.bce_with_logits(logits, target)
