import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspg import tensor as T
from mspg.nn import (EMA, SGD, AdamW, Linear, MlpStack, Module, adamw_step, bce_logits,
                     ema_update, glorot_bound, init_params)
from mspg.tensor import Parameter

from gradcheck import check_module


def test_init_params_deterministic_and_bounded():
    spec = [("w", (4, 4)), ("b", (4,)), ("k", (3, 2, 3, 3))]
    a, b = init_params(spec, 7), init_params(spec, 7)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert np.all(a["b"] == 0)
    assert np.all(np.abs(a["w"]) < math.sqrt(6 / 8))
    assert np.all(np.abs(a["k"]) < math.sqrt(6 / (18 + 27)))


def test_init_rejects_zero_fan():
    with pytest.raises(ValueError):
        glorot_bound(0, 3)
    with pytest.raises(ValueError):
        init_params([("w", (0, 4))], 0)


def test_linear_shape_contract(rng):
    lin = Linear(3, 5, rng)
    assert lin(T.tensor(np.ones((2, 3)))).shape == (2, 5)
    assert lin(T.tensor(np.ones((2, 4, 3)))).shape == (2, 4, 5)
    assert np.all(lin.bias.data == 0)


def test_mlp_gradient(rng):
    with T.precision(np.float64):
        mlp = MlpStack([3, 4, 2], np.random.default_rng(0), ["tanh", "none"])
        x = T.tensor(rng.normal(size=(5, 3)))
        assert check_module(lambda: T.sum(mlp(x) ** 2), mlp) < 1e-4


def test_module_state_dict_roundtrip(rng):
    a, b = MlpStack([2, 3, 1], rng), MlpStack([2, 3, 1], rng)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})


def _scalar_param(v):
    with T.precision(np.float64):
        return Parameter(np.array(v))


def test_adamw_zero_grad_is_fixed_point():
    p = _scalar_param(0.3)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert float(p.data) == 0.3


def test_adamw_first_step_hand_value():
    p = _scalar_param(0.0)
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
    p.grad = np.ones_like(p.data)
    adamw_step([p], opt)
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert abs(float(p.data) + 0.1 / (1 + 1e-8)) < 1e-15
    assert opt.step_count == 1


def test_adamw_decoupled_decay():
    p = _scalar_param(1.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert abs(float(p.data) - 0.999) < 1e-15


def test_adamw_moment_shape_mismatch():
    p = _scalar_param(1.0)
    opt = AdamW([p])
    opt.m[0] = np.zeros(3)
    p.grad = np.zeros_like(p.data)
    with pytest.raises(ValueError):
        opt.step()


def test_adamw_decreases_convex_quadratic():
    with T.precision(np.float64):
        target = np.array([1.0, -2.0, 0.5])
        p = Parameter(np.zeros(3))
        opt = AdamW([p], lr=1e-3, weight_decay=0.0)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            d = p - T.tensor(target)
            loss = T.sum(d * d)
            losses.append(float(loss.data))
            loss.backward()
            opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_sgd_literal_update():
    p = _scalar_param(1.0)
    opt = SGD([p], lr=0.5)
    p.grad = np.array(2.0)
    opt.step()
    assert float(p.data) == 0.0


def test_ema_examples():
    for decay, expect in ((0.9999, 0.9999), (1.0, 1.0), (0.0, 0.0)):
        p = _scalar_param(1.0)
        ema = EMA([("w", p)], decay)
        p.data[...] = 0.0
        ema_update(ema, [("w", p)])
        assert abs(float(ema.shadow["w"]) - expect) < 1e-15


def test_ema_untracked_parameter():
    ema = EMA([("w", _scalar_param(1.0))], 0.5)
    with pytest.raises(KeyError):
        ema.update([("other", _scalar_param(0.0))])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 16), decay=st.floats(0.01, 0.99))
def test_ema_is_convex_combination(seed, decay):
    r = np.random.default_rng(seed)
    hist = r.normal(size=(30, 4))
    p = Parameter(hist[0].copy(), dtype=np.float64)
    ema = EMA([("w", p)], decay)
    for h in hist[1:]:
        p.data[...] = h
        ema.update([("w", p)])
    s = ema.shadow["w"]
    assert np.all(s >= hist.min(axis=0) - 1e-12) and np.all(s <= hist.max(axis=0) + 1e-12)


def test_bce_examples():
    with T.precision(np.float64):
        assert abs(float(bce_logits(T.tensor([0.0]), T.tensor([1.0])).data) - math.log(2)) < 1e-12
        assert float(bce_logits(T.tensor([40.0]), T.tensor([1.0])).data) < 1e-15
        x, t = -2.0, 0.3
        s = 1 / (1 + math.exp(-x))
        direct = -(t * math.log(s) + (1 - t) * math.log(1 - s))
        assert abs(float(bce_logits(T.tensor([x]), T.tensor([t])).data) - direct) < 1e-9
    with pytest.raises(ValueError):
        bce_logits(T.tensor([0.0]), T.tensor([-0.1]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_bce_matches_naive_where_finite(seed):
    r = np.random.default_rng(seed)
    x, t = r.normal(scale=5, size=8), r.uniform(size=8)
    with T.precision(np.float64):
        got = float(bce_logits(T.tensor(x), T.tensor(t)).data)
    s = 1 / (1 + np.exp(-x))
    naive = float(np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s))))
    assert abs(got - naive) < 1e-6


def test_train_eval_propagates():
    class Outer(Module):
        def __init__(self):
            self.inner = MlpStack([1, 2, 1], np.random.default_rng(0))
    m = Outer().eval()
    assert not m.inner.training and not m.inner.layers[0].training
