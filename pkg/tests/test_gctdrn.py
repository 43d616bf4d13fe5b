import numpy as np
import pytest

from mspg import tensor as T
from mspg.gctdrn import (GctdrnBlock, GlobalEnhance, block_forward_additive, block_forward_weighted,
                         global_enhance)
from mspg.tensor import ShapeError

from gradcheck import check_module

DK = dict(windows=(1, 2, 2))


def _block(mode="additive", seed=0, c=6, **kw):
    return GctdrnBlock(c, np.random.default_rng(seed), mode=mode, dema_kwargs=DK, **kw)


def test_zero_weights_collapse_to_identity(f64, rng):
    blk = _block()
    blk.alpha.data[...] = 0
    blk.beta.data[...] = 0
    x = rng.normal(size=(2, 6, 4, 4))
    assert block_forward_additive(T.tensor(x), blk).data.tobytes() == x.tobytes()


def test_zero_branches_with_beta_zero(f64, rng):
    blk = _block()
    blk.beta.data[...] = 0
    for b in blk.branches:
        b.weight.data[...] = 0
    x = rng.normal(size=(2, 6, 4, 4))
    np.testing.assert_array_equal(blk(T.tensor(x)).data, x)


def _conv_np(x, w, b):
    r = w.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    B, C, H, W = x.shape
    out = np.zeros((B, w.shape[0], H, W))
    for i in range(H):
        for j in range(W):
            out[:, :, i, j] = np.einsum("bchw,ochw->bo", xp[:, :, i:i + 2 * r + 1, j:j + 2 * r + 1], w)
    return out + b


def test_additive_matches_straight_line(f64, rng):
    blk = _block(seed=2)
    x = rng.normal(size=(2, 6, 4, 4))
    att = blk.attention(T.tensor(x)).out.data
    branch = sum(_conv_np(x, b.weight.data, b.bias.data) for b in blk.branches)
    ref = float(blk.alpha.data) * branch + float(blk.beta.data) * att + x
    np.testing.assert_allclose(blk(T.tensor(x)).data, ref, atol=1e-5)


def test_weighted_equal_branches(f64, rng):
    blk = _block("weighted")
    w = rng.normal(size=blk.branches[0].weight.shape)
    for b in blk.branches:
        k = b.weight.shape[-1]
        b.weight.data[...] = 0
        off = (k - 3) // 2
        b.weight.data[:, :, off:off + 3, off:off + 3] = w
    x = T.tensor(rng.normal(size=(2, 6, 4, 4)))
    rec = {}
    out = blk.forward_weighted(x, record=rec)
    np.testing.assert_allclose(rec["branch_weights"], 1 / 3, atol=1e-12)
    one = blk.branches[0](x).data
    np.testing.assert_allclose(out.data, one + x.data, atol=1e-12)


def test_weighted_matches_softmax_oracle(f64, rng):
    blk = _block("weighted", seed=4)
    x = rng.normal(size=(2, 6, 4, 4))
    outs = [_conv_np(x, b.weight.data, b.bias.data) for b in blk.branches]
    s = np.stack([np.einsum("oc,bchw->bohw", blk.score.data, o)[:, 0] for o in outs], axis=1)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    ref = sum(w[:, i:i + 1] * o for i, o in enumerate(outs)) + x
    got = block_forward_weighted(T.tensor(x), blk)
    np.testing.assert_allclose(got.data, ref, atol=1e-10)
    np.testing.assert_allclose(w.sum(axis=1), 1, atol=1e-12)


def test_weighted_output_within_branch_hull(f64, rng):
    blk = _block("weighted", seed=6)
    x = T.tensor(rng.normal(size=(3, 6, 4, 4)))
    mix = blk(x).data - x.data
    outs = np.stack([b(x).data for b in blk.branches])
    assert np.all(mix >= outs.min(axis=0) - 1e-12) and np.all(mix <= outs.max(axis=0) + 1e-12)


def test_single_branch_weighted_rejected():
    with pytest.raises(ValueError):
        GctdrnBlock(4, np.random.default_rng(0), mode="weighted", kernels=(3,))


def test_channel_change_needs_projection():
    with pytest.raises(ShapeError):
        GctdrnBlock(4, np.random.default_rng(0), c_out=6, projection=False, mode="weighted")
    blk = GctdrnBlock(4, np.random.default_rng(0), c_out=6, mode="weighted")
    assert blk(T.tensor(np.ones((1, 4, 3, 3)))).shape == (1, 6, 3, 3)


@pytest.mark.parametrize("mode", ["additive", "weighted"])
def test_stacking_preserves_shape(mode, rng):
    x = T.tensor(rng.normal(size=(2, 6, 4, 4)))
    for i in range(4):
        x = _block(mode, seed=i)(x)
    assert x.shape == (2, 6, 4, 4)


def test_global_enhance_examples(f64):
    ge = GlobalEnhance(3, np.random.default_rng(0), zero_init=True)
    x = T.tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(global_enhance(x, ge).data, x.data)
    ge = GlobalEnhance(3, np.random.default_rng(0))
    c = T.tensor(np.full((1, 3, 4, 4), 0.5))
    shift = ge(c).data - 0.5
    # constant field -> every position gets the same per-channel shift
    assert np.allclose(shift, shift[:, :, :1, :1])


def test_global_enhance_gradient(rng):
    with T.precision(np.float64):
        ge = GlobalEnhance(3, np.random.default_rng(0), hidden=2)
        x = T.tensor(rng.normal(size=(2, 3, 2, 2)))
        assert check_module(lambda: T.sum(ge(x).tanh()), ge) < 1e-4


@pytest.mark.parametrize("mode", ["additive", "weighted"])
def test_block_gradients(mode, rng):
    with T.precision(np.float64):
        blk = GctdrnBlock(2, np.random.default_rng(1), mode=mode, kernels=(1, 3),
                          dema_kwargs=dict(windows=(1, 2), scales=(3,), n_context=2, dropout=0))
        x = T.tensor(rng.normal(size=(2, 2, 2, 2)))
        assert check_module(lambda: T.sum(blk(x) ** 2), blk) < 1e-4
