import numpy as np
import pytest

from oracles import attention_loop, mha_oracle, shuffled_mha_oracle
from stsgr import tensor as T
from stsgr.nn import FeedForward
from stsgr.tensor import ShapeError
from stsgr.transformer import (
    AttentionBlock, MultiHeadAttention, ShuffleSpec, attention, causal_mask, head_shuffle, positional_encode,
)


def weights_of(mha):
    return mha.query.weight.data, mha.key.weight.data, mha.value.weight.data


def test_attention_single_key_and_uniform():
    rng = np.random.default_rng(0)
    q = T.Tensor(rng.normal(size=(3, 4)))
    v = T.Tensor(rng.normal(size=(1, 2)))
    out, _ = attention(q, T.Tensor(rng.normal(size=(1, 4))), v)
    np.testing.assert_array_equal(out.data, np.tile(v.data, (3, 1)))
    keys = T.Tensor(np.array([[0.0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 1, 1]]))
    q = T.Tensor(np.array([[1.0, 2.0, 0, 0]]))
    vals = T.Tensor(rng.normal(size=(3, 2)))
    out, _ = attention(q, keys, vals)
    np.testing.assert_allclose(out.data[0], vals.data.mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    for m in (None, mask):
        out, w = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), m)
        ref, ref_w = attention_loop(q, k, v, m)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(w.data, ref_w, rtol=0, atol=1e-12)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros((2, 4))))
    with pytest.raises(ShapeError):
        attention(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 4))))


def test_masked_weights_sum_to_one_and_zero_where_masked():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mask = rng.random((4, 6)) < 0.5
        mask[np.arange(4), rng.integers(6, size=4)] = True
        _, w = attention(T.Tensor(rng.normal(size=(4, 3)) * 10), T.Tensor(rng.normal(size=(6, 3)) * 10),
                         T.Tensor(rng.normal(size=(6, 2))), mask)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-9)
        assert (w.data[~mask] == 0.0).all()


def test_causal_mask_first_position():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    out, _ = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), causal_mask(4))
    np.testing.assert_allclose(out.data[0], v[0], atol=1e-15)
    assert causal_mask(1).tolist() == [[True]]


def test_positional_encoding_row_zero():
    np.testing.assert_array_equal(positional_encode(1, 4)[0], [0, 1, 0, 1])


def test_ffn_zero_weights_gives_bias():
    ffn = FeedForward(4, 8, np.random.default_rng(3))
    ffn.inner.weight.data[:] = 0
    ffn.outer.weight.data[:] = 0
    ffn.outer.bias.data[:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(ffn(T.Tensor(np.random.default_rng(4).normal(size=(2, 4)))).data, [[1, 2, 3, 4]] * 2)


def test_single_head_mha_equals_projected_attention():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(6, 1, rng)
    x = rng.normal(size=(3, 6))
    wq, wk, wv = weights_of(mha)
    ctx, _ = attention_loop(x @ wq.T, x @ wk.T, x @ wv.T, scale=mha.scale)
    ref = ctx @ mha.output.weight.data.T + mha.output.bias.data
    np.testing.assert_allclose(mha(T.Tensor(x), T.Tensor(x)).data, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_vanilla_mha_matches_head_oracle(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(8, 2, rng)
    xq, xkv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    ref = mha_oracle(xq, xkv, *weights_of(mha), 2, mha.scale) @ mha.output.weight.data.T + mha.output.bias.data
    np.testing.assert_allclose(mha(T.Tensor(xq), T.Tensor(xkv)).data, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_shuffled_mha_matches_composition_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    mha = MultiHeadAttention(16, 4, rng, "deterministic")
    xq, xkv = rng.normal(size=(3, 16)), rng.normal(size=(4, 16))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    spec = ShuffleSpec.transpose(4)
    maps = [(lin.weight.data, lin.bias.data) for lin in mha.bundle_outputs]
    ref = shuffled_mha_oracle(xq, xkv, *weights_of(mha), 4, 4, spec.permutation, maps, mha.scale, mask)
    np.testing.assert_allclose(mha(T.Tensor(xq), T.Tensor(xkv), mask).data, ref, rtol=0, atol=1e-10)


def test_transpose_shuffle_on_labeled_segments():
    # head k, segment g carries the value 10k+g
    heads = T.Tensor(np.array([[0.0, 1.0, 10.0, 11.0]]))
    out = head_shuffle(heads, ShuffleSpec.transpose(2, 2)).data
    np.testing.assert_array_equal(out[0], [[0, 10], [1, 11]])


def test_shuffle_bijection_and_k1_identity():
    rng = np.random.default_rng(6)
    x = T.Tensor(rng.normal(size=(2, 3, 36)))
    for spec in (ShuffleSpec.transpose(3), ShuffleSpec.random(3, 2, rng), ShuffleSpec.transpose(3, 4)):
        once = head_shuffle(x, spec)
        back = head_shuffle(T.reshape(once, (2, 3, 36)), spec.inverse())
        np.testing.assert_array_equal(T.reshape(back, (2, 3, 36)).data, x.data)
        np.testing.assert_array_equal(np.sort(once.data.reshape(-1)), np.sort(x.data.reshape(-1)))
    np.testing.assert_array_equal(head_shuffle(T.Tensor(x.data[..., :4]), ShuffleSpec.transpose(1)).data[..., 0, :],
                                  x.data[..., :4])
    with pytest.raises(ValueError):
        ShuffleSpec(2, 1, (0, 0))
    with pytest.raises(ShapeError):
        head_shuffle(T.Tensor(np.zeros((1, 6))), ShuffleSpec.transpose(2, 2))


def test_shuffled_k1_equals_vanilla_bit_for_bit():
    rng = np.random.default_rng(7)
    van = MultiHeadAttention(6, 1, np.random.default_rng(8), "off")
    shu = MultiHeadAttention(6, 1, np.random.default_rng(9), "deterministic")
    shu.load_state_dict({**{k: v for k, v in van.state_dict().items() if not k.startswith("output")},
                         "bundle_outputs.0.weight": van.output.weight.data,
                         "bundle_outputs.0.bias": van.output.bias.data})
    xq, xkv = T.Tensor(rng.normal(size=(2, 3, 6))), T.Tensor(rng.normal(size=(2, 5, 6)))
    mask = np.ones((2, 3, 5), dtype=bool)
    mask[0, :, 3:] = False
    np.testing.assert_array_equal(shu(xq, xkv, mask).data, van(xq, xkv, mask).data)


def test_identity_permutation_with_block_maps_equals_vanilla():
    rng = np.random.default_rng(10)
    van = MultiHeadAttention(8, 2, rng, "off")
    van.output.weight.data[:] = 0.0
    van.output.weight.data[:4, :4] = rng.normal(size=(4, 4))
    van.output.weight.data[4:, 4:] = rng.normal(size=(4, 4))
    shu = MultiHeadAttention(8, 2, rng, "deterministic")
    for name in ("query", "key", "value"):
        getattr(shu, name).weight.data[:] = getattr(van, name).weight.data
    for k, lin in enumerate(shu.bundle_outputs):
        lin.weight.data[:] = van.output.weight.data[4 * k:4 * k + 4, 4 * k:4 * k + 4]
        lin.bias.data[:] = van.output.bias.data[4 * k:4 * k + 4]
    shu.shuffle_spec = lambda: ShuffleSpec.identity(2)
    x = T.Tensor(rng.normal(size=(3, 8)))
    np.testing.assert_allclose(shu(x, x).data, van(x, x).data, atol=1e-14)


def test_random_mode_freezes_in_eval():
    mha = MultiHeadAttention(8, 2, np.random.default_rng(11), "random")
    x = T.Tensor(np.random.default_rng(12).normal(size=(3, 8)))
    mha.eval()
    assert mha.shuffle_spec() == ShuffleSpec.transpose(2)
    np.testing.assert_array_equal(mha(x, x).data, mha(x, x).data)
    mha.train()
    specs = {mha.shuffle_spec().permutation for _ in range(30)}
    assert len(specs) > 1


def test_causal_future_invariance_in_block():
    rng = np.random.default_rng(13)
    block = AttentionBlock(8, 16, 2, rng, "deterministic")
    x = rng.normal(size=(5, 8))
    base = block(T.Tensor(x), T.Tensor(x), causal_mask(5)).data
    y = x.copy()
    y[3:] = rng.normal(size=(2, 8))
    moved = block(T.Tensor(y), T.Tensor(y), causal_mask(5)).data
    np.testing.assert_array_equal(moved[:3], base[:3])


def test_mask_shape_checked():
    mha = MultiHeadAttention(4, 2, np.random.default_rng(14))
    x = T.Tensor(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        mha(x, x, np.ones((2, 3), dtype=bool))
