import numpy as np
import pytest

from oracles import window_oracle
from stsgr import tensor as T
from stsgr.temporal import (
    AlignmentError, MemoryProjection, VisualMemorySequence, WindowAttention, aggregate_sequence, audio_augment,
    window_indices,
)


def window(d, tau, seed=0):
    return WindowAttention(d, tau, np.random.default_rng(seed))


def test_tau_one_is_identity():
    x = T.Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    p = window(4, 1)
    assert aggregate_sequence(x, p).data is x.data
    F = T.Tensor(np.random.default_rng(1).normal(size=(4, 1)))
    np.testing.assert_array_equal(p.aggregate_window(F).data, F.data[:, 0])


def test_identical_columns_and_constant_sequence():
    p = window(3, 3)
    col = np.array([0.2, -1.0, 4.0])
    np.testing.assert_allclose(p.aggregate_window(T.Tensor(np.tile(col[:, None], (1, 3)))).data, col, atol=1e-15)
    const = np.tile(col, (6, 1))
    np.testing.assert_allclose(aggregate_sequence(T.Tensor(const), p).data, const, atol=1e-15)


def test_single_window_matches_explicit_formula():
    rng = np.random.default_rng(2)
    p = window(4, 3, 3)
    F = rng.normal(size=(4, 3))
    scores = np.array([p.gamma.data @ np.tanh(p.w_window.data @ F[:, t]) for t in range(3)])
    beta = np.exp(scores - scores.max())
    beta /= beta.sum()
    np.testing.assert_allclose(p.aggregate_window(T.Tensor(F)).data, F @ beta, atol=1e-12)


def test_window_column_count_checked():
    with pytest.raises(ValueError):
        window(4, 3).aggregate_window(T.Tensor(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        window(4, 2)


@pytest.mark.parametrize("seed", range(10))
def test_sequence_matches_clamped_oracle(seed):
    rng = np.random.default_rng(seed)
    p = window(6, 3, seed)
    frames = rng.normal(size=(5, 6))
    got = aggregate_sequence(T.Tensor(frames), p).data
    np.testing.assert_allclose(got, window_oracle(frames, 3, p.w_window.data, p.gamma.data), atol=1e-12)


def test_single_frame_collapses():
    x = np.random.default_rng(3).normal(size=(1, 4))
    np.testing.assert_allclose(aggregate_sequence(T.Tensor(x), window(4, 5)).data, x, atol=1e-15)


def test_betas_normalized_and_outputs_in_hull():
    rng = np.random.default_rng(4)
    p = window(4, 5, 1)
    frames = rng.normal(size=(7, 4))
    idx = window_indices([7], 5)
    beta = p.weights(T.Tensor(frames[idx])).data
    assert (beta >= 0).all()
    np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-9)
    out = aggregate_sequence(T.Tensor(frames), p).data
    assert (out >= frames[idx].min(axis=1) - 1e-12).all() and (out <= frames[idx].max(axis=1) + 1e-12).all()


def test_batched_videos_do_not_mix():
    rng = np.random.default_rng(5)
    p = window(3, 3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    both = p(T.Tensor(np.vstack([a, b])), [4, 2]).data
    np.testing.assert_allclose(both[:4], aggregate_sequence(T.Tensor(a), p).data, atol=1e-15)
    np.testing.assert_allclose(both[4:], aggregate_sequence(T.Tensor(b), p).data, atol=1e-15)


def test_shift_equivariance_in_interior():
    rng = np.random.default_rng(6)
    p = window(3, 3)
    x = rng.normal(size=(8, 3))
    shifted = np.vstack([rng.normal(size=(1, 3)), x[:-1]])
    out, out_s = aggregate_sequence(T.Tensor(x), p).data, aggregate_sequence(T.Tensor(shifted), p).data
    np.testing.assert_allclose(out_s[2:7], out[1:6], atol=1e-14)


def test_audio_augment():
    mem = T.Tensor(np.ones((3, 2)))
    assert audio_augment(mem, None) is mem
    out = audio_augment(mem, np.zeros((3, 4))).data
    np.testing.assert_array_equal(out[:, :2], mem.data)
    np.testing.assert_array_equal(out[:, 2:], 0.0)
    audio = np.random.default_rng(7).normal(size=(3, 4))
    np.testing.assert_array_equal(audio_augment(mem, audio).data, np.hstack([mem.data, audio]))
    with pytest.raises(AlignmentError):
        audio_augment(mem, np.zeros((2, 4)))


def test_sequence_stage_tags():
    seq = VisualMemorySequence(T.Tensor(np.ones((2, 3))), stage="aggregated")
    assert seq.augmented() is seq
    aug = VisualMemorySequence(T.Tensor(np.ones((2, 3))), np.zeros((2, 5)), "aggregated").augmented()
    assert aug.stage == "audio" and aug.frames.shape == (2, 8)


def test_projection_identity_and_bias():
    proj = MemoryProjection(3, 3, np.random.default_rng(8))
    proj.linear.weight.data[:] = np.eye(3)
    proj.linear.bias.data[:] = 0.0
    x = np.random.default_rng(9).normal(size=(4, 3))
    np.testing.assert_array_equal(proj(T.Tensor(x)).data, x)
    proj.linear.bias.data[:] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(proj(T.Tensor(np.zeros((2, 3)))).data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ValueError):
        proj(T.Tensor(np.zeros((2, 4))))
