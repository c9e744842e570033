import numpy as np
import pytest

from oracles import edgeconv_enumerate, gat_dense, pool
from stsgr import tensor as T
from stsgr.graph import (
    EdgeConv, GraphAttention, GraphBatch, GraphError, IntraFrameReasoner, LabelVocabulary, SceneGraph,
    graph_pool, label_embed, with_self_loops,
)


def random_graph(rng, n, n_edges):
    pairs = [(j, i) for i in range(n) for j in range(n) if i != j]
    pick = rng.choice(len(pairs), size=n_edges, replace=False)
    return [pairs[k] for k in pick]


def run_gat(gat, x, edges):
    e = with_self_loops(edges, x.shape[0])
    return gat(T.Tensor(x), e[:, 0], e[:, 1])


@pytest.mark.parametrize("seed", range(20))
def test_gat_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 6))
    edges = random_graph(rng, 5, 8)
    gat = GraphAttention(6, 8, 2, rng)
    out = run_gat(gat, x, edges).data
    ref, _ = gat_dense(x, edges, gat.w_key.data, gat.theta.data, gat.w_value.data, 2, 8)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_gat_coefficients_normalized_and_positive():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 4))
    edges = random_graph(rng, 6, 10)
    gat = GraphAttention(4, 8, 4, rng)
    e = with_self_loops(edges, 6)
    alpha = gat.attention(T.Tensor(x), e[:, 0], e[:, 1], 6).data
    assert (alpha > 0).all()
    sums = np.zeros((6, 4))
    np.add.at(sums, e[:, 1], alpha)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    _, dense = gat_dense(x, edges, gat.w_key.data, gat.theta.data, gat.w_value.data, 4, 8)
    np.testing.assert_allclose(dense[:, e[:, 1], e[:, 0]].T, alpha, atol=1e-12)


def test_gat_single_node():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3))
    gat = GraphAttention(3, 4, 2, rng)
    out = run_gat(gat, x, []).data
    v = x @ gat.w_value.data.T
    np.testing.assert_allclose(out, np.where(v > 0, v, 0.2 * v), atol=1e-14)


def test_gat_symmetric_pair_gives_half():
    rng = np.random.default_rng(3)
    row = rng.normal(size=3)
    gat = GraphAttention(3, 4, 2, rng)
    e = with_self_loops([(0, 1), (1, 0)], 2)
    alpha = gat.attention(T.Tensor(np.stack([row, row])), e[:, 0], e[:, 1], 2).data
    np.testing.assert_allclose(alpha, 0.5, atol=1e-15)


def test_gat_permutation_equivariant():
    rng = np.random.default_rng(4)
    g = SceneGraph(rng.normal(size=(5, 3)), random_graph(rng, 5, 7))
    perm = rng.permutation(5)
    gp = g.permuted(perm)
    gat = GraphAttention(3, 4, 2, rng)
    out = run_gat(gat, g.node_features, g.edges).data
    out_p = run_gat(gat, gp.node_features, gp.edges).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_gat_errors():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        GraphAttention(3, 6, 4, rng)
    gat = GraphAttention(3, 4, 2, rng)
    with pytest.raises(GraphError):
        run_gat(gat, np.zeros((2, 5)), [])
    with pytest.raises(GraphError):
        GraphBatch.from_graphs([SceneGraph(np.zeros((0, 3)))])


@pytest.mark.parametrize("seed", range(20))
def test_edgeconv_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(4, 6))
    edges = random_graph(rng, 4, 5)
    ec = EdgeConv(6, rng)
    e = with_self_loops(edges, 4)
    out = ec(T.Tensor(x), e[:, 0], e[:, 1]).data
    ref = edgeconv_enumerate(x, edges, ec.hidden.weight.data, ec.hidden.bias.data, ec.out.weight.data, ec.out.bias.data)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_edgeconv_single_node_and_identical_features():
    rng = np.random.default_rng(6)
    ec = EdgeConv(3, rng)
    x = rng.normal(size=(1, 3))
    h = lambda a, b: ec.out.weight.data @ np.maximum(ec.hidden.weight.data @ np.concatenate([a, b]) + ec.hidden.bias.data, 0) + ec.out.bias.data
    np.testing.assert_allclose(ec(T.Tensor(x), np.array([0]), np.array([0])).data[0], h(x[0], x[0]), atol=1e-14)
    same = np.tile(x, (3, 1))
    e = with_self_loops([(1, 0), (2, 0)], 3)
    np.testing.assert_allclose(ec(T.Tensor(same), e[:, 0], e[:, 1]).data[0], h(x[0], x[0]), atol=1e-14)


def test_edgeconv_edge_order_invariant():
    rng = np.random.default_rng(7)
    x = T.Tensor(rng.normal(size=(5, 4)))
    e = with_self_loops(random_graph(rng, 5, 9), 5)
    ec = EdgeConv(4, rng)
    shuffled = e[rng.permutation(len(e))]
    np.testing.assert_array_equal(ec(x, e[:, 0], e[:, 1]).data, ec(x, shuffled[:, 0], shuffled[:, 1]).data)


def test_edgeconv_requires_incoming_edges():
    ec = EdgeConv(2, np.random.default_rng(0))
    with pytest.raises(GraphError):
        ec(T.Tensor(np.zeros((2, 2))), np.array([0]), np.array([0]))


def test_pooling_cases():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(graph_pool(T.Tensor(x), np.zeros(2, int), 1).data[0], [0.5, 0.5, 1, 1])
    single = np.array([[3.0, -1.0]])
    np.testing.assert_array_equal(graph_pool(T.Tensor(single), np.zeros(1, int), 1).data[0], [3, -1, 3, -1])
    rng = np.random.default_rng(8)
    y = rng.normal(size=(7, 3))
    owner = np.array([0, 0, 1, 1, 1, 2, 2])
    got = graph_pool(T.Tensor(y), owner, 3).data
    for g in range(3):
        np.testing.assert_allclose(got[g], pool(y[owner == g]), atol=1e-14)
    perm = rng.permutation(7)
    np.testing.assert_allclose(graph_pool(T.Tensor(y[perm]), owner[perm], 3).data, got, atol=1e-14)


def test_label_embedding_rules():
    vocab = LabelVocabulary(["cube", "red ball", "ball"])
    table = T.Tensor(np.arange(9.0).reshape(3, 3))  # words: cube, red, ball
    out = label_embed([0, 1, -1, 2], table, vocab).data
    np.testing.assert_array_equal(out[0], table.data[0])
    np.testing.assert_allclose(out[1], (table.data[1] + table.data[2]) / 2)
    np.testing.assert_array_equal(out[2], 0.0)
    np.testing.assert_array_equal(out[3], table.data[2])
    with pytest.raises(GraphError):
        label_embed([3], table, vocab)


def test_scene_graph_validation():
    with pytest.raises(GraphError, match="out of range"):
        SceneGraph(np.zeros((2, 3)), [(0, 2)]).validate()
    with pytest.raises(GraphError, match="duplicate"):
        SceneGraph(np.zeros((2, 3)), [(0, 1), (0, 1)]).validate()


def test_union_removal_drops_touching_edges():
    g = SceneGraph(np.arange(6.0).reshape(3, 2), [(0, 2), (1, 2), (0, 1)], [0, 1, 2], [False, False, True])
    h = g.without_union_nodes()
    assert h.num_nodes == 2 and h.edges == [(0, 1)] and h.label_ids == [0, 1]


@pytest.mark.parametrize("use_gat,use_edgeconv", [(True, True), (False, True), (True, False), (False, False)])
def test_reasoner_ablations_run_end_to_end(use_gat, use_edgeconv):
    rng = np.random.default_rng(9)
    vocab = LabelVocabulary(["a", "b c"])
    graphs = [SceneGraph(rng.normal(size=(3, 5)), [(0, 1)], [0, 1, -1]), SceneGraph(rng.normal(size=(1, 5)), [], [1])]
    r = IntraFrameReasoner(5, 4, 8, 2, rng, vocab, use_gat=use_gat, use_edgeconv=use_edgeconv)
    out = r(GraphBatch.from_graphs(graphs))
    assert out.shape == (2, 16)
    T.sum_(out).backward()
    assert all(p.grad is not None for p in r.parameters())
