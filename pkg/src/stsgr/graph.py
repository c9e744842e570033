"""Intra-frame scene-graph reasoning: graph attention, EdgeConv and dual pooling.

Frames are processed as one disjoint-union batch. Edges are stored as
``(src, dst)`` pairs meaning ``src -> dst``; every node receives a self-loop, so
the in-neighborhood used by both graph layers always contains the node itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, xavier_uniform
from .tensor import Tensor


class GraphError(ValueError):
    pass


@dataclass
class SceneGraph:
    node_features: np.ndarray
    edges: list[tuple[int, int]] = field(default_factory=list)
    label_ids: list[int] | None = None
    union_node_flags: list[bool] | None = None
    frame_index: int = 0

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        if self.union_node_flags is None:
            self.union_node_flags = [False] * self.num_nodes

    @property
    def num_nodes(self) -> int:
        return 0 if self.node_features.ndim != 2 else self.node_features.shape[0]

    def validate(self) -> None:
        if self.node_features.ndim != 2 or self.num_nodes < 1:
            raise GraphError(f"frame {self.frame_index}: scene graph needs at least one node")
        n = self.num_nodes
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"frame {self.frame_index}: edge ({i}, {j}) out of range for {n} nodes")
        if len(set(self.edges)) != len(self.edges):
            raise GraphError(f"frame {self.frame_index}: duplicate directed edge")
        if self.label_ids is not None and len(self.label_ids) != n:
            raise GraphError(f"frame {self.frame_index}: {len(self.label_ids)} labels for {n} nodes")
        if len(self.union_node_flags) != n:
            raise GraphError(f"frame {self.frame_index}: {len(self.union_node_flags)} union flags for {n} nodes")

    def without_union_nodes(self) -> SceneGraph:
        """Drop union-box nodes and every edge touching them."""
        keep = [i for i, u in enumerate(self.union_node_flags) if not u]
        if len(keep) == self.num_nodes:
            return self
        remap = {old: new for new, old in enumerate(keep)}
        return SceneGraph(
            node_features=self.node_features[keep],
            edges=[(remap[i], remap[j]) for i, j in self.edges if i in remap and j in remap],
            label_ids=None if self.label_ids is None else [self.label_ids[i] for i in keep],
            union_node_flags=[False] * len(keep),
            frame_index=self.frame_index,
        )

    def permuted(self, perm: Sequence[int]) -> SceneGraph:
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return SceneGraph(
            node_features=self.node_features[perm],
            edges=[(inv[i], inv[j]) for i, j in self.edges],
            label_ids=None if self.label_ids is None else [self.label_ids[i] for i in perm],
            union_node_flags=[self.union_node_flags[i] for i in perm],
            frame_index=self.frame_index,
        )


def with_self_loops(edges: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    """Edge array (E, 2) with a self-loop added to every node lacking one."""
    have = {(i, j) for i, j in edges}
    extra = [(i, i) for i in range(n) if (i, i) not in have]
    arr = np.array(list(edges) + extra, dtype=np.int64).reshape(-1, 2)
    return arr


@dataclass
class GraphBatch:
    """Disjoint union of scene graphs; ``graph_index[v]`` is the graph owning node ``v``."""

    features: np.ndarray
    label_ids: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_index: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[SceneGraph]) -> GraphBatch:
        if not graphs:
            raise GraphError("empty graph batch")
        feats, labels, src, dst, owner = [], [], [], [], []
        offset = 0
        for g_idx, g in enumerate(graphs):
            g.validate()
            n = g.num_nodes
            feats.append(g.node_features)
            labels.extend(g.label_ids if g.label_ids is not None else [-1] * n)
            e = with_self_loops(g.edges, n)
            src.append(e[:, 0] + offset)
            dst.append(e[:, 1] + offset)
            owner.append(np.full(n, g_idx))
            offset += n
        widths = {f.shape[1] for f in feats}
        if len(widths) != 1:
            raise GraphError(f"inconsistent node feature widths {sorted(widths)}")
        return cls(
            features=np.concatenate(feats, axis=0),
            label_ids=np.asarray(labels, dtype=np.int64),
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            graph_index=np.concatenate(owner),
            num_graphs=len(graphs),
        )


class LabelVocabulary:
    """Semantic label names; multi-word labels map to several word ids."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        words: dict[str, int] = {}
        self.label_words: list[list[int]] = []
        for name in self.names:
            ids = []
            for w in name.lower().split():
                ids.append(words.setdefault(w, len(words)))
            self.label_words.append(ids)
        self.words = list(words)

    def __len__(self) -> int:
        return len(self.names)

    def averaging_matrix(self) -> np.ndarray:
        """(labels, words) matrix whose rows average a label's word embeddings."""
        m = np.zeros((len(self.names), len(self.words)))
        for i, ids in enumerate(self.label_words):
            for w in ids:
                m[i, w] += 1.0 / len(ids)
        return m


def label_embed(label_ids, table: Tensor, label_vocab: LabelVocabulary) -> Tensor:
    """Per-node label features: the mean word embedding of each label, zeros for id -1."""
    ids = np.asarray(label_ids, dtype=np.int64)
    if ((ids < -1) | (ids >= len(label_vocab))).any():
        bad = ids[(ids < -1) | (ids >= len(label_vocab))][0]
        raise GraphError(f"label id {bad} outside vocabulary of {len(label_vocab)} labels")
    avg = label_vocab.averaging_matrix()
    rows = np.zeros((ids.size, avg.shape[1]))
    known = ids >= 0
    rows[known] = avg[ids[known]]
    return T.matmul(T.Tensor(rows), table)


class GraphAttention(Module):
    """Multi-head graph attention.

    Head ``k`` scores an edge ``j -> i`` with
    ``leaky(theta_k . [W1_k x_i || W1_k x_j])``, normalizes over the
    in-neighborhood of ``i`` and aggregates ``W2_k x_j``; heads are passed
    through the same Leaky ReLU and concatenated.
    """

    def __init__(self, d_in: int, d_h: int, heads: int, rng: np.random.Generator, slope: float = 0.2):
        if d_h % heads:
            raise ValueError(f"d_h={d_h} not divisible by {heads} heads")
        self.d_in, self.d_h, self.heads, self.slope = d_in, d_h, heads, slope
        self.w_key = T.parameter(xavier_uniform(rng, d_h, d_in, (heads * d_h, d_in)))
        self.theta = T.parameter(xavier_uniform(rng, 1, 2 * d_h, (heads, 2 * d_h)))
        self.w_value = T.parameter(xavier_uniform(rng, d_h // heads, d_in, (d_h, d_in)))

    def attention(self, x: Tensor, src: np.ndarray, dst: np.ndarray, n: int) -> Tensor:
        """Edge coefficients alpha, shape (E, heads)."""
        K, d = self.heads, self.d_h
        z = T.reshape(T.matmul(x, T.transpose(self.w_key)), (n, K, d))
        score_dst = T.sum_(z * self.theta[:, :d], axis=2)
        score_src = T.sum_(z * self.theta[:, d:], axis=2)
        logits = T.leaky_relu(T.take(score_dst, dst) + T.take(score_src, src), self.slope)
        return T.segment_softmax(logits, dst, n)

    def __call__(self, x: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
        if x.shape[1] != self.d_in:
            raise GraphError(f"node features have width {x.shape[1]}, expected {self.d_in}")
        n, K = x.shape[0], self.heads
        alpha = self.attention(x, src, dst, n)
        values = T.reshape(T.matmul(x, T.transpose(self.w_value)), (n, K, self.d_h // K))
        messages = T.take(values, src) * T.reshape(alpha, alpha.shape + (1,))
        out = T.leaky_relu(T.segment_sum(messages, dst, n), self.slope)
        return T.reshape(out, (n, self.d_h))


class EdgeConv(Module):
    """Edge features ``e_ji = h([x_j || x_i])`` max-aggregated at the target node.

    ``h`` is Linear(2d, d) -> ReLU -> Linear(d, d); the first layer is applied to
    node features once and gathered per edge, which is algebraically the same
    as applying it to each concatenated pair.
    """

    def __init__(self, d_h: int, rng: np.random.Generator):
        self.d_h = d_h
        self.hidden = Linear(2 * d_h, d_h, rng)
        self.out = Linear(d_h, d_h, rng)

    def edge_features(self, x: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
        d = self.d_h
        w = self.hidden.weight
        from_src = T.matmul(x, T.transpose(w[:, :d]))
        from_dst = T.matmul(x, T.transpose(w[:, d:]))
        pre = T.take(from_src, src) + T.take(from_dst, dst) + self.hidden.bias
        return self.out(T.relu(pre))

    def __call__(self, x: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
        n = x.shape[0]
        if np.bincount(dst, minlength=n).min() == 0:
            raise GraphError("node without incoming edges; self-loops missing")
        return T.segment_max(self.edge_features(x, src, dst), dst, n)


def graph_pool(x: Tensor, graph_index: np.ndarray, num_graphs: int) -> Tensor:
    """Frame memories: mean over nodes || coordinatewise max over nodes, (G, 2d)."""
    return T.concat(
        [T.segment_mean(x, graph_index, num_graphs), T.segment_max(x, graph_index, num_graphs)], axis=1
    )


class IntraFrameReasoner(Module):
    """Visual stream (GAT) cascaded into semantic stream (EdgeConv), then pooling.

    ``use_gat=False`` swaps the attention layers for one linear projection and
    ``use_edgeconv=False`` passes GAT features straight to pooling.
    """

    def __init__(
        self,
        d_visual: int,
        d_label: int,
        d_h: int,
        heads: int,
        rng: np.random.Generator,
        label_vocab: LabelVocabulary | None = None,
        gat_layers: int = 1,
        edgeconv_layers: int = 1,
        use_gat: bool = True,
        use_edgeconv: bool = True,
        slope: float = 0.2,
    ):
        self.label_vocab = label_vocab
        self.use_labels = label_vocab is not None and d_label > 0
        d_in = d_visual + (d_label if self.use_labels else 0)
        if self.use_labels:
            self.label_table = T.parameter(xavier_uniform(rng, len(label_vocab.words), d_label))
        self.use_gat, self.use_edgeconv = use_gat, use_edgeconv
        if use_gat:
            self.gat = [GraphAttention(d_in if i == 0 else d_h, d_h, heads, rng, slope) for i in range(gat_layers)]
        else:
            self.projection = Linear(d_in, d_h, rng)
        if use_edgeconv:
            self.edgeconv = [EdgeConv(d_h, rng) for _ in range(edgeconv_layers)]
        self.d_h = d_h

    def node_inputs(self, batch: GraphBatch) -> Tensor:
        x = T.Tensor(batch.features)
        if self.use_labels:
            x = T.concat([x, label_embed(batch.label_ids, self.label_table, self.label_vocab)], axis=1)
        return x

    def node_features(self, batch: GraphBatch) -> Tensor:
        x = self.node_inputs(batch)
        if self.use_gat:
            for layer in self.gat:
                x = layer(x, batch.src, batch.dst)
        else:
            x = self.projection(x)
        if self.use_edgeconv:
            for layer in self.edgeconv:
                x = layer(x, batch.src, batch.dst)
        return x

    def __call__(self, batch: GraphBatch) -> Tensor:
        return graph_pool(self.node_features(batch), batch.graph_index, batch.num_graphs)
