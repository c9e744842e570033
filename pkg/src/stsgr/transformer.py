"""Scaled dot-product attention, vanilla and head-shuffled multi-head attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor

SHUFFLE_MODES = ("off", "deterministic", "random")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, scale: float | None = None):
    """softmax(q k^T * scale) v; returns ``(context, weights)``.

    ``scale`` defaults to 1/sqrt(width of q). ``mask`` is boolean, True where a
    query may attend to a key, broadcastable to (..., Tq, Tk).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    logits = T.matmul(q, T.transpose(k)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, logits.shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} incompatible with logits {logits.shape}") from None
    weights = T.softmax(logits, axis=-1, mask=mask)
    return T.matmul(weights, v), weights


def causal_mask(n: int) -> np.ndarray:
    """(n, n) boolean mask; position t may attend to positions <= t."""
    return np.tril(np.ones((n, n), dtype=bool))


def positional_encode(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.power(10000.0, -(np.arange(0, d, 2) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


@dataclass(frozen=True)
class ShuffleSpec:
    """Permutation over ``heads * groups`` head segments.

    Bundle position ``p`` receives original segment ``permutation[p]``, where
    segment ``k * groups + g`` is piece ``g`` of head ``k``.
    """

    heads: int
    groups: int
    permutation: tuple[int, ...]

    def __post_init__(self):
        n = self.heads * self.groups
        if sorted(self.permutation) != list(range(n)):
            raise ValueError(f"permutation is not a bijection on {n} segments")

    @classmethod
    def transpose(cls, heads: int, groups: int | None = None) -> ShuffleSpec:
        """Channel-shuffle transpose: piece g of head k lands in bundle g (G=K)."""
        groups = heads if groups is None else groups
        perm = np.arange(heads * groups).reshape(heads, groups).T.reshape(-1)
        return cls(heads, groups, tuple(int(i) for i in perm))

    @classmethod
    def random(cls, heads: int, groups: int | None, rng: np.random.Generator) -> ShuffleSpec:
        groups = heads if groups is None else groups
        return cls(heads, groups, tuple(int(i) for i in rng.permutation(heads * groups)))

    @classmethod
    def identity(cls, heads: int, groups: int | None = None) -> ShuffleSpec:
        groups = heads if groups is None else groups
        return cls(heads, groups, tuple(range(heads * groups)))

    def inverse(self) -> ShuffleSpec:
        return ShuffleSpec(self.heads, self.groups, tuple(int(i) for i in np.argsort(self.permutation)))


def head_shuffle(heads_out: Tensor, spec: ShuffleSpec) -> Tensor:
    """Regroup concatenated head outputs (..., K*dk) into K bundles (..., K, dk)."""
    K, G = spec.heads, spec.groups
    d = heads_out.shape[-1]
    if d % K or (d // K) % G:
        raise ShapeError(f"head width {d // K if d % K == 0 else d / K} not divisible into {G} segments")
    lead = heads_out.shape[:-1]
    seg = T.reshape(heads_out, lead + (K * G, d // (K * G)))
    seg = T.take(seg, np.asarray(spec.permutation), axis=-2)
    return T.reshape(seg, lead + (K, d // K))


class MultiHeadAttention(Module):
    """Multi-head attention with either one output map or per-bundle shuffled maps.

    With ``shuffle_mode="off"`` head outputs are concatenated and passed through a
    single (d, d) map. Otherwise segments are permuted across heads and each of
    the K bundles gets its own (d/K, d/K) map before late-fusion concatenation.
    In ``"random"`` mode a fresh permutation is drawn on every training call;
    evaluation always uses the transpose.
    """

    def __init__(
        self,
        d: int,
        heads: int,
        rng: np.random.Generator,
        shuffle_mode: str = "off",
        groups: int | None = None,
        scale: float | None = None,
    ):
        if d % heads:
            raise ValueError(f"d_h={d} not divisible by {heads} heads")
        if shuffle_mode not in SHUFFLE_MODES:
            raise ValueError(f"shuffle_mode must be one of {SHUFFLE_MODES}, got {shuffle_mode!r}")
        self.d, self.heads, self.shuffle_mode = d, heads, shuffle_mode
        self.groups = heads if groups is None else groups
        if (d // heads) % self.groups:
            raise ValueError(f"head width {d // heads} not divisible into {self.groups} segments")
        self.scale = 1.0 / np.sqrt(d) if scale is None else scale
        self.query = Linear(d, d, rng, bias=False)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng, bias=False)
        if shuffle_mode == "off":
            self.output = Linear(d, d, rng)
        else:
            self.bundle_outputs = [Linear(d // heads, d // heads, rng) for _ in range(heads)]
        self.rng = rng
        self.last_weights: Tensor | None = None

    def shuffle_spec(self) -> ShuffleSpec:
        if self.shuffle_mode == "random" and self.training:
            return ShuffleSpec.random(self.heads, self.groups, self.rng)
        return ShuffleSpec.transpose(self.heads, self.groups)

    def head_outputs(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Concatenated per-head contexts, (..., Tq, d), head-major."""
        K, dk = self.heads, self.d // self.heads
        lead = x_q.shape[:-2]

        def split_heads(t: Tensor) -> Tensor:
            n = t.shape[-2]
            return T.transpose(T.reshape(t, lead + (n, K, dk)), _swap_last3(len(lead)))

        q = split_heads(self.query(x_q))
        k = split_heads(self.key(x_kv))
        v = split_heads(self.value(x_kv))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape[-2:] != (x_q.shape[-2], x_kv.shape[-2]):
                raise ShapeError(f"mask shape {mask.shape} does not match ({x_q.shape[-2]}, {x_kv.shape[-2]})")
            mask = np.expand_dims(mask, -3)
        ctx, weights = attention(q, k, v, mask, self.scale)
        self.last_weights = weights
        ctx = T.transpose(ctx, _swap_last3(len(lead)))
        return T.reshape(ctx, lead + (x_q.shape[-2], self.d))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        heads = self.head_outputs(x_q, x_kv, mask)
        if self.shuffle_mode == "off":
            return self.output(heads)
        bundles = head_shuffle(heads, self.shuffle_spec())
        outs = [lin(bundles[..., k, :]) for k, lin in enumerate(self.bundle_outputs)]
        return T.concat(outs, axis=-1)


def _swap_last3(n_lead: int) -> tuple[int, ...]:
    """Axes permutation (…, T, K, dk) <-> (…, K, T, dk)."""
    base = tuple(range(n_lead))
    return base + (n_lead + 1, n_lead, n_lead + 2)


class AttentionBlock(Module):
    """FFN(Attention(W_Q x_q, W_K x_kv, W_V x_kv)), optionally with residual + LayerNorm."""

    def __init__(
        self,
        d: int,
        d_ff: int,
        heads: int,
        rng: np.random.Generator,
        shuffle_mode: str = "off",
        groups: int | None = None,
        residual: bool = True,
        dropout: float = 0.0,
    ):
        self.attn = MultiHeadAttention(d, heads, rng, shuffle_mode, groups)
        self.ffn = FeedForward(d, d_ff, rng)
        self.residual = residual
        if residual:
            self.norm_attn = LayerNorm(d)
            self.norm_ffn = LayerNorm(d)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        a = T.dropout(self.attn(x_q, x_kv, mask), self.dropout, self.rng, self.training)
        if self.residual:
            a = self.norm_attn(x_q + a)
        f = T.dropout(self.ffn(a), self.dropout, self.rng, self.training)
        if self.residual:
            f = self.norm_ffn(a + f)
        return f
