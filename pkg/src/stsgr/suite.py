"""Finite-difference gradient suite over every learned module at a small width."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .gradcheck import GradCheckReport, finite_diff_check
from .data.synth import SyntheticTaskSpec, synthesize
from .data.text import Vocabulary
from .graph import EdgeConv, GraphAttention, LabelVocabulary, graph_pool
from .model import STSGR, Batch, smoothed_ce_loss
from .nn import LSTM, FeedForward, Linear, Module
from .temporal import WindowAttention
from .transformer import AttentionBlock, MultiHeadAttention


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport]
    seconds: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.reports.values())

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.reports.values())

    def lines(self) -> list[str]:
        out = []
        for name, r in self.reports.items():
            out.append(f"{'PASS' if r.ok else 'FAIL'} {name:24s} max_rel_err={r.max_error:.3e}")
        return out


def _random_graph(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Random directed edges plus a self-loop on every node."""
    pairs = [(j, i) for i in range(n) for j in range(n) if i != j and rng.random() < 0.4]
    pairs += [(i, i) for i in range(n)]
    e = np.array(pairs)
    return e[:, 0], e[:, 1]


def _projection(rng: np.random.Generator, shape) -> Callable[[T.Tensor], T.Tensor]:
    """Scalar readout sum(out * R) with a fixed random R so no direction cancels."""
    r = rng.normal(size=shape)
    return lambda out: T.sum_(out * r)


def _inputs(rng, *shape) -> T.Tensor:
    return T.parameter(rng.normal(size=shape))


def _check(f, module: Module | None, extra: dict[str, T.Tensor], **kw) -> GradCheckReport:
    params = dict(module.named_parameters()) if module is not None else {}
    params.update(extra)
    return finite_diff_check(f, params, **kw)


def _tiny_dataset(rng: np.random.Generator, n_candidates: int = 3):
    spec = SyntheticTaskSpec(seed=int(rng.integers(1 << 30)), n_frames=3, max_objects=3,
                             visual_dim=6, audio_dim=4, n_candidates=n_candidates)
    ds = synthesize(spec, 2)
    vocab = Vocabulary.build(ds.sentences(), 1)
    return ds, vocab


def gradient_suite(d_h: int = 8, seed: int = 0, tol: float = 1e-4, max_entries: int = 24) -> SuiteResult:
    """Central-difference checks for GAT, EdgeConv, pooling, window aggregation,
    both attention variants, the FFN, the generation and retrieval heads, and the
    full model end to end."""
    if d_h % 2 or d_h < 4:
        raise ValueError("gradient suite needs an even d_h >= 4")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    kw = dict(tol=tol, max_entries=max_entries, seed=seed)
    reports: dict[str, GradCheckReport] = {}
    heads = 2

    n = 5
    src, dst = _random_graph(rng, n)
    x = _inputs(rng, n, d_h + 2)
    gat = GraphAttention(d_h + 2, d_h, heads, rng)
    read = _projection(rng, (n, d_h))
    reports["graph attention"] = _check(lambda: read(gat(x, src, dst)), gat, {"input": x}, **kw)

    x = _inputs(rng, n, d_h)
    ec = EdgeConv(d_h, rng)
    reports["edge convolution"] = _check(lambda: read(ec(x, src, dst)), ec, {"input": x}, **kw)

    gi = np.array([0, 0, 1, 1, 1])
    read_pool = _projection(rng, (2, 2 * d_h))
    reports["graph pooling"] = _check(lambda: read_pool(graph_pool(x, gi, 2)), None, {"input": x}, **kw)

    lengths = [4, 2]
    mem = _inputs(rng, 6, 2 * d_h)
    win = WindowAttention(2 * d_h, 3, rng)
    read_mem = _projection(rng, (6, 2 * d_h))
    reports["window aggregation"] = _check(lambda: read_mem(win(mem, lengths)), win, {"input": mem}, **kw)

    xq, xkv = _inputs(rng, 2, 3, d_h), _inputs(rng, 2, 4, d_h)
    mask = rng.random((2, 3, 4)) < 0.7
    mask[..., 0] = True
    read_att = _projection(rng, (2, 3, d_h))
    for name, mode in (("vanilla attention", "off"), ("shuffled attention", "deterministic")):
        mha = MultiHeadAttention(d_h, heads, rng, mode, groups=2)
        reports[name] = _check(lambda m=mha: read_att(m(xq, xkv, mask)), mha,
                               {"query input": xq, "key input": xkv}, **kw)

    ffn = FeedForward(d_h, 4 * d_h, rng)
    reports["feed-forward"] = _check(lambda: read_att(ffn(xq)), ffn, {"input": xq}, **kw)

    block = AttentionBlock(d_h, 4 * d_h, heads, rng, "deterministic", 2, residual=True)
    reports["attention block"] = _check(lambda: read_att(block(xq, xkv, mask)), block, {"query input": xq}, **kw)

    vocab_size = 7
    fused = _inputs(rng, 2, 3, 4 * d_h)
    head = Linear(4 * d_h, vocab_size, rng)
    targets = rng.integers(vocab_size, size=(2, 3))
    tmask = np.array([[True, True, True], [True, True, False]])
    reports["generation head"] = _check(
        lambda: smoothed_ce_loss(T.softmax(head(fused), axis=-1), targets, 0.1, tmask),
        head, {"fused input": fused}, **kw,
    )

    lstm = LSTM(d_h, 4 * d_h, rng)
    cands = _inputs(rng, 6, 4, d_h)
    cand_len = np.array([4, 2, 3, 1, 4, 2])
    ctx = _inputs(rng, 2, 4 * d_h)
    rel = np.zeros((2, 3))
    rel[0, 1] = rel[1, 2] = 1.0

    def retrieval():
        emb = T.reshape(lstm(cands, cand_len), (2, 3, 4 * d_h))
        scores = T.sum_(emb * T.reshape(ctx, (2, 1, 4 * d_h)), axis=-1)
        return T.bce_with_logits(scores, rel)

    reports["retrieval head"] = _check(retrieval, lstm, {"candidates": cands, "context": ctx}, **kw)

    ds, vocab = _tiny_dataset(rng)
    for task in ("generate", "retrieve"):
        cfg = ModelConfig(task=task, d_h=d_h, d_ff=2 * d_h, heads=heads, label_dim=4, audio_dim=4,
                          use_audio=True, seed=seed, min_count=1)
        model = STSGR(cfg, len(vocab), LabelVocabulary(ds.label_names), 6)
        if task == "generate":
            model.head.weight.data[:] = rng.normal(scale=0.3, size=model.head.weight.shape)
        batch = Batch.from_examples(ds.examples, vocab.encode, use_audio=True)
        loss = (lambda m=model, b=batch: m.generation_loss(b)[0]) if task == "generate" else \
            (lambda m=model, b=batch: m.retrieval_loss(b)[0])
        reports[f"end-to-end {task}"] = _check(loss, model, {}, **kw)

    return SuiteResult(reports, time.perf_counter() - start)
