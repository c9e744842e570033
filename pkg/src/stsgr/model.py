"""Semantics-controlled encoder-decoder with generation and retrieval heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data.dataset import DialogExample
from .data.text import EOS_ID, PAD_ID, SOS_ID
from .graph import GraphBatch, IntraFrameReasoner, LabelVocabulary
from .nn import LSTM, Embedding, Linear, Module
from .temporal import MemoryProjection, WindowAttention, audio_augment
from .tensor import Tensor
from .transformer import AttentionBlock, causal_mask, positional_encode


def _pad(seqs: Sequence[Sequence[int]], min_len: int = 1, fill: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max([len(s) for s in seqs] + [min_len])
    ids = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, np.array([len(s) for s in seqs], dtype=np.int64)


def _positions(parts: Sequence[Sequence[int]]) -> list[int]:
    """Positions restart at 0 for each concatenated source."""
    return [p for part in parts for p in range(len(part))]


@dataclass
class Batch:
    """Model-ready arrays for a list of examples (token ids already mapped)."""

    graphs: GraphBatch
    frame_counts: list[int]
    audio: np.ndarray | None
    caption: np.ndarray
    caption_len: np.ndarray
    history: np.ndarray
    history_len: np.ndarray
    context: np.ndarray
    context_pos: np.ndarray
    context_len: np.ndarray
    question: np.ndarray
    question_len: np.ndarray
    answer_in: np.ndarray
    answer_out: np.ndarray
    answer_len: np.ndarray
    candidates: np.ndarray | None = None
    candidate_len: np.ndarray | None = None
    gt_index: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.caption.shape[0]

    @classmethod
    def from_examples(
        cls,
        examples: Sequence[DialogExample],
        encode: Callable[[Sequence[str]], list[int]],
        history_turns: int = 3,
        use_union: bool = True,
        use_audio: bool = False,
    ) -> Batch:
        graphs = []
        counts = []
        for ex in examples:
            gs = ex.scene_graphs if use_union else [g.without_union_nodes() for g in ex.scene_graphs]
            graphs.extend(gs)
            counts.append(len(gs))
        audio = None
        if use_audio:
            missing = [ex.video_id for ex in examples if ex.audio is None]
            if missing:
                raise ValueError(f"audio requested but missing for videos {missing[:3]}")
            audio = np.concatenate([np.asarray(ex.audio, dtype=np.float64) for ex in examples], axis=0)
        captions = [encode(ex.caption) for ex in examples]
        histories = []
        for ex in examples:
            turns = ex.history[len(ex.history) - history_turns:] if history_turns else []
            histories.append([t for q, a in turns for t in encode(q) + encode(a)])
        contexts, ctx_pos = [], []
        for c, h in zip(captions, histories):
            parts = [c, h] if (c or h) else [[EOS_ID]]
            contexts.append([t for p in parts for t in p])
            ctx_pos.append(_positions(parts))
        answers = [encode(ex.answer) for ex in examples]
        ans_in, ans_len = _pad([[SOS_ID] + a for a in answers])
        ans_out, _ = _pad([a + [EOS_ID] for a in answers])
        cap, cap_len = _pad(captions)
        hist, hist_len = _pad(histories)
        ctx, ctx_len = _pad(contexts)
        pos, _ = _pad(ctx_pos, fill=0)
        q, q_len = _pad([encode(ex.question) or [EOS_ID] for ex in examples])
        cand = cand_len = gt = None
        if all(ex.candidates is not None for ex in examples):
            n_c = {len(ex.candidates) for ex in examples}
            if len(n_c) != 1:
                raise ValueError("examples in one batch must share a candidate count")
            flat = [encode(c) or [EOS_ID] for ex in examples for c in ex.candidates]
            cand, cand_len = _pad(flat)
            gt = np.array([ex.gt_index for ex in examples], dtype=np.int64)
        return cls(
            graphs=GraphBatch.from_graphs(graphs), frame_counts=counts, audio=audio,
            caption=cap, caption_len=cap_len, history=hist, history_len=hist_len,
            context=ctx, context_pos=pos, context_len=ctx_len,
            question=q, question_len=q_len, answer_in=ans_in, answer_out=ans_out, answer_len=ans_len,
            candidates=cand, candidate_len=cand_len, gt_index=gt,
        )


def _length_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


@dataclass
class Sources:
    """Embedded modality sequences with key masks (True = real token)."""

    e_v: Tensor
    m_v: np.ndarray
    e_ch: Tensor
    m_ch: np.ndarray
    e_q: Tensor
    m_q: np.ndarray
    e_c: Tensor
    m_c: np.ndarray
    e_h: Tensor
    m_h: np.ndarray

    def repeat(self, index: np.ndarray) -> Sources:
        """Select / repeat batch rows (used to expand sources over beams)."""
        kw = {}
        for name, value in vars(self).items():
            kw[name] = T.take(value, index) if isinstance(value, Tensor) else value[index]
        return Sources(**kw)


@dataclass
class EncoderState:
    h_a: Tensor
    h_v: Tensor
    h_ch: Tensor
    h_q: Tensor

    @property
    def fused(self) -> Tensor:
        return fuse(self)


def fuse(state: EncoderState) -> Tensor:
    """Concatenate the four encodings in the order a, v, c+h, q along features."""
    parts = [state.h_a, state.h_v, state.h_ch, state.h_q]
    rows = {p.shape[:-1] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"encodings disagree on leading shape: {sorted(rows)}")
    return T.concat(parts, axis=-1)


def smoothed_ce_loss(probs: Tensor, targets: np.ndarray, epsilon: float, mask: np.ndarray | None = None) -> Tensor:
    """-(1/N) sum_j sum_u G~_j(u) log P_j(u) with G~ = (1-eps) onehot + eps/|V|.

    ``probs`` is (..., V); positions where ``mask`` is False are excluded from N.
    Probabilities are clamped at 1e-12 before the log.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    V = probs.shape[-1]
    flat = T.reshape(probs, (-1, V))
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    keep = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise ValueError("no target positions")
    logp = T.log(T.take(flat, rows), floor=1e-12)
    picked = logp[np.arange(rows.size), tgt[rows]]
    total = T.sum_(picked) * (1.0 - epsilon)
    if epsilon > 0.0:
        total = total + T.sum_(logp) * (epsilon / V)
    return total * (-1.0 / rows.size)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of (B, T, d) restricted to ``mask``; all-masked rows give 0."""
    m = np.asarray(mask, dtype=np.float64)
    count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return T.sum_(x * (m / count)[:, :, None], axis=1)


def retrieval_rank(scores: np.ndarray, gt: int) -> int:
    """1 + number of candidates scoring strictly above the ground truth."""
    scores = np.asarray(scores)
    if not 0 <= gt < scores.size:
        raise IndexError(f"gt index {gt} out of range for {scores.size} candidates")
    return 1 + int((scores > scores[gt]).sum())


class STSGR(Module):
    """Scene graphs -> frame memories -> sequential co-attention -> heads."""

    def __init__(self, config: ModelConfig, vocab_size: int, label_vocab: LabelVocabulary | None, visual_dim: int):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.rng = rng
        d = c.d_h
        self.graph = IntraFrameReasoner(
            visual_dim, c.label_dim if c.use_labels else 0, d, c.heads, rng,
            label_vocab=label_vocab if c.use_labels else None,
            gat_layers=c.gat_layers, edgeconv_layers=c.edgeconv_layers,
            use_gat=c.use_gat, use_edgeconv=c.use_edgeconv, slope=c.leaky_slope,
        )
        self.window = WindowAttention(2 * d, c.tau, rng)
        self.project = MemoryProjection(2 * d + (c.audio_dim if c.use_audio else 0), d, rng)
        self.embed = Embedding(vocab_size, d, rng)

        def block():
            return AttentionBlock(d, c.d_ff, c.heads, rng, c.shuffle_mode, c.groups, c.residual, c.dropout)

        self.enc_answer = block()
        self.enc_visual = block()
        self.enc_context = block()
        self.enc_question = block()
        if c.task in ("generate", "both"):
            self.head = Linear(4 * d, vocab_size, rng)
            self.head.weight.data[:] = 0.0
        if c.task in ("retrieve", "both"):
            self.candidate_encoder = LSTM(d, 4 * d, rng)
        self.vocab_size = vocab_size
        self.visual_dim = visual_dim

    # -- embeddings --------------------------------------------------------
    def embed_tokens(self, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        d = self.config.d_h
        if positions is None:
            positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        pe = positional_encode(int(positions.max()) + 1, d)[positions]
        return self.embed(ids) * np.sqrt(d) + pe

    def visual_memories(self, batch: Batch) -> Tensor:
        """Projected per-frame memories, flat over all frames of the batch."""
        mem = self.graph(batch.graphs)
        mem = self.window(mem, batch.frame_counts)
        if self.config.use_audio:
            mem = audio_augment(mem, batch.audio)
        return self.project(mem)

    def sources(self, batch: Batch) -> Sources:
        flat = self.visual_memories(batch)
        counts = np.asarray(batch.frame_counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        width = int(counts.max())
        m_v = _length_mask(counts, width)
        idx = starts[:, None] + np.minimum(np.arange(width)[None, :], counts[:, None] - 1)
        e_v = T.take(flat, idx)
        return Sources(
            e_v=e_v, m_v=m_v,
            e_ch=self.embed_tokens(batch.context, batch.context_pos), m_ch=_length_mask(batch.context_len, batch.context.shape[1]),
            e_q=self.embed_tokens(batch.question), m_q=_length_mask(batch.question_len, batch.question.shape[1]),
            e_c=self.embed_tokens(batch.caption), m_c=_length_mask(batch.caption_len, batch.caption.shape[1]),
            e_h=self.embed_tokens(batch.history), m_h=_length_mask(batch.history_len, batch.history.shape[1]),
        )

    # -- encoder -----------------------------------------------------------
    def encode_answer_prefix(self, answer_in: np.ndarray, answer_len: np.ndarray | None = None) -> Tensor:
        if answer_in.shape[1] < 1:
            raise ValueError("answer prefix must contain at least the start token")
        n = answer_in.shape[1]
        mask = np.broadcast_to(causal_mask(n), (answer_in.shape[0], n, n))
        if answer_len is not None:
            mask = mask & _length_mask(answer_len, n)[:, None, :]
        return self.enc_answer(self.embed_tokens(answer_in), self.embed_tokens(answer_in), mask)

    def coattend(self, stage: AttentionBlock, h_prev: Tensor, e: Tensor, key_mask: np.ndarray) -> Tensor:
        if e.shape[1] == 0 or not key_mask.any(axis=1).all():
            raise ValueError("co-attention source is empty")
        mask = np.broadcast_to(key_mask[:, None, :], (h_prev.shape[0], h_prev.shape[1], e.shape[1]))
        return stage(h_prev, e, mask)

    def encode(self, src: Sources, answer_in: np.ndarray, answer_len: np.ndarray | None = None) -> EncoderState:
        h_a = self.encode_answer_prefix(answer_in, answer_len)
        h_v = self.coattend(self.enc_visual, h_a, src.e_v, src.m_v)
        h_ch = self.coattend(self.enc_context, h_v, src.e_ch, src.m_ch)
        h_q = self.coattend(self.enc_question, h_ch, src.e_q, src.m_q)
        return EncoderState(h_a, h_v, h_ch, h_q)

    # -- generation --------------------------------------------------------
    def next_token_dist(self, fused: Tensor) -> Tensor:
        return T.softmax(self.head(fused), axis=-1)

    def generation_forward(self, batch: Batch) -> Tensor:
        """Teacher-forced next-token distributions, (B, T_a, |V|)."""
        src = self.sources(batch)
        state = self.encode(src, batch.answer_in, batch.answer_len)
        return self.next_token_dist(state.fused)

    def generation_loss(self, batch: Batch, epsilon: float | None = None):
        probs = self.generation_forward(batch)
        mask = _length_mask(batch.answer_len, batch.answer_out.shape[1])
        eps = self.config.label_smoothing if epsilon is None else epsilon
        return smoothed_ce_loss(probs, batch.answer_out, eps, mask), probs, mask

    def step_log_probs(self, src: Sources, prefixes: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token after each prefix (rows of ``prefixes``)."""
        state = self.encode(src, prefixes)
        probs = self.next_token_dist(state.fused[:, -1:, :])
        return np.log(np.maximum(probs.data[:, 0, :], 1e-300))

    def generate(self, batch: Batch, beam_width: int | None = None, max_len: int | None = None) -> list[list[tuple[list[int], float]]]:
        """Beam-search answers for every example in ``batch``."""
        b = beam_width or self.config.beam_width
        max_len = max_len or self.config.max_answer_len
        out = []
        with T.no_grad():
            src_all = self.sources(batch)
            for i in range(batch.size):
                def step(prefixes: list[list[int]], i=i) -> np.ndarray:
                    src = src_all.repeat(np.full(len(prefixes), i))
                    return self.step_log_probs(src, np.asarray(prefixes, dtype=np.int64))

                out.append(beam_search(step, b, max_len))
        return out

    # -- retrieval ---------------------------------------------------------
    def retrieval_context(self, src: Sources) -> Tensor:
        if self.config.retrieval_context == "coattn":
            sos = np.full((src.e_q.shape[0], 1), SOS_ID, dtype=np.int64)
            fused = self.encode(src, sos).fused
            return T.reshape(fused, (fused.shape[0], fused.shape[2]))
        return T.concat(
            [masked_mean(src.e_h, src.m_h), masked_mean(src.e_c, src.m_c),
             masked_mean(src.e_q, src.m_q), masked_mean(src.e_v, src.m_v)],
            axis=1,
        )

    def retrieval_scores(self, batch: Batch) -> Tensor:
        if batch.candidates is None:
            raise ValueError("batch has no candidates")
        B = batch.size
        C = batch.candidates.shape[0] // B
        if C < 2:
            raise ValueError("retrieval needs at least two candidates")
        ctx = self.retrieval_context(self.sources(batch))
        emb = self.candidate_encoder(self.embed(batch.candidates), batch.candidate_len)
        emb = T.reshape(emb, (B, C, emb.shape[-1]))
        return T.sum_(emb * T.reshape(ctx, (B, 1, ctx.shape[-1])), axis=-1)

    def retrieval_loss(self, batch: Batch):
        scores = self.retrieval_scores(batch)
        target = np.zeros(scores.shape)
        target[np.arange(batch.size), batch.gt_index] = 1.0
        return T.bce_with_logits(scores, target), scores


def beam_search(step: Callable[[list[list[int]]], np.ndarray], beam_width: int, max_len: int,
                sos: int = SOS_ID, eos: int = EOS_ID) -> list[tuple[list[int], float]]:
    """Length-normalized beam search.

    ``step`` maps prefixes (each starting with ``sos``) to next-token
    log-probabilities. Each step ranks all one-token extensions by cumulative
    log-probability; extensions ending in ``eos`` among the top ``beam_width``
    finish, and the best ``beam_width`` unfinished ones stay alive. At
    ``max_len`` only ``eos`` may follow. Returns up to ``beam_width`` finished
    sequences (without sos/eos) with their mean per-token log-probability,
    best first.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be positive")
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for t in range(max_len):
        logp = np.asarray(step([[sos] + seq for seq, _ in alive]))
        if t == max_len - 1:
            forced = np.full_like(logp, -np.inf)
            forced[:, eos] = logp[:, eos]
            logp = forced
        total = np.array([s for _, s in alive])[:, None] + logp
        flat = total.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: 2 * beam_width]
        V = logp.shape[1]
        new_alive = []
        for rank, k in enumerate(order):
            if not np.isfinite(flat[k]):
                break
            beam, tok = divmod(int(k), V)
            seq = alive[beam][0] + [tok]
            if tok == eos:
                if rank < beam_width:
                    finished.append((seq, float(flat[k])))
            elif len(new_alive) < beam_width:
                new_alive.append((seq, float(flat[k])))
        alive = new_alive
        if len(finished) >= beam_width or not alive:
            break
    ranked = sorted(((seq[:-1], score / len(seq)) for seq, score in finished), key=lambda x: -x[1])
    return ranked[:beam_width]


def greedy_decode(step: Callable[[list[list[int]]], np.ndarray], max_len: int,
                  sos: int = SOS_ID, eos: int = EOS_ID) -> list[int]:
    seq: list[int] = []
    for t in range(max_len):
        logp = np.asarray(step([[sos] + seq]))[0]
        tok = eos if t == max_len - 1 else int(np.argmax(logp))
        if tok == eos:
            break
        seq.append(tok)
    return seq
