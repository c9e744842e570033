"""Optimization, training loop, evaluation, checkpoints and the ablation runner."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import ModelConfig
from .data.dataset import Dataset
from .data.text import Vocabulary, detokenize
from .graph import LabelVocabulary
from .metrics import bleu4, mean_rank
from .model import STSGR, Batch, retrieval_rank, smoothed_ce_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def noam_lr(step: int, d_h: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d_h^-0.5 * min(step^-0.5, step * warmup^-1.5), for step >= 1."""
    step = max(step, 1)
    return scale * d_h ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    d_h: int = 64
    warmup: int = 400
    scale: float = 1.0

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> OptimizerState:
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            **kw,
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> float:
    """One bias-corrected Adam update in place; returns the learning rate used."""
    state.step += 1
    t = state.step
    lr = noam_lr(t, state.d_h, state.warmup, state.scale)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name} at step {t}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


@dataclass
class MetricsReport:
    history: list[dict] = field(default_factory=list)
    loss: float = float("nan")
    token_accuracy: float = float("nan")
    perplexity: float = float("nan")
    bleu4: float | None = None
    mean_rank: float | None = None
    steps: int = 0
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trained:
    model: STSGR
    vocab: Vocabulary
    label_names: list[str]
    report: MetricsReport
    best_state: dict[str, np.ndarray]


def build_model(config: ModelConfig, vocab: Vocabulary, label_names: Sequence[str], visual_dim: int) -> STSGR:
    label_vocab = LabelVocabulary(label_names) if label_names else None
    return STSGR(config, len(vocab), label_vocab, visual_dim)


def make_batch(examples, vocab: Vocabulary, config: ModelConfig) -> Batch:
    return Batch.from_examples(
        examples, vocab.encode, history_turns=config.history_turns,
        use_union=config.use_union, use_audio=config.use_audio,
    )


def _batches(dataset: Dataset, size: int) -> list[list]:
    return [dataset.examples[i:i + size] for i in range(0, len(dataset), size)]


def batch_loss(model: STSGR, batch: Batch) -> tuple[Tensor, dict]:
    task = model.config.task
    parts = {}
    total = None
    if task in ("generate", "both"):
        loss, probs, mask = model.generation_loss(batch)
        parts["gen_loss"] = loss.item()
        total = loss
    if task in ("retrieve", "both"):
        rloss, _ = model.retrieval_loss(batch)
        parts["ret_loss"] = rloss.item()
        total = rloss if total is None else total + rloss
    return total, parts


def teacher_forced_metrics(model: STSGR, dataset: Dataset, vocab: Vocabulary, batch_size: int = 64) -> dict:
    """Smoothed loss, token accuracy and perplexity over all answer positions."""
    was_training = model.training
    model.eval()
    loss_sum = nll_sum = 0.0
    correct = count = 0
    try:
        with T.no_grad():
            for chunk in _batches(dataset, batch_size):
                batch = make_batch(chunk, vocab, model.config)
                loss, probs, mask = model.generation_loss(batch)
                n = int(mask.sum())
                loss_sum += loss.item() * n
                nll_sum += smoothed_ce_loss(probs, batch.answer_out, 0.0, mask).item() * n
                pred = probs.data.argmax(axis=-1)
                correct += int(((pred == batch.answer_out) & mask).sum())
                count += n
    finally:
        model.train(was_training)
    return {
        "loss": loss_sum / count,
        "token_accuracy": correct / count,
        "perplexity": math.exp(nll_sum / count),
    }


def retrieval_ranks(model: STSGR, dataset: Dataset, vocab: Vocabulary, batch_size: int = 32,
                    scorer: Callable[[Batch], np.ndarray] | None = None) -> list[int]:
    if any(ex.candidates is None for ex in dataset):
        raise ValueError("retrieval evaluation needs candidates on every example")
    was_training = model.training
    model.eval()
    ranks = []
    try:
        with T.no_grad():
            for chunk in _batches(dataset, batch_size):
                batch = make_batch(chunk, vocab, model.config)
                scores = scorer(batch) if scorer is not None else model.retrieval_scores(batch).data
                ranks.extend(retrieval_rank(s, int(g)) for s, g in zip(scores, batch.gt_index))
    finally:
        model.train(was_training)
    return ranks


def retrieval_loss_metric(model: STSGR, dataset: Dataset, vocab: Vocabulary, batch_size: int = 32) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with T.no_grad():
            for chunk in _batches(dataset, batch_size):
                loss, _ = model.retrieval_loss(make_batch(chunk, vocab, model.config))
                total += loss.item() * len(chunk)
    finally:
        model.train(was_training)
    return total / len(dataset)


def generate_answers(model: STSGR, dataset: Dataset, vocab: Vocabulary, beam_width: int | None = None,
                     batch_size: int = 32) -> list[list[tuple[list[str], float]]]:
    was_training = model.training
    model.eval()
    out = []
    try:
        for chunk in _batches(dataset, batch_size):
            batch = make_batch(chunk, vocab, model.config)
            for beams in model.generate(batch, beam_width):
                out.append([(vocab.decode(seq), score) for seq, score in beams])
    finally:
        model.train(was_training)
    return out


def evaluate_generation(model: STSGR, dataset: Dataset, vocab: Vocabulary, beam_width: int | None = None) -> MetricsReport:
    start = time.perf_counter()
    tf = teacher_forced_metrics(model, dataset, vocab)
    beams = generate_answers(model, dataset, vocab, beam_width)
    hyps = [b[0][0] if b else [] for b in beams]
    refs = [[ex.answer] for ex in dataset]
    return MetricsReport(
        loss=tf["loss"], token_accuracy=tf["token_accuracy"], perplexity=tf["perplexity"],
        bleu4=bleu4(hyps, refs), wall_clock=time.perf_counter() - start, config=model.config.to_dict(),
    )


def evaluate_retrieval(model: STSGR, dataset: Dataset, vocab: Vocabulary) -> MetricsReport:
    start = time.perf_counter()
    ranks = retrieval_ranks(model, dataset, vocab)
    return MetricsReport(
        loss=retrieval_loss_metric(model, dataset, vocab), mean_rank=mean_rank(ranks),
        wall_clock=time.perf_counter() - start, config=model.config.to_dict(),
    )


def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    if val_fraction <= 0.0:
        return dataset, None
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset))))
    return dataset.subset(sorted(order[n_val:])), dataset.subset(sorted(order[:n_val]))


TRAIN_PROBE = 512


def _snapshot_metrics(model, train_set, val_set, vocab) -> dict:
    """Periodic metrics; training-set figures use at most the first TRAIN_PROBE examples."""
    train_set = train_set[:TRAIN_PROBE]
    out = {}
    if model.config.task in ("generate", "both"):
        tf = teacher_forced_metrics(model, train_set, vocab)
        out.update({"train_loss": tf["loss"], "token_accuracy": tf["token_accuracy"], "perplexity": tf["perplexity"]})
        if val_set is not None:
            vt = teacher_forced_metrics(model, val_set, vocab)
            out.update({"val_loss": vt["loss"], "val_token_accuracy": vt["token_accuracy"]})
    if model.config.task in ("retrieve", "both"):
        out["train_ret_loss"] = retrieval_loss_metric(model, train_set, vocab)
        if val_set is not None:
            out["val_ret_loss"] = retrieval_loss_metric(model, val_set, vocab)
    return out


def _selection_loss(snap: dict) -> float:
    keys = ("val_loss", "val_ret_loss") if any(k.startswith("val") for k in snap) else ("train_loss", "train_ret_loss")
    return sum(snap[k] for k in keys if k in snap)


def train(
    config: ModelConfig,
    dataset: Dataset,
    epochs: int | None = None,
    val_set: Dataset | None = None,
    vocab: Vocabulary | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> Trained:
    """Seeded, deterministic training; keeps the parameters with the best selection loss."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.task in ("retrieve", "both") and any(ex.candidates is None for ex in dataset):
        raise ValueError(f"task {config.task!r} needs candidates on every training example")
    start = time.perf_counter()
    if val_set is None and config.val_fraction > 0:
        dataset, val_set = split_dataset(dataset, config.val_fraction, config.seed)
    if vocab is None:
        vocab = Vocabulary.build(dataset.sentences(), config.min_count)
    visual_dim = dataset[0].scene_graphs[0].node_features.shape[1]
    model = build_model(config, vocab, dataset.label_names, visual_dim)
    params = dict(model.named_parameters())
    state = OptimizerState.for_params(
        params, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        d_h=config.d_h, warmup=config.warmup, scale=config.lr_scale,
    )
    epochs = config.epochs if epochs is None else epochs
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.max_steps if config.max_steps else epochs * per_epoch
    if epochs == 0:
        total_steps = 0
    eval_every = config.eval_every or per_epoch
    shuffle_rng = np.random.default_rng(config.seed + 1)

    report = MetricsReport(config=config.to_dict())
    snap = _snapshot_metrics(model, dataset, val_set, vocab)
    report.history.append({"step": 0, **snap})
    best = (_selection_loss(snap), model.state_dict())

    step = 0
    order: list[int] = []
    model.train()
    while step < total_steps:
        if not order:
            order = list(shuffle_rng.permutation(len(dataset)))
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = make_batch([dataset[i] for i in idx], vocab, config)
        loss, parts = batch_loss(model, batch)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"loss diverged (value {loss.item()}) at step {step + 1}")
        model.zero_grad()
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state)
        step += 1
        if step % eval_every == 0 or step == total_steps:
            snap = {"step": step, "batch_loss": loss.item(), **_snapshot_metrics(model, dataset, val_set, vocab)}
            report.history.append(snap)
            if callback is not None:
                callback(step, snap)
            log.info("step %d %s", step, {k: round(v, 4) for k, v in snap.items()})
            sel = _selection_loss(snap)
            if sel <= best[0]:
                best = (sel, model.state_dict())
            if config.target_accuracy and snap.get("token_accuracy", 0.0) > config.target_accuracy:
                break

    last = report.history[-1]
    report.steps = step
    report.loss = last.get("train_loss", last.get("train_ret_loss", float("nan")))
    report.token_accuracy = last.get("token_accuracy", float("nan"))
    report.perplexity = last.get("perplexity", float("nan"))
    report.wall_clock = time.perf_counter() - start
    return Trained(model, vocab, list(dataset.label_names), report, best[1])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_model(path: str | Path, model: STSGR, vocab: Vocabulary, label_names: Sequence[str],
               state: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``<path>`` (binary parameters) and ``<path minus suffix>.json`` (config + vocabularies)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, state if state is not None else model.state_dict())
    meta = {
        "format": "stsgr-v1",
        "config": model.config.to_dict(),
        "vocab": vocab.to_dict(),
        "label_names": list(label_names),
        "visual_dim": model.visual_dim,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_model(path: str | Path) -> tuple[STSGR, Vocabulary, list[str]]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    config = ModelConfig(**meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    model = build_model(config, vocab, meta["label_names"], meta["visual_dim"])
    model.load_state_dict(checkpoint.load(path))
    model.eval()
    return model, vocab, meta["label_names"]


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATIONS: list[tuple[str, dict]] = [
    ("STSGR full model", {}),
    ("STSGR w/o shuffle", {"shuffle_mode": "off"}),
    ("STSGR w/o GAT", {"use_gat": False}),
    ("STSGR w/o EdgeConv", {"use_edgeconv": False}),
    ("STSGR w/o union box features", {"use_union": False}),
    ("STSGR w/o temporal", {"tau": 1}),
    ("STSGR + audio", {"use_audio": True}),
]


def run_ablation(config: ModelConfig, dataset: Dataset, seeds: Sequence[int] | None = None,
                 with_bleu: bool = False) -> list[dict]:
    """Train one model per ablation switch and seed; one row per (ablation, seed)."""
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        base = config.replace(seed=seed)
        train_set, val_set = split_dataset(dataset, base.val_fraction or 0.2, seed)
        vocab = Vocabulary.build(train_set.sentences(), base.min_count)
        for name, switch in ABLATIONS:
            cfg = base.replace(**switch)
            trained = train(cfg, train_set, val_set=val_set, vocab=vocab)
            trained.model.load_state_dict(trained.best_state)
            row = {"method": name, "seed": seed, "switch": switch}
            if cfg.task in ("generate", "both"):
                tf = teacher_forced_metrics(trained.model, val_set, vocab)
                row.update({"loss": tf["loss"], "token_accuracy": tf["token_accuracy"], "perplexity": tf["perplexity"]})
                if with_bleu:
                    hyps = [b[0][0] if b else [] for b in generate_answers(trained.model, val_set, vocab)]
                    row["bleu4"] = bleu4(hyps, [[ex.answer] for ex in val_set])
            if cfg.task in ("retrieve", "both"):
                ranks = retrieval_ranks(trained.model, val_set, vocab)
                row["mean_rank"] = mean_rank(ranks)
                row["ret_loss"] = retrieval_loss_metric(trained.model, val_set, vocab)
                if "loss" not in row:
                    row["loss"] = row["ret_loss"]
            row["train_loss"] = trained.report.loss
            row["steps"] = trained.report.steps
            row["config"] = cfg.to_dict()
            rows.append(row)
    return rows


def ablation_summary(rows: Sequence[dict]) -> dict:
    """Per ablation: how often (over seeds) the full model's loss is <= the ablated loss."""
    full = {r["seed"]: r["loss"] for r in rows if r["method"] == ABLATIONS[0][0]}
    out = {}
    for name, _ in ABLATIONS[1:]:
        mine = {r["seed"]: r["loss"] for r in rows if r["method"] == name}
        seeds = sorted(set(full) & set(mine))
        full_mean = float(np.mean([full[s] for s in seeds]))
        abl_mean = float(np.mean([mine[s] for s in seeds]))
        out[name] = {
            "full_loss": full_mean,
            "ablated_loss": abl_mean,
            "full_wins": sum(full[s] <= mine[s] for s in seeds),
            "seeds": len(seeds),
            "full_not_worse": full_mean <= abl_mean,
        }
    return out


def format_table(rows: Sequence[dict]) -> str:
    cols = ["loss", "token_accuracy", "perplexity", "bleu4", "mean_rank"]
    present = [c for c in cols if any(c in r for r in rows)]
    head = f"{'Method':32s} {'seed':>4s} " + " ".join(f"{c:>14s}" for c in present)
    lines = [head, "-" * len(head)]
    for r in rows:
        vals = " ".join(f"{r[c]:14.4f}" if c in r else f"{'':14s}" for c in present)
        lines.append(f"{r['method']:32s} {r['seed']:4d} {vals}")
    return "\n".join(lines)
