"""Command-line entry point: train, eval, synth, ablate, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ModelConfig
from .data.dataset import DatasetError, load_dataset, write_dataset
from .data.synth import SyntheticTaskSpec, synthesize
from .data.text import detokenize
from .graph import GraphError
from .metrics import bleu4, mean_rank
from .temporal import AlignmentError
from .train import (
    ablation_summary, format_table, generate_answers, load_model,
    retrieval_ranks, run_ablation, save_model, teacher_forced_metrics, train,
)

VALIDATION_ERRORS = (ConfigError, DatasetError, GraphError, AlignmentError, FileNotFoundError)


class UsageError(ValueError):
    pass


def _config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    if cfg.task in ("retrieve", "both") and any(ex.candidates is None for ex in data):
        raise UsageError(f"task {cfg.task!r} needs a dataset with candidates")
    out = Path(args.out)
    result = train(cfg, data)
    save_model(out / "model.stsgr", result.model, result.vocab, result.label_names, result.best_state)
    (out / "metrics.json").write_text(json.dumps(result.report.to_dict(), indent=2))
    last = result.report.history[-1]
    print(json.dumps({"steps": result.report.steps, "wall_clock": round(result.report.wall_clock, 2), **last}))
    return 0


def _candidate_record(ex, scores: np.ndarray) -> list[dict]:
    order = np.argsort(-scores, kind="stable")
    return [{"text": detokenize(ex.candidates[i]), "score": float(scores[i])} for i in order]


def cmd_eval(args) -> int:
    model, vocab, _ = load_model(args.checkpoint)
    data = load_dataset(args.data)
    if args.task == "generate" and model.config.task == "retrieve":
        raise UsageError("checkpoint was trained for retrieval only")
    if args.task == "retrieve" and model.config.task == "generate":
        raise UsageError("checkpoint was trained for generation only")
    sink = open(args.predictions, "w") if args.predictions else sys.stdout
    try:
        if args.task == "generate":
            beams = generate_answers(model, data, vocab, args.beam)
            for ex, top in zip(data, beams):
                rec = {"dialog_id": ex.dialog_id, "turn": ex.turn, "question": detokenize(ex.question),
                       "top_answers": [{"text": detokenize(t), "score": s} for t, s in top]}
                sink.write(json.dumps(rec) + "\n")
            tf = teacher_forced_metrics(model, data, vocab)
            bleu = bleu4([top[0][0] if top else [] for top in beams], [[ex.answer] for ex in data])
            metrics = {"task": "generate", **tf, "bleu4": bleu}
        else:
            captured: list[np.ndarray] = []

            def scorer(batch):
                s = model.retrieval_scores(batch).data
                captured.extend(s)
                return s

            ranks = retrieval_ranks(model, data, vocab, scorer=scorer)
            for ex, s, r in zip(data, captured, ranks):
                rec = {"dialog_id": ex.dialog_id, "turn": ex.turn, "question": detokenize(ex.question),
                       "gt_rank": r, "ranked_candidates": _candidate_record(ex, s)}
                sink.write(json.dumps(rec) + "\n")
            metrics = {"task": "retrieve", "mean_rank": mean_rank(ranks), "examples": len(ranks)}
    finally:
        if sink is not sys.stdout:
            sink.close()
    print(json.dumps(metrics), file=sys.stdout if args.predictions else sys.stderr)
    return 0


def cmd_synth(args) -> int:
    fields = {}
    if args.spec:
        try:
            fields = yaml.safe_load(Path(args.spec).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {args.spec}: {exc}") from None
        if not isinstance(fields, dict):
            raise ConfigError(f"{args.spec} must be a flat key/value document")
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SyntheticTaskSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    if args.n < 1:
        raise UsageError("--n must be positive")
    write_dataset(args.out, synthesize(spec, args.n))
    print(json.dumps({"examples": args.n, "out": str(args.out)}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = run_ablation(cfg, data, seeds, with_bleu=args.bleu)
    print(format_table(rows))
    summary = ablation_summary(rows)
    wins = sum(v["full_not_worse"] for v in summary.values())
    print(f"full model not worse in {wins} of {len(summary)} ablations")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows, "summary": summary}, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .suite import gradient_suite

    result = gradient_suite(args.dh, seed=args.seed or 0, tol=args.tol)
    print("\n".join(result.lines()))
    print(f"max relative error {result.max_error:.3e} in {result.seconds:.1f}s")
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stsgr", description="Scene-graph video dialog models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--task", choices=("generate", "retrieve"), required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", help="write per-example JSON lines here instead of stdout")
    e.add_argument("--beam", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="run the ablation table")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    a.add_argument("--bleu", action="store_true", help="also decode and score BLEU-4")
    a.add_argument("--out", help="write rows and summary as JSON")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--dh", type=int, default=8)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    for sp in (t, e, s, a, g):
        sp.add_argument("--seed", type=int, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (*VALIDATION_ERRORS, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
