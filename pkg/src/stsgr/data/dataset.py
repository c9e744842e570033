"""Dialog examples and the JSON-lines corpus format.

A dataset directory holds::

    dialogs.jsonl        {format, video_id, caption, history: [[q, a], ...], question,
                          answer, candidates?: [...], gt_index?}
    scene_graphs.jsonl   {format, video_id, frame, nodes: [[f64...]...], labels: [int...],
                          edges: [[i, j]...], union_flags: [bool...]}
    audio.jsonl          {format, video_id, frames: [[f64...]...]}      (optional)
    labels.json          {format, labels: [name, ...]}                  (optional)

Every record carries ``"format": "stsgr-v1"``.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from ..graph import GraphError, SceneGraph
from .text import detokenize, tokenize

FORMAT = "stsgr-v1"


class DatasetError(ValueError):
    pass


@dataclass
class DialogExample:
    video_id: str
    scene_graphs: list[SceneGraph]
    caption: list[str]
    history: list[tuple[list[str], list[str]]]
    question: list[str]
    answer: list[str]
    audio: np.ndarray | None = None
    candidates: list[list[str]] | None = None
    gt_index: int | None = None
    dialog_id: str = ""
    turn: int = 0

    def validate(self) -> None:
        if not self.scene_graphs:
            raise DatasetError(f"{self.video_id}: no scene graphs")
        if not self.answer:
            raise DatasetError(f"{self.video_id}: empty answer")
        if self.audio is not None and len(self.audio) != len(self.scene_graphs):
            raise DatasetError(
                f"{self.video_id}: audio has {len(self.audio)} frames, video has {len(self.scene_graphs)}"
            )
        if self.candidates is not None:
            if self.gt_index is None or not 0 <= self.gt_index < len(self.candidates):
                raise DatasetError(f"{self.video_id}: gt_index {self.gt_index} invalid for {len(self.candidates)} candidates")


@dataclass
class Dataset:
    examples: list[DialogExample]
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[DialogExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.examples[i], self.label_names)
        return self.examples[i]

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset([self.examples[i] for i in indices], self.label_names)

    def sentences(self) -> Iterator[list[str]]:
        """All text of the corpus, for vocabulary building."""
        for ex in self.examples:
            yield ex.caption
            for q, a in ex.history:
                yield q
                yield a
            yield ex.question
            yield ex.answer
            for c in ex.candidates or []:
                yield c


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path.name}:{lineno}: record is not an object")
            if rec.get("format") != FORMAT:
                raise DatasetError(f"{path.name}:{lineno}: field 'format' must be {FORMAT!r}")
            yield lineno, rec


def _field(rec: dict, name: str, kind, where: str):
    if name not in rec:
        raise DatasetError(f"{where}: missing field {name!r}")
    value = rec[name]
    if not isinstance(value, kind):
        raise DatasetError(f"{where}: field {name!r} has wrong type {type(value).__name__}")
    return value


def _load_graphs(path: Path) -> dict[str, list[SceneGraph]]:
    frames: dict[str, dict[int, SceneGraph]] = defaultdict(dict)
    for lineno, rec in _read_jsonl(path):
        where = f"{path.name}:{lineno}"
        vid = str(_field(rec, "video_id", (str, int), where))
        frame = _field(rec, "frame", int, where)
        nodes = _field(rec, "nodes", list, where)
        edges = _field(rec, "edges", list, where)
        labels = rec.get("labels")
        union = rec.get("union_flags")
        try:
            feats = np.asarray(nodes, dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetError(f"{where}: field 'nodes' is not a numeric matrix") from None
        if any(not isinstance(e, list) or len(e) != 2 for e in edges):
            raise DatasetError(f"{where}: field 'edges' must hold [i, j] pairs")
        g = SceneGraph(feats, [tuple(e) for e in edges], labels, union, frame)
        try:
            g.validate()
        except GraphError as exc:
            raise DatasetError(f"{where}: field 'edges'/'nodes': {exc}") from None
        if frame in frames[vid]:
            raise DatasetError(f"{where}: field 'frame': duplicate frame {frame} for video {vid}")
        frames[vid][frame] = g
    out = {}
    for vid, by_frame in frames.items():
        if sorted(by_frame) != list(range(len(by_frame))):
            raise DatasetError(f"{path.name}: video {vid} frames are not contiguous from 0")
        out[vid] = [by_frame[i] for i in range(len(by_frame))]
    return out


def _load_audio(path: Path) -> dict[str, np.ndarray]:
    out = {}
    for lineno, rec in _read_jsonl(path):
        where = f"{path.name}:{lineno}"
        vid = str(_field(rec, "video_id", (str, int), where))
        frames = np.asarray(_field(rec, "frames", list, where), dtype=np.float64)
        if frames.ndim != 2:
            raise DatasetError(f"{where}: field 'frames' is not a matrix")
        out[vid] = frames
    return out


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset directory; errors name file, line and field."""
    root = Path(path)
    dialogs_path = root / "dialogs.jsonl"
    if not dialogs_path.exists():
        raise DatasetError(f"{root}: dialogs.jsonl not found")
    graphs = _load_graphs(root / "scene_graphs.jsonl")
    audio = _load_audio(root / "audio.jsonl") if (root / "audio.jsonl").exists() else {}
    for vid, a in audio.items():
        if vid in graphs and len(a) != len(graphs[vid]):
            raise DatasetError(
                f"audio.jsonl: video {vid} has {len(a)} audio frames but {len(graphs[vid])} scene graphs"
            )
    label_names: list[str] = []
    if (root / "labels.json").exists():
        label_names = list(json.loads((root / "labels.json").read_text())["labels"])

    examples = []
    for lineno, rec in _read_jsonl(dialogs_path):
        where = f"dialogs.jsonl:{lineno}"
        vid = str(_field(rec, "video_id", (str, int), where))
        if vid not in graphs:
            raise DatasetError(f"{where}: field 'video_id': no scene graphs for video {vid}")
        history = _field(rec, "history", list, where)
        if any(not isinstance(t, list) or len(t) != 2 for t in history):
            raise DatasetError(f"{where}: field 'history' must hold [question, answer] pairs")
        candidates = rec.get("candidates")
        gt = rec.get("gt_index")
        if candidates is not None and (not isinstance(gt, int) or not 0 <= gt < len(candidates)):
            raise DatasetError(f"{where}: field 'gt_index' invalid for {len(candidates)} candidates")
        answer = tokenize(_field(rec, "answer", str, where))
        if not answer:
            raise DatasetError(f"{where}: field 'answer' is empty")
        ex = DialogExample(
            video_id=vid,
            scene_graphs=graphs[vid],
            caption=tokenize(_field(rec, "caption", str, where)),
            history=[(tokenize(q), tokenize(a)) for q, a in history],
            question=tokenize(_field(rec, "question", str, where)),
            answer=answer,
            audio=audio.get(vid),
            candidates=None if candidates is None else [tokenize(c) for c in candidates],
            gt_index=gt,
            dialog_id=str(rec.get("dialog_id", vid)),
            turn=int(rec.get("turn", len(history))),
        )
        examples.append(ex)
    for g_list in graphs.values():
        for g in g_list:
            if label_names and g.label_ids is not None and any(not -1 <= i < len(label_names) for i in g.label_ids):
                raise DatasetError(f"scene_graphs.jsonl: frame {g.frame_index}: field 'labels' out of range")
    return Dataset(examples, label_names)


def dialog_record(ex: DialogExample) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "format": FORMAT,
        "video_id": ex.video_id,
        "dialog_id": ex.dialog_id,
        "turn": ex.turn,
        "caption": detokenize(ex.caption),
        "history": [[detokenize(q), detokenize(a)] for q, a in ex.history],
        "question": detokenize(ex.question),
        "answer": detokenize(ex.answer),
    }
    if ex.candidates is not None:
        rec["candidates"] = [detokenize(c) for c in ex.candidates]
        rec["gt_index"] = ex.gt_index
    return rec


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    seen: dict[str, DialogExample] = {}
    with (root / "dialogs.jsonl").open("w") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps(dialog_record(ex)) + "\n")
            seen.setdefault(ex.video_id, ex)
    with (root / "scene_graphs.jsonl").open("w") as fh:
        for vid, ex in seen.items():
            for g in ex.scene_graphs:
                fh.write(json.dumps({
                    "format": FORMAT,
                    "video_id": vid,
                    "frame": g.frame_index,
                    "nodes": g.node_features.tolist(),
                    "labels": g.label_ids,
                    "edges": [list(e) for e in g.edges],
                    "union_flags": g.union_node_flags,
                }) + "\n")
    with_audio = [(vid, ex.audio) for vid, ex in seen.items() if ex.audio is not None]
    if with_audio:
        with (root / "audio.jsonl").open("w") as fh:
            for vid, a in with_audio:
                fh.write(json.dumps({"format": FORMAT, "video_id": vid, "frames": np.asarray(a).tolist()}) + "\n")
    (root / "labels.json").write_text(json.dumps({"format": FORMAT, "labels": dataset.label_names}))
