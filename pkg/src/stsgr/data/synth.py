"""Synthetic video-dialog corpus with exactly computable answers.

Each video is a small world of colored shapes. Objects enter at some frame and
stay visible afterwards. Some object pairs are related, which adds a union-box
node connected from both endpoints and labelled with the relation predicate.
Node features are drawn from a fixed Gaussian per class, so the task is
learnable from either features or labels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..graph import SceneGraph
from .dataset import Dataset, DialogExample
from .text import tokenize

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
TEMPLATES = ("count", "presence", "order", "relation")
DEFAULT_TEMPLATES = ("count", "presence", "order")


@dataclass
class SyntheticTaskSpec:
    seed: int = 0
    world_seed: int = 0
    n_frames: int = 4
    min_objects: int = 2
    max_objects: int = 4
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow")
    shapes: tuple[str, ...] = ("cube", "ball", "cone")
    relations: tuple[str, ...] = ("near", "on", "behind")
    relation_prob: float = 0.5
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    history_turns: int = 2
    n_candidates: int | None = None
    visual_dim: int = 16
    audio_dim: int = 128
    with_audio: bool = True
    noise: float = 0.1

    def __post_init__(self):
        self.colors = tuple(self.colors)
        self.shapes = tuple(self.shapes)
        self.relations = tuple(self.relations)
        self.templates = tuple(self.templates)
        if self.n_frames < 1 or self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("synthetic spec needs n_frames >= 1 and 1 <= min_objects <= max_objects")
        if self.max_objects >= len(NUMBER_WORDS):
            raise ValueError(f"max_objects must be below {len(NUMBER_WORDS)}")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown or not self.templates:
            raise ValueError(f"unknown templates {sorted(unknown)}")
        if self.n_candidates is not None and self.n_candidates < 2:
            raise ValueError("n_candidates must be at least 2")

    @property
    def object_names(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    @property
    def label_names(self) -> list[str]:
        """Object classes followed by relation predicates (the labels of union nodes)."""
        return self.object_names + list(self.relations)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Object:
    color: str
    shape: str
    entry: int

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class _World:
    objects: list[_Object]
    relations: list[tuple[int, int, int]] = field(default_factory=list)


class _Centers:
    """Fixed per-class feature means shared by every dataset with the same world seed."""

    def __init__(self, spec: SyntheticTaskSpec):
        rng = np.random.default_rng(spec.world_seed)
        self.objects = rng.normal(size=(len(spec.object_names), spec.visual_dim))
        self.relations = rng.normal(size=(len(spec.relations), spec.visual_dim))
        self.sounds = rng.normal(size=(len(spec.colors), spec.audio_dim))


def _sample_world(spec: SyntheticTaskSpec, rng: np.random.Generator) -> _World:
    m = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    entries = rng.integers(0, spec.n_frames, size=m)
    entries[rng.integers(m)] = 0
    objs = [
        _Object(spec.colors[rng.integers(len(spec.colors))], spec.shapes[rng.integers(len(spec.shapes))], int(e))
        for e in entries
    ]
    rels = []
    for i in range(m):
        for j in range(m):
            # at most one relation per unordered pair keeps subject and object unambiguous
            if i != j and rng.random() < spec.relation_prob / max(m - 1, 1) and not any(
                (a, b) == (j, i) for a, b, _ in rels
            ):
                rels.append((i, j, int(rng.integers(len(spec.relations)))))
    return _World(objs, rels)


def _render(spec: SyntheticTaskSpec, world: _World, centers: _Centers, rng: np.random.Generator):
    label_index = {n: i for i, n in enumerate(spec.label_names)}
    graphs, audio = [], []
    for f in range(spec.n_frames):
        visible = [i for i, o in enumerate(world.objects) if o.entry <= f]
        node_of = {obj: k for k, obj in enumerate(visible)}
        feats = [centers.objects[label_index[world.objects[i].name]] for i in visible]
        labels = [label_index[world.objects[i].name] for i in visible]
        union = [False] * len(visible)
        edges: list[tuple[int, int]] = []
        for s, o, r in world.relations:
            if s in node_of and o in node_of:
                u = len(feats)
                feats.append(centers.relations[r])
                labels.append(len(spec.object_names) + r)
                union.append(True)
                edges += [(node_of[s], node_of[o]), (node_of[s], u), (node_of[o], u)]
        x = np.asarray(feats) + spec.noise * rng.normal(size=(len(feats), spec.visual_dim))
        graphs.append(SceneGraph(x, edges, labels, union, f))
        if spec.with_audio:
            sound = np.zeros(spec.audio_dim)
            for i in visible:
                sound += centers.sounds[spec.colors.index(world.objects[i].color)]
            audio.append(sound + spec.noise * rng.normal(size=spec.audio_dim))
    return graphs, (np.asarray(audio) if spec.with_audio else None)


def count_answer(n: int, color: str) -> str:
    if n == 0:
        return f"there are no {color} objects"
    if n == 1:
        return f"there is one {color} object"
    return f"there are {NUMBER_WORDS[n]} {color} objects"


def presence_answer(name: str, present: bool) -> str:
    return f"yes, there is a {name}" if present else f"no, there is no {name}"


def order_answer(a: str, b: str, before: bool) -> str:
    return f"yes, the {a} comes first" if before else f"no, the {b} comes first"


def relation_answer(a: str, relation: str, b: str, holds: bool) -> str:
    return f"yes, the {a} is {relation} the {b}" if holds else f"no, the {a} is not {relation} the {b}"


def _first_seen(world: _World) -> dict[str, int]:
    first: dict[str, int] = {}
    for o in world.objects:
        first[o.name] = min(first.get(o.name, o.entry), o.entry)
    return first


def _ask(spec: SyntheticTaskSpec, world: _World, template: str, rng: np.random.Generator):
    """(question, answer, every answer the question admits), or None if the template does not apply."""
    names = {o.name for o in world.objects}
    if template == "count":
        color = spec.colors[rng.integers(len(spec.colors))]
        n = sum(o.color == color for o in world.objects)
        options = [count_answer(k, color) for k in range(spec.max_objects + 1)]
        return f"how many {color} objects are there?", count_answer(n, color), options
    if template == "presence":
        if rng.random() < 0.5:
            name = sorted(names)[rng.integers(len(names))]
        else:
            absent = [n for n in spec.object_names if n not in names]
            if not absent:
                return None
            name = absent[rng.integers(len(absent))]
        options = [presence_answer(name, True), presence_answer(name, False)]
        return f"is there a {name}?", presence_answer(name, name in names), options
    if template == "relation":
        facts = {(world.objects[i].name, spec.relations[r], world.objects[j].name) for i, j, r in world.relations}
        if rng.random() < 0.5:
            if not facts:
                return None
            a, rel, b = sorted(facts)[rng.integers(len(facts))]
        else:
            objs = sorted(names)
            if len(objs) < 2:
                return None
            a, b = (objs[k] for k in rng.choice(len(objs), size=2, replace=False))
            rel = spec.relations[rng.integers(len(spec.relations))]
        options = [relation_answer(a, rel, b, True), relation_answer(a, rel, b, False)]
        return f"is the {a} {rel} the {b}?", relation_answer(a, rel, b, (a, rel, b) in facts), options
    first = _first_seen(world)
    pairs = [(a, b) for a in sorted(first) for b in sorted(first) if a != b and first[a] != first[b]]
    if not pairs:
        return None
    a, b = pairs[rng.integers(len(pairs))]
    options = [order_answer(a, b, True), order_answer(a, b, False)]
    return f"does the {a} appear before the {b}?", order_answer(a, b, first[a] < first[b]), options


def _ask_any(spec, world, rng, preferred: str | None = None):
    order = list(spec.templates)
    rng.shuffle(order)
    if preferred is not None:
        order.remove(preferred)
        order.insert(0, preferred)
    for t in order:
        qa = _ask(spec, world, t, rng)
        if qa is not None:
            return qa
    return _ask(spec, world, "count", rng)


def _perturbations(spec: SyntheticTaskSpec, answer: str) -> list[str]:
    """Same-template wrong answers: other counts or colors, flipped yes/no, other objects."""
    out = []
    words = answer.split()
    if words[0] == "there":
        color = next(c for c in spec.colors if c in words)
        out += [count_answer(n, color) for n in range(spec.max_objects + 1)]
        out += [answer.replace(color, c) for c in spec.colors]
    elif words[1] == "there":
        name = " ".join(words[-2:])
        out.append(presence_answer(name, words[0] == "no,"))
        out += [presence_answer(n, words[0] == "yes,") for n in spec.object_names]
    elif words[4] == "is":
        holds = words[0] == "yes,"
        a, b = " ".join(words[2:4]), " ".join(words[-2:])
        rel = words[-4]
        out.append(relation_answer(a, rel, b, not holds))
        out += [relation_answer(a, r, b, holds) for r in spec.relations]
        out += [relation_answer(b, rel, a, holds)]
    else:
        name = " ".join(words[2:4])
        out.append(answer.replace("yes," if words[0] == "yes," else "no,", "no," if words[0] == "yes," else "yes,"))
        out += [f"{words[0]} the {n} comes first" for n in spec.object_names if n != name]
    return [a for a in dict.fromkeys(out) if a != answer]


def synthesize(spec: SyntheticTaskSpec, n: int) -> Dataset:
    """``n`` dialog examples, one video each; identical specs give identical data."""
    centers = _Centers(spec)
    rng = np.random.default_rng(spec.seed)
    raw = []
    for k in range(n):
        world = _sample_world(spec, rng)
        graphs, audio = _render(spec, world, centers, rng)
        turns = int(rng.integers(0, spec.history_turns + 1))
        history = [_ask_any(spec, world, rng)[:2] for _ in range(turns)]
        question, answer, options = _ask_any(spec, world, rng, preferred=spec.templates[k % len(spec.templates)])
        caption = f"a video with {NUMBER_WORDS[len(world.objects)]} objects"
        raw.append((f"vid{spec.seed}_{k:05d}", graphs, audio, caption, history, question, answer, options))

    answers = [r[6] for r in raw]
    examples = []
    for vid, graphs, audio, caption, history, question, answer, options in raw:
        candidates = gt = None
        if spec.n_candidates is not None:
            candidates, gt = _candidates(spec, answer, options, answers, rng)
        examples.append(DialogExample(
            video_id=vid,
            scene_graphs=graphs,
            caption=tokenize(caption),
            history=[(tokenize(q), tokenize(a)) for q, a in history],
            question=tokenize(question),
            answer=tokenize(answer),
            audio=audio,
            candidates=None if candidates is None else [tokenize(c) for c in candidates],
            gt_index=gt,
            dialog_id=vid,
            turn=len(history),
        ))
    return Dataset(examples, spec.label_names)


def _candidates(spec: SyntheticTaskSpec, answer: str, options: Sequence[str], pool: Sequence[str],
                rng: np.random.Generator, n_hard: int = 3):
    """Distinct distractors, hardest first.

    Every other answer the question admits is included, then a few
    same-template perturbations, then other examples' answers drawn with their
    corpus frequency so the easy distractors follow the ground-truth marginal.
    """
    need = spec.n_candidates - 1
    chosen = [o for o in options if o != answer][:need]
    seen = set(chosen) | {answer}
    hard = [h for h in _perturbations(spec, answer) if h not in seen]
    for i in rng.permutation(len(hard))[: max(0, min(n_hard, need - len(chosen)))]:
        chosen.append(hard[i])
        seen.add(hard[i])
    for i in rng.permutation(len(pool)):
        if len(chosen) >= need:
            break
        if pool[i] not in seen:
            seen.add(pool[i])
            chosen.append(pool[i])
    rest = [a for a in hard if a not in seen]
    while len(chosen) < need:
        chosen.append(rest.pop(0) if rest else chosen[int(rng.integers(len(chosen)))])
    order = rng.permutation(need)
    chosen = [chosen[i] for i in order]
    gt = int(rng.integers(spec.n_candidates))
    chosen.insert(gt, answer)
    return chosen, gt
