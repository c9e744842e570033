"""Tokenization and vocabulary."""
from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

EOS, SOS, PAD, UNK = "<eos>", "<sos>", "<pad>", "<unk>"
RESERVED = (EOS, SOS, PAD, UNK)
EOS_ID, SOS_ID, PAD_ID, UNK_ID = range(4)

_TOKEN = re.compile(r"\w+|[^\w\s]")
_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens with spaces, attaching punctuation to the preceding token."""
    out: list[str] = []
    for tok in tokens:
        if out and _PUNCT.fullmatch(tok):
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


def normalize(text: str) -> str:
    return detokenize(tokenize(text))


class Vocabulary:
    """Token <-> id map with ids 0..3 reserved for eos, sos, pad and unk.

    Remaining ids follow descending frequency, ties broken lexicographically.
    """

    def __init__(self, tokens: Sequence[str], min_count: int = 5):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.min_count = min_count

    @classmethod
    def build(cls, corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
        counts: Counter[str] = Counter()
        n_sent = 0
        for sent in corpus:
            counts.update(sent)
            n_sent += 1
        if n_sent == 0:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
        return cls(kept, min_count)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        toks = []
        for i in ids:
            if strip and i == EOS_ID:
                break
            if strip and i in (SOS_ID, PAD_ID):
                continue
            toks.append(self.itos[i])
        return toks

    def to_dict(self) -> dict:
        return {"tokens": self.itos[len(RESERVED):], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(d["tokens"], d.get("min_count", 5))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_dict(json.loads(Path(path).read_text()))
