"""Word-level vocabulary and fixed-length encoding of tweets."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)
MAX_LENGTH = 128

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation (punctuation kept as tokens)."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.itos = list(tokens)
        if tuple(self.itos[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.itos)]
        Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        tokens = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            tok, _, idx = line.rpartition("\t")
            if not _ or int(idx) != lineno - 1:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>{lineno - 1}'")
            tokens.append(tok)
        return cls(tokens)


def build_vocab(corpus: Iterable[str], max_size: int, min_freq: int = 1) -> Vocabulary:
    """Keep the ``max_size - 5`` most frequent tokens; ties go to the lexicographically smaller."""
    if max_size < NUM_SPECIAL:
        raise ValueError(f"max_size must be at least {NUM_SPECIAL}, got {max_size}")
    counts: Counter = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(tokenize(line))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                    key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(ranked[: max_size - NUM_SPECIAL]))


@dataclass(frozen=True)
class EncodedSequence:
    ids: tuple
    attention_mask: tuple
    segment_ids: tuple = field(default=())

    def __post_init__(self):
        if not self.segment_ids:
            object.__setattr__(self, "segment_ids", (0,) * len(self.ids))

    def __len__(self):
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.attention_mask)


def encode(text: str, vocab: Vocabulary, max_length: int = MAX_LENGTH) -> EncodedSequence:
    if max_length < 2:
        raise ValueError("max_length must leave room for [CLS] and [SEP]")
    body = [vocab.id(t) for t in tokenize(text)][: max_length - 2]
    ids = [CLS, *body, SEP]
    n = len(ids)
    pad = max_length - n
    return EncodedSequence(tuple(ids + [PAD] * pad), (1,) * n + (0,) * pad)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i >= NUM_SPECIAL:
            out.append(vocab.itos[i])
    return " ".join(out)
