"""Templated desk-scale corpora shaped like OLID / SOLID.

Offensive rows carry a word from an "offensive marker" family, so a tiny
encoder can learn the class signal; gold labels get a small flip rate so
dev accuracy is not trivially 100%.  A duplicate rate injects exact
(whitespace-padded) copies of earlier rows into the SOLID-shaped source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import RawTweet
from .rng import RngStream

SUBJECTS = ["@USER", "my friend", "the coach", "this guy", "our team", "the mayor", "your sister",
            "that teacher", "the neighbor", "my boss", "the referee", "his cousin", "the senator",
            "her brother"]
VERBS = ["loves", "watched", "cooked", "posted", "bought", "ignored", "visited", "played",
         "shared", "sold", "fixed", "painted", "ordered", "missed"]
OBJECTS = ["the game", "a pizza", "the news", "new shoes", "the movie", "a song", "the book",
           "ice cream", "the car", "a ticket", "the garden", "a photo", "the speech", "dinner"]
TIMES = ["last night", "today", "this morning", "again", "on sunday", "before lunch",
         "after work", "yesterday", "all week", "at noon"]
CONJUNCTIONS = ["and", "but", "so", "because", "while"]
ENDINGS = ["!", "!!!", ".", "lol", "#maga", "URL", "?", "haha"]
PRAISE = ["legend", "hero", "star", "champ", "genius", "saint", "pro", "gem"]
INSULTS = ["idiot", "moron", "loser", "clown", "jerk", "fool", "creep", "liar"]
# second marker family, used only by the two-feature specialization corpus
INSULTS_ALT = ["trash", "garbage", "filth", "scum", "slime", "sewage", "muck", "sludge"]

MARKER_TEMPLATES = ["what a {w}", "{s} is a {w}", "such a {w}", "you {w}"]


def _pick(rng: RngStream, words):
    return words[int(rng.integers(len(words), 1)[0])]


def _clause(rng: RngStream) -> str:
    return f"{_pick(rng, SUBJECTS)} {_pick(rng, VERBS)} {_pick(rng, OBJECTS)} {_pick(rng, TIMES)}"


def sentence(rng: RngStream, marker_words=None) -> str:
    """One templated tweet; ``marker_words`` (if given) supplies the insult/praise slot."""
    parts = [_clause(rng)]
    if rng.uniform(1)[0] < 0.7:
        parts.append(f"{_pick(rng, CONJUNCTIONS)} {_clause(rng)}")
    words = marker_words if marker_words is not None else PRAISE
    if marker_words is not None or rng.uniform(1)[0] < 0.5:
        tmpl = _pick(rng, MARKER_TEMPLATES)
        marker = tmpl.format(w=_pick(rng, words), s=_pick(rng, SUBJECTS))
        pos = int(rng.integers(len(parts) + 1, 1)[0])
        parts.insert(pos, marker)
    return " ".join(parts) + " " + _pick(rng, ENDINGS)


def _labeled(rng: RngStream, off: bool) -> str:
    return sentence(rng, INSULTS if off else None)


@dataclass
class SyntheticCorpus:
    olid_train: list = field(default_factory=list)
    olid_test: list = field(default_factory=list)
    solid: list = field(default_factory=list)
    task_test: list = field(default_factory=list)
    generic: list = field(default_factory=list)


def generate(n: int, dup_rate: float = 0.01, off_rate: float = 0.33, seed: int = 42,
             label_noise: float = 0.06) -> SyntheticCorpus:
    """Desk corpus with ``n`` SOLID-shaped rows.

    Companion sizes: OLID train n/2, OLID test n/20, task test n/10,
    generic (unlabeled, for the default-model stand-in) n/2.
    """
    if n < 20:
        raise ValueError("synthetic corpus needs n >= 20")
    if not 0.0 <= dup_rate < 1.0 or not 0.0 <= off_rate <= 1.0:
        raise ValueError("dup_rate must be in [0, 1) and off_rate in [0, 1]")
    root = RngStream(seed).fork("synthetic")
    corpus = SyntheticCorpus()

    def gold_rows(count, key, prefix):
        rng = root.fork(key)
        rows = []
        for i in range(count):
            off = rng.uniform(1)[0] < off_rate
            text = _labeled(rng, off)
            if rng.uniform(1)[0] < label_noise:
                off = not off
            rows.append(RawTweet(f"{prefix}{i}", text, gold_label="OFF" if off else "NOT"))
        return rows

    corpus.olid_train = gold_rows(n // 2, "olid-train", "")
    corpus.olid_test = gold_rows(n // 20, "olid-test", "t")
    corpus.task_test = gold_rows(n // 10, "task-test", "x")

    rng = root.fork("solid")
    for i in range(n):
        if i and rng.uniform(1)[0] < dup_rate:
            src = corpus.solid[int(rng.integers(i, 1)[0])]
            pad = " " * int(rng.integers(2, 1)[0])
            corpus.solid.append(RawTweet(f"s{i}", src.text + pad, avg_conf=src.avg_conf,
                                         conf_std=src.conf_std))
            continue
        off = rng.uniform(1)[0] < off_rate
        text = _labeled(rng, off)
        u, v = (float(x) for x in rng.uniform(2))
        centre = 0.72 if off else 0.22
        if rng.uniform(1)[0] < label_noise:
            centre = 1.0 - centre
        avg = min(max(centre + 0.36 * (u - 0.5), 0.0), 1.0)
        corpus.solid.append(RawTweet(f"s{i}", text, avg_conf=round(avg, 3),
                                     conf_std=round(0.05 + 0.2 * v, 3)))

    rng = root.fork("generic")
    corpus.generic = [sentence(rng) for _ in range(n // 2)]
    return corpus


def specialization_corpus(n: int, seed: int = 42):
    """Two-feature data for checking that concatenation combines specialists.

    Every row has exactly one marker slot.  Returns ``(train_x, train_y, mixed)``
    as lists of (text, label):

    * ``train_x``: OFF rows use an X-family word; NOT rows use praise or a Y-family word.
    * ``train_y``: the same with the families swapped.
    * ``mixed``: OFF rows use X or Y, NOT rows praise, so each specialist
      alone labels about half of the OFF rows NOT.
    """
    rng = RngStream(seed).fork("specialization")
    families = {"x": (INSULTS, INSULTS_ALT), "y": (INSULTS_ALT, INSULTS)}

    def row(kind: str, off: bool):
        coin = rng.uniform(1)[0] < 0.5
        if kind == "mixed":
            words = (INSULTS if coin else INSULTS_ALT) if off else PRAISE
        else:
            signal, other = families[kind]
            words = signal if off else (other if coin else PRAISE)
        return sentence(rng, words)

    out = []
    for kind in ("x", "y", "mixed"):
        rows = []
        for _ in range(n):
            off = bool(rng.uniform(1)[0] < 0.5)
            rows.append((row(kind, off), int(off)))
        out.append(rows)
    return tuple(out)
