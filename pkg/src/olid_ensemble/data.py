"""Corpus ingestion, deduplication, confidence thresholding and the seven split recipes.

Source formats (UTF-8, LF, no quoting, tabs illegal inside tweets):

* OLID-shaped:   ``id<TAB>tweet<TAB>subtask_a`` with labels NOT / OFF
* SOLID text:    ``id<TAB>text``
* SOLID labels:  ``id<TAB>average<TAB>std``
* task test:     ``id<TAB>tweet`` (+ optional gold file ``id<TAB>label``)

Every split row carries a source-qualified id (``olid-train:09``,
``solid:167`` ...) so ids stay unique when sources are combined.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor
from pathlib import Path
from typing import Optional, Sequence

from .rng import RngStream
from .tokenizer import EncodedSequence, Vocabulary, encode

LABELS = ("NOT", "OFF")
STAGES = ("FT", "PT", "PT-R", "PT-C", "PT-R-C", "PT-C-C", "E")
OFF_THRESHOLD = 0.5


class ParseError(ValueError):
    pass


class JoinError(ValueError):
    pass


@dataclass(frozen=True)
class RawTweet:
    id: str
    text: str
    gold_label: Optional[str] = None
    avg_conf: Optional[float] = None
    conf_std: Optional[float] = None


@dataclass(frozen=True)
class SplitRow:
    """A split member before tokenization; ``target`` is a class index, a confidence, or None (MLM)."""

    id: str
    text: str
    target: object = None


@dataclass(frozen=True)
class LabeledExample:
    id: str
    encoded: EncodedSequence
    target: object = None


def _rows(path, header: Sequence[str]):
    """Yield (lineno, fields) for data rows; checks the header prefix and column count."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        cols = first.split("\t")
        if [c.strip().lower() for c in cols[: len(header)]] != list(header):
            raise ParseError(f"{path}:1: expected header {'<TAB>'.join(header)!r}, got {first!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(cols):
                raise ParseError(f"{path}:{lineno}: expected {len(cols)} tab-separated fields, "
                                 f"got {len(parts)}")
            yield lineno, parts


def load_olid(path) -> list[RawTweet]:
    out = []
    for lineno, (tid, text, label, *_) in _rows(path, ("id", "tweet", "subtask_a")):
        if label not in LABELS:
            raise ValueError(f"{path}:{lineno}: unknown label {label!r} (expected NOT or OFF)")
        out.append(RawTweet(tid, text, gold_label=label))
    return out


def _unit_float(path, lineno, name, text, upper=1.0):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {name} {text!r} is not a number") from None
    if not 0.0 <= v <= upper:
        raise ValueError(f"{path}:{lineno}: {name} {v} outside [0, {upper}]")
    return v


def load_solid(text_path, labels_path) -> list[RawTweet]:
    texts = {}
    for lineno, (tid, text) in _rows(text_path, ("id", "text")):
        texts[tid] = text
    labels = {}
    for lineno, (tid, avg, std) in _rows(labels_path, ("id", "average", "std")):
        labels[tid] = (_unit_float(labels_path, lineno, "average", avg),
                       _unit_float(labels_path, lineno, "std", std, upper=float("inf")))
    only_text = [i for i in texts if i not in labels]
    only_labels = [i for i in labels if i not in texts]
    if only_text or only_labels:
        msg = []
        if only_text:
            msg.append(f"ids without labels: {', '.join(only_text[:10])}")
        if only_labels:
            msg.append(f"ids without text: {', '.join(only_labels[:10])}")
        raise JoinError("SOLID join failed; " + "; ".join(msg))
    return [RawTweet(tid, text, avg_conf=labels[tid][0], conf_std=labels[tid][1])
            for tid, text in texts.items()]


def load_texts(path) -> list[RawTweet]:
    return [RawTweet(tid, text) for _, (tid, text, *_) in _rows(path, ("id", "tweet"))]


def load_gold(path) -> dict:
    """Gold labels from ``id<TAB>label`` TSV, ``id,label`` CSV or an OLID-shaped file."""
    path = Path(path)
    first = path.read_text(encoding="utf-8").split("\n", 1)[0]
    if first.startswith("id\ttweet\tsubtask_a"):
        return {t.id: t.gold_label for t in load_olid(path)}
    delim = "\t" if "\t" in first else ","
    gold = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        next(reader, None)
        for lineno, row in enumerate(reader, 2):
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected id{delim!r}label")
            if row[1] not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {row[1]!r}")
            gold[row[0]] = row[1]
    return gold


def dedup(tweets: Sequence[RawTweet]):
    """Drop exact duplicates of the whitespace-trimmed text, keeping first occurrences."""
    seen, kept = set(), []
    for t in tweets:
        key = t.text.strip()
        if key not in seen:
            seen.add(key)
            kept.append(t)
    return kept, len(tweets) - len(kept)


def threshold_label(tweet: RawTweet, threshold: float = OFF_THRESHOLD) -> int:
    """1 (OFF) iff avg_conf is strictly above the threshold, else 0 (NOT)."""
    if tweet.avg_conf is None:
        raise ValueError(f"tweet {tweet.id} has no avg_conf to threshold")
    return int(tweet.avg_conf > threshold)


# ---------------------------------------------------------------- split planning


@dataclass(frozen=True)
class SplitPlan:
    """One split recipe.

    OLID-train is cut with ``floor(olid_train_fraction * n)`` rows to train;
    SOLID with ``floor(solid_dev_fraction * n)`` rows to dev.  These are the
    two rounding directions that reproduce the published split sizes.
    """

    stage: str
    olid_train_fraction: float = 0.9
    solid_dev_fraction: float = 0.005
    pt_holdout_fraction: float = 0.0
    stage2_fraction: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        for name in ("olid_train_fraction", "solid_dev_fraction", "pt_holdout_fraction",
                     "stage2_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def floor_fraction(fraction: float, n: int) -> int:
    # decimal-exact so 0.9 * 13240 is 11916, not 11915
    return floor(Fraction(str(fraction)) * n)


@dataclass(frozen=True)
class SourceSizes:
    olid_train: int
    olid_test: int
    solid_raw: int
    solid_dedup: int
    task_test: int


def plan_counts(plan: SplitPlan, sizes: SourceSizes) -> tuple[int, int]:
    """(train, dev) sizes of ``plan`` from source sizes alone."""
    olid_trn = floor_fraction(plan.olid_train_fraction, sizes.olid_train)
    olid_dev = sizes.olid_train - olid_trn + sizes.olid_test
    solid_dev = floor_fraction(plan.solid_dev_fraction, sizes.solid_dedup)
    solid_trn = sizes.solid_dedup - solid_dev
    if plan.stage == "FT":
        return olid_trn + solid_trn, olid_dev
    if plan.stage == "PT":
        total = sizes.olid_train + sizes.olid_test + sizes.solid_raw + sizes.task_test
        hold = floor_fraction(plan.pt_holdout_fraction, total)
        return total - hold, hold
    if plan.stage in ("PT-R", "PT-C"):
        return floor_fraction(plan.stage2_fraction, solid_trn), solid_dev
    return olid_trn, olid_dev


@dataclass
class SplitResult:
    stage: str
    train: list
    dev: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def manifest_rows(self):
        for split, rows in (("train", self.train), ("dev", self.dev)):
            for r in rows:
                yield r.id, split, format_target(r.target, self.stage)


def format_target(target, stage: str) -> str:
    if target is None:
        return "-"
    if stage in ("PT-R",):
        return repr(float(target))
    return LABELS[int(target)]


def parse_target(text: str, stage: str):
    if text == "-":
        return None
    if stage == "PT-R":
        return float(text)
    return LABELS.index(text)


def _shuffled(rows, rng: RngStream, key: str):
    perm = rng.fork("split", key).permutation(len(rows))
    return [rows[i] for i in perm]


def make_split(plan: SplitPlan, olid_train, olid_test, solid, task_test=()) -> SplitResult:
    """Materialise one split.  ``solid`` is the raw SOLID list; dedup happens here.

    Each source is shuffled once with a key that depends only on the source,
    so FT, PT-R-C, PT-C-C and E share the same OLID cut, and PT-R/PT-C/FT the
    same SOLID cut.
    """
    if not olid_train:
        raise ValueError("OLID training source is empty")
    if plan.stage in ("FT", "PT", "PT-R", "PT-C") and not solid:
        raise ValueError(f"stage {plan.stage} needs a non-empty SOLID source")
    rng = RngStream(plan.seed)
    solid_dd, removed = dedup(solid)
    sizes = SourceSizes(len(olid_train), len(olid_test), len(solid), len(solid_dd), len(task_test))
    n_train, n_dev = plan_counts(plan, sizes)

    def gold(t, source):
        return SplitRow(f"{source}:{t.id}", t.text, 0 if t.gold_label == "NOT" else 1)

    olid = _shuffled(olid_train, rng, "olid-train")
    n_olid = floor_fraction(plan.olid_train_fraction, len(olid))
    olid_trn = [gold(t, "olid-train") for t in olid[:n_olid]]
    olid_dev = [gold(t, "olid-train") for t in olid[n_olid:]] + [gold(t, "olid-test") for t in olid_test]

    sol = _shuffled(solid_dd, rng, "solid")
    n_sdev = floor_fraction(plan.solid_dev_fraction, len(sol))
    sol_trn, sol_dev = sol[n_sdev:], sol[:n_sdev]

    def solid_rows(rows, regression):
        return [SplitRow(f"solid:{t.id}", t.text, t.avg_conf if regression else threshold_label(t))
                for t in rows]

    stage = plan.stage
    if stage == "FT":
        train, dev = olid_trn + solid_rows(sol_trn, False), olid_dev
    elif stage == "PT":
        corpus = ([SplitRow(f"olid-train:{t.id}", t.text) for t in olid_train]
                  + [SplitRow(f"olid-test:{t.id}", t.text) for t in olid_test]
                  + [SplitRow(f"solid:{t.id}", t.text) for t in solid]
                  + [SplitRow(f"task:{t.id}", t.text) for t in task_test])
        corpus = _shuffled(corpus, rng, "pt")
        train, dev = corpus[n_dev:], corpus[:n_dev]
    elif stage in ("PT-R", "PT-C"):
        reg = stage == "PT-R"
        train = solid_rows(sol_trn[:n_train], reg)
        dev = solid_rows(sol_dev, reg)
    else:
        train, dev = olid_trn, olid_dev
    assert (len(train), len(dev)) == (n_train, n_dev)
    counts = {"train": len(train), "dev": len(dev), "solid_duplicates_removed": removed}
    return SplitResult(stage, train, dev, counts)


def write_split_manifest(result: SplitResult, path) -> None:
    lines = ["id\tsplit\ttarget\n"]
    lines += [f"{i}\t{s}\t{t}\n" for i, s, t in result.manifest_rows()]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_split_manifest(path, stage: str, texts: dict) -> SplitResult:
    """Rebuild a split from its manifest; ``texts`` maps qualified ids to tweet text."""
    train, dev = [], []
    for lineno, (uid, split, target) in _rows(path, ("id", "split", "target")):
        if uid not in texts:
            raise JoinError(f"{path}:{lineno}: id {uid!r} not found in the sources")
        row = SplitRow(uid, texts[uid], parse_target(target, stage))
        (train if split == "train" else dev).append(row)
    return SplitResult(stage, train, dev, {"train": len(train), "dev": len(dev)})


def qualified_texts(olid_train, olid_test, solid, task_test=()) -> dict:
    out = {}
    for source, rows in (("olid-train", olid_train), ("olid-test", olid_test),
                         ("solid", solid), ("task", task_test)):
        out.update({f"{source}:{t.id}": t.text for t in rows})
    return out


def encode_rows(rows, vocab: Vocabulary, max_length: int = 128) -> list[LabeledExample]:
    return [LabeledExample(r.id, encode(r.text, vocab, max_length), r.target) for r in rows]


def write_olid(tweets, path) -> None:
    lines = ["id\ttweet\tsubtask_a\n"] + [f"{t.id}\t{t.text}\t{t.gold_label}\n" for t in tweets]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def write_solid(tweets, text_path, labels_path) -> None:
    Path(text_path).write_text(
        "".join(["id\ttext\n"] + [f"{t.id}\t{t.text}\n" for t in tweets]), encoding="utf-8", newline="\n")
    Path(labels_path).write_text(
        "".join(["id\taverage\tstd\n"] + [f"{t.id}\t{t.avg_conf!r}\t{t.conf_std!r}\n" for t in tweets]),
        encoding="utf-8", newline="\n")


def write_texts(tweets, path, gold_path=None) -> None:
    Path(path).write_text("".join(["id\ttweet\n"] + [f"{t.id}\t{t.text}\n" for t in tweets]),
                          encoding="utf-8", newline="\n")
    if gold_path is not None:
        Path(gold_path).write_text(
            "".join(["id\tlabel\n"] + [f"{t.id}\t{t.gold_label}\n" for t in tweets]),
            encoding="utf-8", newline="\n")
