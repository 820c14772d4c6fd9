"""Accuracy, per-class and macro precision/recall/F1, perplexity, and report rendering.

All classification metrics are percentages.  Any 0/0 ratio is defined as 0
and flags the result as degenerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import EncoderModel, collate, mlm_logits
from .rng import RngStream

CLASSES = ("NOT", "OFF")


def _as_index(label) -> int:
    if isinstance(label, str):
        if label not in CLASSES:
            raise ValueError(f"invalid label {label!r}")
        return CLASSES.index(label)
    if label in (0, 1):
        return int(label)
    raise ValueError(f"invalid label {label!r}")


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[gold][pred]`` with classes (NOT, OFF)."""

    counts: tuple

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def row_sums(self):
        return tuple(sum(r) for r in self.counts)

    def col_sums(self):
        return tuple(self.counts[0][j] + self.counts[1][j] for j in range(2))


def confusion(golds, preds) -> ConfusionMatrix:
    golds, preds = list(golds), list(preds)
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels but {len(preds)} predictions")
    c = [[0, 0], [0, 0]]
    for g, p in zip(golds, preds):
        c[_as_index(g)][_as_index(p)] += 1
    return ConfusionMatrix((tuple(c[0]), tuple(c[1])))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    macro_precision: float
    macro_recall: float
    macro_f1: float
    degenerate: bool = False


def _ratio(num: int, den: int, flags: list) -> float:
    if den == 0:
        flags.append(True)
        return 0.0
    return 100.0 * num / den


def metrics(cm: ConfusionMatrix) -> Metrics:
    flags: list = []
    c = cm.counts
    n = cm.total
    acc = _ratio(c[0][0] + c[1][1], n, flags)
    prec, rec, f1 = [], [], []
    for k in range(2):
        tp = c[k][k]
        p = _ratio(tp, c[0][k] + c[1][k], flags)
        r = _ratio(tp, c[k][0] + c[k][1], flags)
        prec.append(p)
        rec.append(r)
        if p + r == 0:
            flags.append(True)
            f1.append(0.0)
        else:
            f1.append(2 * p * r / (p + r))
    return Metrics(acc, tuple(prec), tuple(rec), tuple(f1), sum(prec) / 2, sum(rec) / 2,
                   sum(f1) / 2, bool(flags))


def perplexity(model: EncoderModel, examples, rng: RngStream, rate: float = 0.15,
               batch_size: int = 64) -> float:
    """exp(mean cross-entropy over masked positions), accumulated in float64.

    Masking is static per example id under ``rng`` so repeated evaluations
    of different checkpoints see the same masked positions.
    """
    from .training import mask_tokens

    if model.head != "mlm":
        raise ValueError(f"perplexity needs an mlm head, model carries {model.head!r}")
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            masked, targets = zip(*(mask_tokens(ex.encoded, rate, "static", rng, key=ex.id,
                                                vocab_size=model.config.vocab_size)
                                    for ex in batch))
            ids, mask, segs = collate(masked)
            tgt = np.stack(targets)[:, : ids.shape[1]].reshape(-1)
            rows = np.nonzero(tgt != T.IGNORE_INDEX)[0]
            if len(rows) == 0:
                continue
            hidden = T.reshape(model.forward(ids, mask, segs, "eval"), (-1, model.config.hidden))
            logits = mlm_logits(model, hidden[rows]).data.astype(np.float64)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total -= float(logp[np.arange(len(rows)), tgt[rows]].sum())
            count += len(rows)
    if count == 0:
        raise ValueError("no masked positions: perplexity is undefined")
    return math.exp(total / count)


# ---------------------------------------------------------------- reporting


@dataclass
class ModelReport:
    name: str
    dev_accuracy: float
    test: Metrics
    epochs: int
    cm: ConfusionMatrix | None = None
    misclassified: list = field(default_factory=list)


COLUMNS = ("Model", "ACC_DEV", "ACC_TST", "P_TST", "R_TST", "F1_TST", "Epochs")


def render_table(rows) -> str:
    """Fixed-width results table; P/R/F1 are macro averages."""
    width = max([len(COLUMNS[0])] + [len(r.name) for r in rows])
    head = f"{COLUMNS[0]:<{width}} | " + " | ".join(f"{c:>7}" for c in COLUMNS[1:])
    lines = [head, "-" * len(head)]
    for r in rows:
        vals = (r.dev_accuracy, r.test.accuracy, r.test.macro_precision, r.test.macro_recall,
                r.test.macro_f1)
        lines.append(f"{r.name:<{width}} | " + " | ".join(f"{v:>7.3f}" for v in vals)
                     + f" | {r.epochs:>7d}")
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix, title: str = "") -> str:
    lines = [f"Confusion matrix{(' - ' + title) if title else ''} (rows gold, columns predicted)",
             f"{'':>6} {'NOT':>7} {'OFF':>7}"]
    for name, row in zip(CLASSES, cm.counts):
        lines.append(f"{name:>6} {row[0]:>7d} {row[1]:>7d}")
    return "\n".join(lines) + "\n"


def misclassified(ids, texts, golds, preds) -> list:
    """(id, text, predicted, true) rows where prediction != gold."""
    return [(i, t, CLASSES[_as_index(p)], CLASSES[_as_index(g)])
            for i, t, g, p in zip(ids, texts, golds, preds) if _as_index(g) != _as_index(p)]


def render_misclassified(rows, limit: int | None = 20) -> str:
    lines = ["Misclassified examples", "Id\tTweet\tPL\tTL"]
    for i, text, pl, tl in (rows if limit is None else rows[:limit]):
        lines.append(f"{i}\t{text}\t{pl}\t{tl}")
    return "\n".join(lines) + "\n"


def report(results, detail: str | None = None) -> str:
    """Results table plus, for ``detail`` (default: the last row), its confusion
    matrix and misclassified listing."""
    results = list(results)
    out = [render_table(results)]
    if results:
        pick = next((r for r in results if r.name == detail), results[-1])
        if pick.cm is not None:
            out.append("\n" + render_confusion(pick.cm, pick.name))
        if pick.misclassified:
            out.append("\n" + render_misclassified(pick.misclassified))
    return "".join(out)


def metrics_tsv(results) -> str:
    lines = ["model\tmetric\tvalue\n"]
    for r in results:
        m = r.test
        vals = {"acc_dev": r.dev_accuracy, "acc_tst": m.accuracy, "p_tst": m.macro_precision,
                "r_tst": m.macro_recall, "f1_tst": m.macro_f1, "epochs": r.epochs}
        lines += [f"{r.name}\t{k}\t{v!r}\n" for k, v in vals.items()]
    return "".join(lines)


def write_predictions(rows, path) -> None:
    """CSV ``id,label`` (label is NOT/OFF)."""
    lines = ["id,label\n"] + [f"{i},{CLASSES[_as_index(l)]}\n" for i, l in rows]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_predictions(path) -> dict:
    out = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines[1:], 2):
        i, sep, label = line.rpartition(",")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected id,label")
        out[i] = CLASSES[_as_index(label)]
    return out


# Two prediction sets over the same gold labels where accuracy and macro-F1
# disagree: the majority-class predictor wins on accuracy (80 vs 70) but loses
# on macro-F1 (44.444 vs 67.033) because it never finds an OFF tweet.
DIVERGENCE_EXAMPLE = {
    "gold": ("NOT",) * 8 + ("OFF",) * 2,
    "majority": ("NOT",) * 10,
    "recall_oriented": ("NOT",) * 5 + ("OFF",) * 3 + ("OFF",) * 2,
}


def rank_divergence(gold, preds_a, preds_b) -> bool:
    """True when accuracy and macro-F1 order the two prediction sets oppositely."""
    ma, mb = metrics(confusion(gold, preds_a)), metrics(confusion(gold, preds_b))
    return (ma.accuracy - mb.accuracy) * (ma.macro_f1 - mb.macro_f1) < 0
