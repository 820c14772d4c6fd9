"""Representation-concatenation ensemble.

Each member encodes the tweet; the CLS states are concatenated in member
order, passed through dropout, and decoded by one linear layer into two
logits.  Members are fine-tuned jointly unless ``freeze_members`` is set.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import (INIT_STD, EncoderModel, checkpoint_files, collate, predict_class,
                      read_weights, sentence_representation, weight_files)
from .rng import RngStream
from .training import INDIVIDUAL_MODELS, Adam, CheckpointStore, StageResult, best_epoch

log = logging.getLogger(__name__)

DEFAULT_MEMBERS = INDIVIDUAL_MODELS
CONFIGURATIONS = {"E": (2e-5, 0.1), "E_1": (1e-5, 0.1), "E_2": (1e-5, 0.5)}


class EnsembleConfigError(ValueError):
    pass


class EnsembleModel:
    def __init__(self, members, names, dropout: float, weight: T.Tensor, bias: T.Tensor,
                 freeze_members: bool = False):
        if len(members) != len(names):
            raise EnsembleConfigError("one name per member required")
        self.members = list(members)
        self.names = list(names)
        self.dropout = dropout
        self.weight = weight
        self.bias = bias
        self.freeze_members = freeze_members
        if weight.shape != (2, self.concat_dim) or bias.shape != (2,):
            raise EnsembleConfigError(f"decoder shape {weight.shape} does not match "
                                      f"concat_dim {self.concat_dim}")

    @property
    def concat_dim(self) -> int:
        return sum(m.config.hidden for m in self.members)

    def decoder_params(self) -> dict:
        return {"decoder.weight": self.weight, "decoder.bias": self.bias}

    def trainable(self) -> list:
        params = list(self.decoder_params().values())
        if not self.freeze_members:
            for m in self.members:
                params += list(m.encoder_parameters().values())
        return params

    def member_checksums(self) -> list:
        return [m.checksum() for m in self.members]

    def representations(self, ids, mask, segs, mode: str = "eval", rng=None) -> T.Tensor:
        """Concatenated member CLS states [B, concat_dim]."""
        member_mode = "eval" if self.freeze_members else mode
        reps = []
        for m in self.members:
            if self.freeze_members:
                with T.no_grad():
                    h = m.forward(ids, mask, segs, "eval")
            else:
                h = m.forward(ids, mask, segs, member_mode, rng)
            reps.append(sentence_representation(h))
        return T.concat(reps, axis=-1)

    def decode(self, rep: T.Tensor, mode: str = "eval", rng=None) -> T.Tensor:
        return T.linear(T.dropout(rep, self.dropout, mode, rng), self.weight, self.bias)

    def forward(self, ids, mask, segs, mode: str = "eval", rng=None) -> T.Tensor:
        return self.decode(self.representations(ids, mask, segs, mode, rng), mode, rng)


def build_ensemble(members, names=None, dropout: float = 0.1, rng: RngStream | None = None,
                   freeze_members: bool = False, expected: int | None = 6) -> EnsembleModel:
    """Decoder initialised like other linear layers: Normal(0, 0.02) truncated, zero bias."""
    names = list(names or DEFAULT_MEMBERS[: len(members)])
    if expected is not None and len(members) != expected:
        raise EnsembleConfigError(f"ensemble expects {expected} members, got {len(members)}")
    dim = sum(m.config.hidden for m in members)
    rng = rng or RngStream(42)
    w = T.Tensor(rng.fork("init", "decoder.weight").truncated_normal((2, dim), INIT_STD),
                 requires_grad=True)
    b = T.Tensor(np.zeros(2), requires_grad=True)
    return EnsembleModel(members, names, dropout, w, b, freeze_members)


def ensemble_forward(model: EnsembleModel, seq, mode: str = "eval", rng=None) -> T.Tensor:
    """Two logits for one EncodedSequence."""
    ids, mask, segs = collate([seq], trim=False)
    return T.reshape(model.forward(ids, mask, segs, mode, rng), (2,))


def _logits(model: EnsembleModel, examples, batch_size: int = 64, cache=None) -> np.ndarray:
    outs = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            if cache is not None:
                rep = T.Tensor(cache[start:start + batch_size], dtype=model.weight.dtype)
            else:
                ids, mask, segs = collate([ex.encoded for ex in examples[start:start + batch_size]])
                rep = model.representations(ids, mask, segs, "eval")
            outs.append(model.decode(rep, "eval").data)
    return np.concatenate(outs) if outs else np.zeros((0, 2))


def _frozen_cache(model: EnsembleModel, examples, batch_size: int = 64) -> np.ndarray:
    chunks = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            ids, mask, segs = collate([ex.encoded for ex in examples[start:start + batch_size]])
            chunks.append(model.representations(ids, mask, segs, "eval").data)
    return np.concatenate(chunks)


def ensemble_accuracy(model: EnsembleModel, examples, cache=None) -> float:
    gold = np.array([int(ex.target) for ex in examples])
    return 100.0 * float(np.mean(predict_class(_logits(model, examples, cache=cache)) == gold))


@dataclass(frozen=True)
class EnsembleSpec:
    name: str = "E"
    lr: float = 2e-5
    lr_scale: float = 1.0
    dropout: float = 0.1
    epochs: int = 10
    seed: int = 42
    batch_size: int = 16
    freeze_members: bool = False

    @classmethod
    def configuration(cls, name: str, **kw) -> EnsembleSpec:
        lr, p = CONFIGURATIONS[name]
        return cls(name=name, lr=lr, dropout=p, **kw)


def _snapshot(model: EnsembleModel) -> dict:
    snap = {"decoder": [model.weight.data.copy(), model.bias.data.copy()]}
    if not model.freeze_members:
        snap["members"] = [{k: p.data.copy() for k, p in m.params.items()} for m in model.members]
    return snap


def _restore(model: EnsembleModel, snap: dict) -> None:
    model.weight.data[...] = snap["decoder"][0]
    model.bias.data[...] = snap["decoder"][1]
    for m, params in zip(model.members, snap.get("members", [])):
        for k, arr in params.items():
            m.params[k].data[...] = arr


def train_ensemble(spec: EnsembleSpec, members, train, dev, names=None,
                   expected_members: int | None = 6):
    """Fine-tune an ensemble on ``train``; returns (best-epoch model, StageResult).

    Members are deep-copied first so the individual checkpoints stay intact.
    The StageResult has no checkpoint yet; see :func:`save_ensemble`.
    """
    if not train:
        raise ValueError("ensemble training split is empty")
    if not dev:
        raise ValueError("ensemble dev split is empty")
    from .encoder import swap_head

    rng = RngStream(spec.seed).fork("ensemble", spec.name)
    copies = [swap_head(m, m.head, rng) for m in members]
    model = build_ensemble(copies, names, spec.dropout, rng, spec.freeze_members, expected_members)
    opt = Adam(model.trainable(), lr=spec.lr * spec.lr_scale)
    train_cache = _frozen_cache(model, train) if spec.freeze_members else None
    dev_cache = _frozen_cache(model, dev) if spec.freeze_members else None
    targets = np.array([int(ex.target) for ex in train])

    trace, losses, hashes, best_snap = [], [], [], None
    for epoch in range(1, spec.epochs + 1):
        order = rng.fork("shuffle", epoch).permutation(len(train))
        total = 0.0
        for bi, start in enumerate(range(0, len(train), spec.batch_size)):
            idx = order[start:start + spec.batch_size]
            drop_rng = rng.fork("dropout", epoch, bi)
            if train_cache is not None:
                rep = T.Tensor(train_cache[idx], dtype=model.weight.dtype)
            else:
                ids, mask, segs = collate([train[i].encoded for i in idx])
                rep = model.representations(ids, mask, segs, "train", drop_rng)
            loss = T.cross_entropy(model.decode(rep, "train", drop_rng), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        acc = ensemble_accuracy(model, dev, dev_cache)
        trace.append(acc)
        losses.append(total / len(train))
        hashes.append(ensemble_hash(model))
        if best_epoch(trace, False) == epoch:
            best_snap = _snapshot(model)
        log.info("%s epoch %d loss %.4f dev_accuracy %.3f", spec.name, epoch, losses[-1], acc)
    _restore(model, best_snap)
    k = best_epoch(trace, False)
    result = StageResult(spec.name, spec.name, "ENS", hashes[k - 1], Path(), "dev_accuracy",
                         trace, losses, hashes, k)
    return model, result


def predict(model: EnsembleModel, items) -> list:
    """Eval-mode labels for ``(id, EncodedSequence)`` pairs or LabeledExamples."""
    items = [(it.id, it.encoded) if hasattr(it, "encoded") else it for it in items]
    if not items:
        return []
    out = []
    for start in range(0, len(items), 64):
        chunk = items[start:start + 64]
        ids, mask, segs = collate([seq for _, seq in chunk])
        with T.no_grad():
            logits = model.forward(ids, mask, segs, "eval")
        out += [(i, "OFF" if p else "NOT") for (i, _), p in zip(chunk, predict_class(logits))]
    return out


# ---------------------------------------------------------------- checkpoints


def _ensemble_tsv(model: EnsembleModel, member_hashes) -> bytes:
    lines = [f"members\t{len(model.members)}"]
    for i, (name, h) in enumerate(zip(model.names, member_hashes)):
        lines += [f"member.{i}.name\t{name}", f"member.{i}.hash\t{h}"]
    lines += [f"dropout\t{model.dropout!r}",
              f"freeze_members\t{'true' if model.freeze_members else 'false'}"]
    return ("\n".join(lines) + "\n").encode()


def _files(model: EnsembleModel, member_hashes) -> dict:
    return {"ensemble.tsv": _ensemble_tsv(model, member_hashes),
            **weight_files(model.decoder_params())}


def ensemble_hash(model: EnsembleModel) -> str:
    files = _files(model, model.member_checksums())
    h = hashlib.sha256()
    for name in ("ensemble.tsv", "manifest.tsv", "weights.bin"):
        h.update(name.encode() + b"\0" + files[name])
    return h.hexdigest()


def save_ensemble(model: EnsembleModel, directory, store: CheckpointStore) -> str:
    """Members go to the content-addressed store; the directory references them by hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = [store.put_files(checkpoint_files(m)) for m in model.members]
    for name, data in _files(model, hashes).items():
        (directory / name).write_bytes(data)
    return ensemble_hash(model)


def load_ensemble(directory, store: CheckpointStore) -> EnsembleModel:
    directory = Path(directory)
    kv = dict(line.split("\t", 1) for line in (directory / "ensemble.tsv").read_text().splitlines())
    n = int(kv["members"])
    names = [kv[f"member.{i}.name"] for i in range(n)]
    members = [store.get(kv[f"member.{i}.hash"]) for i in range(n)]
    params = read_weights((directory / "manifest.tsv").read_bytes(),
                          (directory / "weights.bin").read_bytes())
    return EnsembleModel(members, names, float(kv["dropout"]), params["decoder.weight"],
                         params["decoder.bias"], kv["freeze_members"] == "true")
