"""Adam, MLM masking, the epoch loop, and the staged fine-tuning DAG.

Stage DAG per variant (GEN is the generic "default model" stand-in)::

    GEN -> FT
    GEN -> PT -> PT-C -> PT-C-C
               -> PT-R -> PT-R-C
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, EncoderModel, checkpoint_files, checkpoint_hash, classify,
                      collate, init_model, load_checkpoint, mlm_logits, predict_class, regress,
                      sentence_representation, swap_head)
from .rng import RngStream
from .tokenizer import MASK, NUM_SPECIAL, EncodedSequence

log = logging.getLogger(__name__)

STAGE_OBJECTIVE = {"GEN": "mlm", "PT": "mlm", "FT": "classification", "PT-R": "regression",
                   "PT-C": "classification", "PT-R-C": "classification",
                   "PT-C-C": "classification"}
STAGE_PARENT = {"GEN": None, "FT": "GEN", "PT": "GEN", "PT-R": "PT", "PT-C": "PT",
                "PT-R-C": "PT-R", "PT-C-C": "PT-C"}
INDIVIDUAL_MODELS = ("A-FT", "B-FT", "A-PT-C-C", "A-PT-R-C", "B-PT-C-C", "B-PT-R-C")


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` (arrays or Tensors)."""
    arrays = [p.data if isinstance(p, T.Tensor) else p for p in params]
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    if len(grads) != len(arrays):
        raise ValueError(f"{len(arrays)} parameters but {len(grads)} gradients")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {a.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        a -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)


class Adam:
    def __init__(self, params, lr: float, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        if self.state.lr == 0.0:
            return
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------- MLM masking


def mask_tokens(seq: EncodedSequence, rate: float, policy: str, rng: RngStream, *,
                key="", epoch: int = 0, vocab_size: int | None = None):
    """BERT-style 80/10/10 masking of non-special, non-PAD tokens.

    Static policy draws from ``rng.fork("mask", key)``, so an example is
    masked identically every epoch; dynamic also folds in ``epoch``.
    Returns the masked sequence and targets (original id at selected
    positions, ``IGNORE_INDEX`` elsewhere).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mask rate must be in [0, 1), got {rate}")
    if policy not in ("static", "dynamic"):
        raise ValueError(f"unknown masking policy {policy!r}")
    ids = np.asarray(seq.ids, dtype=np.int64)
    stream = rng.fork("mask", key) if policy == "static" else rng.fork("mask", key, epoch)
    n = len(ids)
    u_select, u_kind, u_tok = stream.uniform(n), stream.uniform(n), stream.uniform(n)
    eligible = (ids >= NUM_SPECIAL) & (np.asarray(seq.attention_mask) == 1)
    selected = eligible & (u_select < rate)
    targets = np.full(n, T.IGNORE_INDEX, dtype=np.int64)
    targets[selected] = ids[selected]
    out = ids.copy()
    out[selected & (u_kind < 0.8)] = MASK
    if vocab_size is not None and vocab_size > NUM_SPECIAL:
        rand = selected & (u_kind >= 0.8) & (u_kind < 0.9)
        out[rand] = NUM_SPECIAL + (u_tok[rand] * (vocab_size - NUM_SPECIAL)).astype(np.int64)
    return EncodedSequence(tuple(int(i) for i in out), seq.attention_mask, seq.segment_ids), targets


# ---------------------------------------------------------------- forward / loss


def _mlm_batch(model, batch, rng, mode, epoch, rate):
    cfg = model.config
    masked, targets = zip(*(mask_tokens(ex.encoded, rate, cfg.masking_policy, rng, key=ex.id,
                                        epoch=epoch, vocab_size=cfg.vocab_size) for ex in batch))
    ids, mask, segs = collate(masked)
    tgt = np.stack(targets)[:, : ids.shape[1]]
    return ids, mask, segs, tgt


def batch_loss(model: EncoderModel, batch, objective: str, mode: str, rng: RngStream,
               epoch: int = 0, mask_rate: float = 0.15, dropout_rng: RngStream | None = None):
    """(loss tensor, weight) for one mini-batch; weight is #examples or #masked tokens."""
    if objective == "mlm":
        ids, mask, segs, tgt = _mlm_batch(model, batch, rng, mode, epoch, mask_rate)
        rows = np.nonzero(tgt.reshape(-1) != T.IGNORE_INDEX)[0]
        if len(rows) == 0:
            return None, 0
        hidden = model.forward(ids, mask, segs, mode, dropout_rng)
        flat = T.reshape(hidden, (-1, model.config.hidden))
        logits = mlm_logits(model, flat[rows])
        return T.cross_entropy(logits, tgt.reshape(-1)[rows]), len(rows)
    ids, mask, segs = collate([ex.encoded for ex in batch])
    rep = sentence_representation(model.forward(ids, mask, segs, mode, dropout_rng))
    if objective == "regression":
        return T.mse(regress(model, rep), np.array([ex.target for ex in batch])), len(batch)
    if objective == "classification":
        return T.cross_entropy(classify(model, rep), [ex.target for ex in batch]), len(batch)
    raise ValueError(f"unknown objective {objective!r}")


def _check_objective(model: EncoderModel, objective: str):
    if model.head != objective:
        raise StageError(f"objective {objective!r} does not match model head {model.head!r}")


def run_epoch(model: EncoderModel, examples, objective: str, optimizer: Adam | None = None,
              mode: str = "train", rng: RngStream | None = None, *, epoch: int = 0,
              batch_size: int = 16, mask_rate: float = 0.15) -> float:
    """One pass over ``examples``; returns the weighted mean loss.

    Train mode shuffles with ``rng.fork("shuffle", epoch)`` and steps the
    optimizer after every batch.  Eval mode keeps file order and never
    updates.
    """
    _check_objective(model, objective)
    rng = rng or RngStream(0)
    n = len(examples)
    order = rng.fork("shuffle", epoch).permutation(n) if mode == "train" else np.arange(n)
    total, weight = 0.0, 0
    for bi, start in enumerate(range(0, n, batch_size)):
        batch = [examples[i] for i in order[start:start + batch_size]]
        if mode == "train":
            loss, w = batch_loss(model, batch, objective, mode, rng, epoch, mask_rate,
                                 rng.fork("dropout", epoch, bi))
            if loss is None:
                continue
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        else:
            with T.no_grad():
                loss, w = batch_loss(model, batch, objective, mode, rng, epoch, mask_rate)
            if loss is None:
                continue
        total += float(loss.data) * w
        weight += w
    return total / weight if weight else 0.0


def sentence_outputs(model: EncoderModel, examples, batch_size: int = 64) -> np.ndarray:
    """Eval-mode head outputs: [N, 2] logits (classification) or [N] scores (regression)."""
    outs = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            ids, mask, segs = collate([ex.encoded for ex in batch])
            rep = sentence_representation(model.forward(ids, mask, segs, "eval"))
            out = classify(model, rep) if model.head == "classification" else regress(model, rep)
            outs.append(out.data)
    if not outs:
        return np.zeros((0, 2) if model.head == "classification" else (0,))
    return np.concatenate(outs)


def predictions(model: EncoderModel, examples) -> np.ndarray:
    out = sentence_outputs(model, examples)
    if model.head == "regression":
        return (out > 0.5).astype(np.int64)
    return predict_class(out)


def dev_accuracy(model: EncoderModel, examples) -> float:
    """Percent correct; regression outputs and targets are both thresholded at 0.5."""
    if not examples:
        raise StageError("dev set is empty")
    gold = np.array([int(ex.target > 0.5) if isinstance(ex.target, float) else int(ex.target)
                     for ex in examples])
    return 100.0 * float(np.mean(predictions(model, examples) == gold))


# ---------------------------------------------------------------- stages


class CheckpointStore:
    """Content-addressed checkpoint directories: ``root/<sha256>/``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / digest

    def __contains__(self, digest: str) -> bool:
        return (self.path(digest) / "weights.bin").is_file()

    def put_files(self, files: dict) -> str:
        digest = checkpoint_hash(files)
        d = self.path(digest)
        if digest not in self:
            d.mkdir(parents=True, exist_ok=True)
            for name, data in files.items():
                (d / name).write_bytes(data)
        return digest

    def put(self, model: EncoderModel) -> str:
        return self.put_files(checkpoint_files(model))

    def get(self, digest: str) -> EncoderModel:
        if digest not in self:
            raise StageError(f"checkpoint {digest} not found in {self.root}")
        model = load_checkpoint(self.path(digest))
        actual = model.checksum()
        if actual != digest:
            raise StageError(f"checkpoint {digest} is corrupt (content hash {actual})")
        return model


@dataclass(frozen=True)
class StageSpec:
    stage: str
    variant: str
    parent: Optional[str] = None
    epochs: int = 10
    lr: float = 2e-5
    lr_scale: float = 1.0
    dropout: float = 0.1
    batch_size: int = 16
    seed: int = 42
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.stage not in STAGE_OBJECTIVE:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.variant not in ("A", "B"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.parent is None and self.stage not in ("GEN", "FT", "PT"):
            raise ValueError(f"stage {self.stage} needs a parent checkpoint")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def name(self) -> str:
        return f"{self.variant}-{self.stage}"

    @property
    def objective(self) -> str:
        return STAGE_OBJECTIVE[self.stage]

    @property
    def selection(self) -> str:
        return "perplexity" if self.objective == "mlm" else "dev_accuracy"

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale


@dataclass
class StageResult:
    name: str
    stage: str
    variant: str
    checkpoint: str
    path: Path
    metric: str
    trace: list
    losses: list
    epoch_hashes: list
    best_epoch: int
    parent: Optional[str] = None

    @property
    def best_metric(self) -> float:
        return self.trace[self.best_epoch - 1]


def best_epoch(trace, lower_is_better: bool) -> int:
    """1-based index of the optimum; ties go to the earliest epoch."""
    if not trace:
        raise ValueError("empty metric trace")
    best = 0
    for i, v in enumerate(trace):
        if (v < trace[best]) if lower_is_better else (v > trace[best]):
            best = i
    return best + 1


def run_stage(spec: StageSpec, train, dev, store: CheckpointStore,
              init_config: EncoderConfig | None = None) -> StageResult:
    """Train one stage and persist its best-epoch checkpoint.

    ``train``/``dev`` are lists of LabeledExample.  Without a parent the
    model is initialised from ``init_config``.
    """
    from .evaluation import perplexity

    rng = RngStream(spec.seed).fork("stage", spec.variant, spec.stage)
    if spec.parent is not None:
        model = store.get(spec.parent)
    else:
        if init_config is None:
            raise StageError(f"{spec.name}: no parent and no config to initialise from")
        model = init_model(init_config, rng.fork("init"), head="none")
    if model.config.variant != spec.variant:
        raise StageError(f"{spec.name}: parent is variant {model.config.variant}")
    model = swap_head(model, spec.objective, rng.fork("head"))
    model = EncoderModel(replace(model.config, dropout=spec.dropout), model.params, model.head)
    if not dev:
        raise StageError(f"{spec.name}: dev set is empty but {spec.selection} needs one")

    optimizer = Adam(model.parameters(), lr=spec.effective_lr)
    eval_rng = RngStream(spec.seed).fork("eval-mask")
    trace, losses, hashes, best_files = [], [], [], None
    lower = spec.selection == "perplexity"
    for epoch in range(1, spec.epochs + 1):
        loss = run_epoch(model, train, spec.objective, optimizer, "train", rng, epoch=epoch,
                         batch_size=spec.batch_size, mask_rate=spec.mask_rate)
        if lower:
            metric = perplexity(model, dev, eval_rng, rate=spec.mask_rate)
        else:
            metric = dev_accuracy(model, dev)
        files = checkpoint_files(model)
        trace.append(metric)
        losses.append(loss)
        hashes.append(checkpoint_hash(files))
        if best_epoch(trace, lower) == epoch:
            best_files = files
        log.info("%s epoch %d loss %.4f %s %.3f", spec.name, epoch, loss, spec.selection, metric)
    digest = store.put_files(best_files)
    return StageResult(spec.name, spec.stage, spec.variant, digest, store.path(digest),
                       spec.selection, trace, losses, hashes, best_epoch(trace, lower), spec.parent)


# ---------------------------------------------------------------- manifest

MANIFEST_HEADER = "stage\tvariant\tepoch\tdev_metric\tcheckpoint_hash\ttrain_loss\n"


def manifest_rows(result: StageResult) -> str:
    return "".join(f"{result.stage}\t{result.variant}\t{e}\t{m!r}\t{h}\t{l!r}\n"
                   for e, (m, h, l) in enumerate(zip(result.trace, result.epoch_hashes,
                                                     result.losses), 1))


def append_manifest(path, result: StageResult) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write(MANIFEST_HEADER)
        fh.write(manifest_rows(result))


# ---------------------------------------------------------------- pipeline


def stage_spec(config, stage: str, variant: str, parent: Optional[str]) -> StageSpec:
    epochs = config["train.gen_epochs"] if stage == "GEN" else config["train.epochs"]
    return StageSpec(stage, variant, parent, epochs=epochs, lr=config["train.lr"],
                     lr_scale=config["train.lr_scale"],
                     dropout=config[f"encoder.{variant}.dropout"],
                     batch_size=config["train.batch_size"], seed=config["seed"],
                     mask_rate=config["train.mask_rate"])


def run_chain(config, prepared, variant: str, store: CheckpointStore, manifest=None) -> dict:
    """All stages for one variant, in DAG order; returns name -> StageResult."""
    init = config.encoder_config(variant, len(prepared.vocab))
    results = {}
    order = ["FT", "PT", "PT-R", "PT-C", "PT-R-C", "PT-C-C"]
    if not config["train.from_scratch"]:
        order.insert(0, "GEN")
    for stage in order:
        parent_stage = STAGE_PARENT[stage]
        parent_result = results.get(f"{variant}-{parent_stage}") if parent_stage else None
        parent = parent_result.checkpoint if parent_result else None
        spec = stage_spec(config, stage, variant, parent)
        train, dev = prepared.encoded(stage)
        try:
            result = run_stage(spec, train, dev, store, init_config=init)
        except Exception as exc:
            raise StageError(f"stage {spec.name} failed: {exc}") from exc
        results[spec.name] = result
        if manifest is not None:
            append_manifest(manifest, result)
    return results


def run_pipeline(config, prepared, store: CheckpointStore, manifest=None) -> dict:
    """Both variant chains; returns every StageResult keyed by name.

    The six individual models are ``INDIVIDUAL_MODELS``.
    """
    results = {}
    for variant in ("A", "B"):
        results.update(run_chain(config, prepared, variant, store, manifest))
    return results
