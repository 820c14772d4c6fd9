"""End-to-end orchestration: data directory preparation, the stage pipeline,
the three ensemble configurations, reports and the hyperparameter sweep.

Working directory layout::

    data/    sources, vocab.tsv, dedup_report.tsv, splits/<STAGE>.tsv
    store/   content-addressed checkpoints
    out/     run_manifest.tsv, models.tsv, ensembles/<name>/, report.txt,
             metrics.tsv, predictions_<name>.csv
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig
from .ensemble import (CONFIGURATIONS, EnsembleSpec, load_ensemble, predict, save_ensemble,
                       train_ensemble)
from .evaluation import (ModelReport, confusion, metrics, metrics_tsv, misclassified, report,
                         write_predictions)
from .rng import RngStream
from .synthetic import generate
from .tokenizer import Vocabulary, build_vocab
from .training import (INDIVIDUAL_MODELS, CheckpointStore, append_manifest, predictions,
                       run_pipeline)

log = logging.getLogger(__name__)

SOURCE_FILES = {
    "olid_train": "olid_train.tsv",
    "olid_test": "olid_test.tsv",
    "solid_text": "solid_text.tsv",
    "solid_labels": "solid_labels.tsv",
    "task_test": "task_test.tsv",
    "task_gold": "task_test_labels.tsv",
    "generic": "generic.txt",
}
SPLIT_STAGES = D.STAGES + ("GEN",)
GENERIC_HOLDOUT = 0.05


# ---------------------------------------------------------------- data preparation


def write_synthetic_sources(out: Path, n: int, dup_rate: float, off_rate: float, seed: int):
    corpus = generate(n, dup_rate, off_rate, seed)
    D.write_olid(corpus.olid_train, out / SOURCE_FILES["olid_train"])
    D.write_olid(corpus.olid_test, out / SOURCE_FILES["olid_test"])
    D.write_solid(corpus.solid, out / SOURCE_FILES["solid_text"], out / SOURCE_FILES["solid_labels"])
    D.write_texts(corpus.task_test, out / SOURCE_FILES["task_test"], out / SOURCE_FILES["task_gold"])
    (out / SOURCE_FILES["generic"]).write_text("".join(t + "\n" for t in corpus.generic),
                                               encoding="utf-8", newline="\n")


def copy_sources(out: Path, paths: dict):
    for key, src in paths.items():
        if src is not None:
            (out / SOURCE_FILES[key]).write_bytes(Path(src).read_bytes())


@dataclass
class Sources:
    olid_train: list
    olid_test: list
    solid: list
    task_test: list = field(default_factory=list)
    gold: dict = field(default_factory=dict)
    generic: list = field(default_factory=list)

    @classmethod
    def load(cls, data_dir) -> Sources:
        d = Path(data_dir)
        olid_train = D.load_olid(d / SOURCE_FILES["olid_train"])
        olid_test = D.load_olid(d / SOURCE_FILES["olid_test"])
        solid = D.load_solid(d / SOURCE_FILES["solid_text"], d / SOURCE_FILES["solid_labels"])
        task = D.load_texts(d / SOURCE_FILES["task_test"]) if (d / SOURCE_FILES["task_test"]).exists() else []
        gold = D.load_gold(d / SOURCE_FILES["task_gold"]) if (d / SOURCE_FILES["task_gold"]).exists() else {}
        gpath = d / SOURCE_FILES["generic"]
        generic = gpath.read_text(encoding="utf-8").splitlines() if gpath.exists() else []
        return cls(olid_train, olid_test, solid, task, gold, generic)

    def texts(self) -> dict:
        out = D.qualified_texts(self.olid_train, self.olid_test, self.solid, self.task_test)
        out.update({f"generic:{i}": t for i, t in enumerate(self.generic)})
        return out


def generic_split(sources: Sources, seed: int) -> D.SplitResult:
    rows = [D.SplitRow(f"generic:{i}", t) for i, t in enumerate(sources.generic)]
    perm = RngStream(seed).fork("split", "generic").permutation(len(rows))
    rows = [rows[i] for i in perm]
    hold = max(D.floor_fraction(GENERIC_HOLDOUT, len(rows)), 1) if rows else 0
    return D.SplitResult("GEN", rows[hold:], rows[:hold], {"train": len(rows) - hold, "dev": hold})


def prepare_data(out, config: RunConfig, sources: dict | None = None, synthetic: dict | None = None):
    """Write sources, dedup report, split manifests and vocabulary into ``out``."""
    out = Path(out)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    seed = config["seed"]
    if synthetic is not None:
        write_synthetic_sources(out, synthetic["n"], synthetic["dup_rate"], synthetic["off_rate"], seed)
    else:
        copy_sources(out, sources)
    src = Sources.load(out)
    kept, removed = D.dedup(src.solid)
    (out / "dedup_report.tsv").write_text(
        "source\trows\tduplicates_removed\tkept\n"
        f"solid\t{len(src.solid)}\t{removed}\t{len(kept)}\n", encoding="utf-8", newline="\n")
    results = {}
    for stage in D.STAGES:
        plan = D.SplitPlan(stage, pt_holdout_fraction=config["data.pt_holdout"], seed=seed)
        results[stage] = D.make_split(plan, src.olid_train, src.olid_test, src.solid, src.task_test)
    if src.generic:
        results["GEN"] = generic_split(src, seed)
    for stage, res in results.items():
        D.write_split_manifest(res, out / "splits" / f"{stage}.tsv")
    corpus = [r.text for r in results["PT"].train + results["PT"].dev] + src.generic
    vocab = build_vocab(corpus, config["data.vocab_size"])
    vocab.save(out / "vocab.tsv")
    return {"duplicates_removed": removed, "vocab_size": len(vocab),
            "splits": {k: (len(v.train), len(v.dev)) for k, v in results.items()}}


class PreparedData:
    """Sources + vocabulary + split manifests of a data directory, encoded on demand."""

    def __init__(self, data_dir, config: RunConfig):
        self.dir = Path(data_dir)
        self.config = config
        self.sources = Sources.load(self.dir)
        self.vocab = Vocabulary.load(self.dir / "vocab.tsv")
        self.texts = self.sources.texts()
        self._cache: dict = {}

    def split(self, stage: str) -> D.SplitResult:
        path = self.dir / "splits" / f"{stage}.tsv"
        if not path.exists():
            raise FileNotFoundError(f"split manifest {path} not found (run prepare-data)")
        return D.read_split_manifest(path, stage, self.texts)

    def has_split(self, stage: str) -> bool:
        return (self.dir / "splits" / f"{stage}.tsv").exists()

    def encoded(self, stage: str):
        """(train, dev) LabeledExample lists; PT-R/PT-C train honours data.stage2_fraction."""
        if stage not in self._cache:
            res = self.split(stage)
            ml = self.config["data.max_length"]
            train = D.encode_rows(res.train, self.vocab, ml)
            if stage in ("PT-R", "PT-C"):
                train = train[: D.floor_fraction(self.config["data.stage2_fraction"], len(train))]
            self._cache[stage] = (train, D.encode_rows(res.dev, self.vocab, ml))
        return self._cache[stage]

    def test_examples(self):
        rows = [D.SplitRow(f"task:{t.id}", t.text,
                           D.LABELS.index(self.sources.gold[t.id]) if t.id in self.sources.gold else None)
                for t in self.sources.task_test]
        return D.encode_rows(rows, self.vocab, self.config["data.max_length"])


# ---------------------------------------------------------------- evaluation helpers


def _labelled(examples):
    ex = [e for e in examples if e.target is not None]
    return ex, np.array([int(e.target) for e in ex], dtype=np.int64)


def write_models_tsv(path, rows) -> None:
    lines = ["model\tcheckpoint_hash\tbest_epoch\tdev_metric\n"]
    lines += [f"{r.name}\t{r.checkpoint}\t{r.best_epoch}\t{r.best_metric!r}\n" for r in rows]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def write_lineage_tsv(path, results) -> None:
    """Every stage with its parent checkpoint ("-" when initialised fresh)."""
    lines = ["model\tstage\tvariant\tparent\tcheckpoint_hash\n"]
    lines += [f"{r.name}\t{r.stage}\t{r.variant}\t{r.parent or '-'}\t{r.checkpoint}\n"
              for r in results]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_lineage_tsv(path) -> list:
    rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]]
    return [(name, stage, variant, None if parent == "-" else parent, digest)
            for name, stage, variant, parent, digest in rows]


def read_models_tsv(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        name, digest, epoch, metric = line.split("\t")
        out[name] = (digest, int(epoch), float(metric))
    return out


# ---------------------------------------------------------------- reproduce


def run_ensembles(config: RunConfig, prepared: PreparedData, store: CheckpointStore, out: Path,
                  member_hashes, names, configurations=None, manifest=None):
    """Train each ensemble configuration; returns name -> (model, StageResult, spec)."""
    members = [store.get(h) for h in member_hashes]
    train, dev = prepared.encoded("E")
    results = {}
    for name, (lr, p) in (configurations or CONFIGURATIONS).items():
        spec = EnsembleSpec(name=name, lr=lr, dropout=p, lr_scale=config["train.lr_scale"],
                            epochs=config["ensemble.epochs"], seed=config["seed"],
                            batch_size=config["train.batch_size"],
                            freeze_members=config["ensemble.freeze_members"])
        model, res = train_ensemble(spec, members, train, dev, names,
                                    expected_members=len(member_hashes))
        save_ensemble(model, out / "ensembles" / name, store)
        res.path = out / "ensembles" / name
        if manifest is not None:
            append_manifest(manifest, res)
        results[name] = (model, res, spec)
    return results


def reproduce(workdir, config: RunConfig) -> str:
    """Synthetic data -> six individual models -> E / E_1 / E_2 -> 9-row report."""
    work = Path(workdir)
    data_dir, out = work / "data", work / "out"
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.tsv")
    prepare_data(data_dir, config, synthetic={"n": config["data.synthetic_n"],
                                              "dup_rate": config["data.dup_rate"],
                                              "off_rate": config["data.off_rate"]})
    prepared = PreparedData(data_dir, config)
    if not prepared.sources.generic and not config["train.from_scratch"]:
        config = config.replace(**{"train.from_scratch": True})
    store = CheckpointStore(work / "store")
    manifest = out / "run_manifest.tsv"
    manifest.unlink(missing_ok=True)
    stages = run_pipeline(config, prepared, store, manifest)
    individuals = [stages[n] for n in INDIVIDUAL_MODELS]
    write_models_tsv(out / "models.tsv", individuals)
    write_lineage_tsv(out / "lineage.tsv", stages.values())

    test, gold = _labelled(prepared.test_examples())
    rows = []
    for r in individuals:
        preds = predictions(store.get(r.checkpoint), test)
        rows.append(_model_report(r.name, r.best_metric, r.best_epoch, test, gold, preds,
                                  prepared.texts))
    ensembles = run_ensembles(config, prepared, store, out, [r.checkpoint for r in individuals],
                              list(INDIVIDUAL_MODELS), manifest=manifest)
    for name, (model, res, _) in ensembles.items():
        labelled = predict(model, test)
        preds = np.array([D.LABELS.index(l) for _, l in labelled])
        rows.append(_model_report(name, res.best_metric, res.best_epoch, test, gold, preds,
                                  prepared.texts))
        write_predictions(labelled, out / f"predictions_{name}.csv")
    text = report(rows, detail="E_2")
    (out / "report.txt").write_text(text, encoding="utf-8", newline="\n")
    (out / "metrics.tsv").write_text(metrics_tsv(rows), encoding="utf-8", newline="\n")
    return text


def _model_report(name, dev_acc, epochs, examples, gold, preds, texts) -> ModelReport:
    cm = confusion(gold, preds)
    ids = [e.id for e in examples]
    wrong = misclassified(ids, [texts[i] for i in ids], gold, preds)
    return ModelReport(name, dev_acc, metrics(cm), epochs, cm, wrong)


# ---------------------------------------------------------------- sweep

SWEEP_GRID = {"lr2e-5_p0.1": (2e-5, 0.1), "lr2e-5_p0.5": (2e-5, 0.5),
              "lr1e-5_p0.1": (1e-5, 0.1), "lr1e-5_p0.5": (1e-5, 0.5)}


def sweep(workdir, config: RunConfig) -> str:
    """Ensemble lr x dropout grid over the six members recorded in ``out/models.tsv``."""
    work = Path(workdir)
    out = work / "out" / "sweep"
    models = read_models_tsv(work / "out" / "models.tsv")
    prepared = PreparedData(work / "data", config)
    store = CheckpointStore(work / "store")
    hashes = [models[n][0] for n in INDIVIDUAL_MODELS]
    runs = run_ensembles(config, prepared, store, out, hashes, list(INDIVIDUAL_MODELS),
                         configurations=SWEEP_GRID)
    return sweep_table([(name, spec, res) for name, (_, res, spec) in runs.items()])


def sweep_table(runs) -> str:
    """Rows sorted by best dev accuracy, descending (stable for ties)."""
    runs = sorted(runs, key=lambda r: -r[2].best_metric)
    head = f"{'Config':<12} | {'lr':>8} | {'dropout':>7} | {'eff_lr':>8} | {'ACC_DEV':>7} | {'Epochs':>6}"
    lines = [head, "-" * len(head)]
    for name, spec, res in runs:
        lines.append(f"{name:<12} | {spec.lr:>8.0e} | {spec.dropout:>7.1f} | "
                     f"{spec.lr * spec.lr_scale:>8.0e} | {res.best_metric:>7.3f} | {res.best_epoch:>6d}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- specialization check


@dataclass
class SpecializationOutcome:
    member_accuracy: list
    ensemble_accuracy: float
    checksums_before: list
    checksums_after: list
    trace: list


def specialization_experiment(n: int = 600, seed: int = 42, freeze_members: bool = False,
                              epochs: int = 3, lr_scale: float = 100.0, store_root=None):
    """Two specialists, each trained to spot one offensive-marker family, then
    ensembled on data where either family signals OFF.

    Accuracies are percentages on the held-out 20% of the mixed split.
    """
    import tempfile

    from .encoder import EncoderConfig
    from .synthetic import specialization_corpus
    from .tokenizer import encode
    from .training import StageSpec, dev_accuracy, run_stage

    train_x, train_y, mixed = specialization_corpus(n, seed)
    vocab = build_vocab([t for rows in (train_x, train_y, mixed) for t, _ in rows], 2000)

    def examples(rows, tag):
        return [D.LabeledExample(f"{tag}{i}", encode(t, vocab, 64), y) for i, (t, y) in enumerate(rows)]

    cut = int(0.8 * n)
    cfg = EncoderConfig.for_variant("A", hidden=32, layers=1, heads=2, ffn=64,
                                    vocab_size=len(vocab), max_positions=64)
    store = CheckpointStore(store_root or tempfile.mkdtemp(prefix="specialists-"))
    mix = examples(mixed, "m")
    members, member_acc = [], []
    for k, (tag, rows) in enumerate((("x", train_x), ("y", train_y))):
        data = examples(rows, tag)
        spec = StageSpec("FT", "A", None, epochs=epochs, lr=2e-5, lr_scale=lr_scale, seed=seed + k)
        model = store.get(run_stage(spec, data[:cut], data[cut:], store, cfg).checkpoint)
        members.append(model)
        member_acc.append(dev_accuracy(model, mix[cut:]))
    before = [m.checksum() for m in members]
    spec = EnsembleSpec("E", lr=1e-5, lr_scale=lr_scale, dropout=0.1, epochs=epochs, seed=seed,
                        freeze_members=freeze_members)
    model, res = train_ensemble(spec, members, mix[:cut], mix[cut:], ["X", "Y"],
                                expected_members=2)
    return SpecializationOutcome(member_acc, res.best_metric, before, model.member_checksums(),
                                 res.trace)
