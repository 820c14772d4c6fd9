"""Command-line entry point: ``olid-ensemble <command> [flags]``.

Every command works inside ``--workdir`` (default ``.``), using the layout
described in :mod:`olid_ensemble.workflow`.  Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from .config import SCALES, RunConfig, env_seed
from .ensemble import EnsembleSpec, load_ensemble, predict, save_ensemble, train_ensemble
from .evaluation import (ModelReport, confusion, metrics, metrics_tsv, misclassified,
                         read_predictions, report, write_predictions)
from .tokenizer import encode
from .training import (INDIVIDUAL_MODELS, STAGE_OBJECTIVE, CheckpointStore, append_manifest,
                       predictions, run_stage, stage_spec)
from .workflow import PreparedData, prepare_data, read_models_tsv, reproduce, sweep

log = logging.getLogger("olid_ensemble")

MLM_STAGES = ("GEN", "PT")
FINETUNE_STAGES = tuple(s for s in STAGE_OBJECTIVE if s not in MLM_STAGES)


class UsageError(Exception):
    """Bad flags or missing upstream artifacts; exit code 2."""


# ---------------------------------------------------------------- helpers


class Layout:
    def __init__(self, workdir):
        self.work = Path(workdir)
        self.data = self.work / "data"
        self.store = CheckpointStore(self.work / "store")
        self.out = self.work / "out"
        self.manifest = self.out / "run_manifest.tsv"


def _config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.for_scale(args.scale)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    elif not args.config:
        cfg = cfg.replace(seed=env_seed())
    return cfg


def _overrides(cfg: RunConfig, args, variant: str | None = None) -> RunConfig:
    kv = {}
    if getattr(args, "lr", None) is not None:
        kv["train.lr"] = args.lr
    if getattr(args, "epochs", None) is not None:
        key = "train.gen_epochs" if getattr(args, "stage", None) == "GEN" else "train.epochs"
        kv[key] = args.epochs
    if getattr(args, "dropout", None) is not None and variant is not None:
        kv[f"encoder.{variant}.dropout"] = args.dropout
    if getattr(args, "stage2_fraction", None) is not None:
        kv["data.stage2_fraction"] = args.stage2_fraction
    return cfg.replace(**kv) if kv else cfg


def _require_parent(layout: Layout, digest: str | None, stage: str) -> None:
    if digest is None:
        if stage not in ("GEN", "FT", "PT"):
            raise UsageError(f"--parent is required for stage {stage}")
        return
    if digest not in layout.store:
        raise UsageError(f"parent checkpoint {digest} not found in {layout.store.root}")


def _run_stage(args, layout: Layout) -> int:
    _require_parent(layout, args.parent, args.stage)
    cfg = _overrides(_config(args), args, args.variant)
    prepared = PreparedData(layout.data, cfg)
    spec = stage_spec(cfg, args.stage, args.variant, args.parent)
    train, dev = prepared.encoded(args.stage)
    result = run_stage(spec, train, dev, layout.store,
                       init_config=cfg.encoder_config(args.variant, len(prepared.vocab)))
    layout.out.mkdir(parents=True, exist_ok=True)
    append_manifest(layout.manifest, result)
    print(f"{result.name}\t{result.checkpoint}\tbest_epoch={result.best_epoch}\t"
          f"{result.metric}={result.best_metric:.3f}")
    return 0


# ---------------------------------------------------------------- commands


def cmd_prepare_data(args) -> int:
    layout = Layout(args.workdir)
    cfg = _config(args)
    out = Path(args.out) if args.out else layout.data
    if args.synthetic is not None:
        info = prepare_data(out, cfg, synthetic={"n": args.synthetic, "dup_rate": args.dup_rate,
                                                  "off_rate": args.off_rate})
    else:
        required = {"--olid-train": args.olid_train, "--olid-test": args.olid_test,
                    "--solid-text": args.solid_text}
        missing = [k for k, v in required.items() if v is None]
        if missing:
            raise UsageError(f"either --synthetic or {', '.join(missing)} must be given")
        if args.solid_labels is None or not Path(args.solid_labels).exists():
            raise D.JoinError(f"--solid-text {args.solid_text} has no matching labels file "
                              f"(--solid-labels {args.solid_labels})")
        info = prepare_data(out, cfg, sources={
            "olid_train": args.olid_train, "olid_test": args.olid_test,
            "solid_text": args.solid_text, "solid_labels": args.solid_labels,
            "task_test": args.task_test, "task_gold": args.task_gold, "generic": args.generic})
    print(f"duplicates_removed\t{info['duplicates_removed']}")
    print(f"vocab_size\t{info['vocab_size']}")
    for stage, (n_train, n_dev) in info["splits"].items():
        print(f"split\t{stage}\t{n_train}\t{n_dev}")
    return 0


def cmd_pretrain(args) -> int:
    return _run_stage(args, Layout(args.workdir))


def cmd_finetune(args) -> int:
    return _run_stage(args, Layout(args.workdir))


def _member_hashes(args, layout: Layout):
    if args.members:
        hashes = [h.strip() for h in args.members.split(",") if h.strip()]
        names = [f"M{i}" for i in range(len(hashes))]
    else:
        path = layout.out / "models.tsv"
        if not path.exists():
            raise UsageError(f"no --members given and {path} does not exist")
        models = read_models_tsv(path)
        names = [n for n in INDIVIDUAL_MODELS if n in models]
        hashes = [models[n][0] for n in names]
    for h in hashes:
        if h not in layout.store:
            raise UsageError(f"member checkpoint {h} not found in {layout.store.root}")
    return hashes, names


def cmd_ensemble_train(args) -> int:
    layout = Layout(args.workdir)
    cfg = _config(args)
    hashes, names = _member_hashes(args, layout)
    prepared = PreparedData(layout.data, cfg)
    train, dev = prepared.encoded("E")
    spec = EnsembleSpec(name=args.name, lr=cfg["ensemble.lr"] if args.lr is None else args.lr,
                        dropout=cfg["ensemble.dropout"] if args.dropout is None else args.dropout,
                        lr_scale=cfg["train.lr_scale"],
                        epochs=cfg["ensemble.epochs"] if args.epochs is None else args.epochs,
                        seed=cfg["seed"], batch_size=cfg["train.batch_size"],
                        freeze_members=args.freeze_members or cfg["ensemble.freeze_members"])
    members = [layout.store.get(h) for h in hashes]
    model, result = train_ensemble(spec, members, train, dev, names, expected_members=None)
    target = layout.out / "ensembles" / args.name
    digest = save_ensemble(model, target, layout.store)
    layout.out.mkdir(parents=True, exist_ok=True)
    append_manifest(layout.manifest, result)
    print(f"{args.name}\t{digest}\t{target}\tbest_epoch={result.best_epoch}\t"
          f"dev_accuracy={result.best_metric:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.pred)
    gold = D.load_gold(args.gold)
    missing = sorted(set(gold) - set(preds))
    if missing:
        raise ValueError(f"{len(missing)} gold ids have no prediction, e.g. {missing[:5]}")
    ids = list(gold)
    g = [gold[i] for i in ids]
    p = [preds[i] for i in ids]
    cm = confusion(g, p)
    row = ModelReport(args.name, float("nan"), metrics(cm), 0, cm,
                      misclassified(ids, [""] * len(ids), g, p))
    text = report([row])
    if args.metrics:
        Path(args.metrics).write_text(metrics_tsv([row]), encoding="utf-8", newline="\n")
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    layout = Layout(args.workdir)
    cfg = _config(args)
    prepared_vocab = PreparedData(layout.data, cfg).vocab
    texts = D.load_texts(args.input)
    items = [(t.id, encode(t.text, prepared_vocab, cfg["data.max_length"])) for t in texts]
    model_path = Path(args.model)
    if (model_path / "ensemble.tsv").exists():
        rows = predict(load_ensemble(model_path, layout.store), items)
    else:
        if args.model not in layout.store:
            raise UsageError(f"--model {args.model} is neither an ensemble directory nor a "
                             f"checkpoint hash in {layout.store.root}")
        model = layout.store.get(args.model)
        examples = [D.LabeledExample(i, seq, None) for i, seq in items]
        rows = [(i, D.LABELS[int(p)]) for (i, _), p in zip(items, predictions(model, examples))]
    write_predictions(rows, args.output)
    print(f"wrote {len(rows)} predictions to {args.output}")
    return 0


def cmd_reproduce(args) -> int:
    cfg = _config(args)
    text = reproduce(args.workdir, cfg)
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    layout = Layout(args.workdir)
    if not (layout.out / "models.tsv").exists():
        raise UsageError(f"{layout.out / 'models.tsv'} not found (run reproduce first)")
    text = sweep(args.workdir, _config(args))
    (layout.out / "sweep").mkdir(parents=True, exist_ok=True)
    (layout.out / "sweep" / "sweep.txt").write_text(text, encoding="utf-8", newline="\n")
    print(text, end="")
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--workdir", default=".", help="working directory (data/, store/, out/)")
    p.add_argument("--config", help="run configuration TSV (key<TAB>value)")
    p.add_argument("--scale", choices=sorted(SCALES), default="desk",
                   help="configuration preset when --config is not given")
    if seed:
        p.add_argument("--seed", type=int, help="global seed (default: $SE_SEED or 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olid-ensemble",
                                     description="Offensive-tweet classifier ensemble pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest sources, dedup, write split manifests")
    _common(p)
    p.add_argument("--olid-train")
    p.add_argument("--olid-test")
    p.add_argument("--solid-text")
    p.add_argument("--solid-labels")
    p.add_argument("--task-test")
    p.add_argument("--task-gold")
    p.add_argument("--generic", help="plain-text corpus for the generic stand-in pretraining")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate a synthetic corpus")
    p.add_argument("--dup-rate", type=float, default=0.01)
    p.add_argument("--off-rate", type=float, default=0.33)
    p.add_argument("--out", help="data directory (default: WORKDIR/data)")
    p.set_defaults(func=cmd_prepare_data)

    for name, stages, func in (("pretrain", MLM_STAGES, cmd_pretrain),
                               ("finetune", FINETUNE_STAGES, cmd_finetune)):
        p = sub.add_parser(name, help=f"run one {'MLM' if name == 'pretrain' else 'task'} stage")
        _common(p)
        p.add_argument("--variant", choices=("A", "B"), required=True)
        p.add_argument("--stage", choices=stages, required=True)
        p.add_argument("--parent", help="parent checkpoint hash")
        p.add_argument("--lr", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--stage2-fraction", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("ensemble-train", help="train a representation-concatenation ensemble")
    _common(p)
    p.add_argument("--members", help="comma-separated member hashes (default: out/models.tsv)")
    p.add_argument("--name", default="E")
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-members", action="store_true")
    p.set_defaults(func=cmd_ensemble_train)

    p = sub.add_parser("evaluate", help="score a prediction CSV against gold labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--name", default="model")
    p.add_argument("--metrics", help="also write model<TAB>metric<TAB>value TSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="label tweets with a checkpoint or ensemble")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint hash or ensemble directory")
    p.add_argument("--input", required=True, help="TSV with id and text columns")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reproduce", help="synthetic data -> six models -> E/E_1/E_2 -> report")
    _common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("sweep", help="ensemble lr x dropout grid over the reproduced members")
    _common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
