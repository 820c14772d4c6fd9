from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olid_ensemble.config import DEFAULTS, SCALES, RunConfig, env_seed
from olid_ensemble.ensemble import EnsembleSpec
from olid_ensemble.training import StageResult
from olid_ensemble.workflow import (SWEEP_GRID, read_lineage_tsv, read_models_tsv, sweep_table,
                                    write_lineage_tsv, write_models_tsv)


def result(name, trace, parent=None, stage="PT-C-C", variant="A"):
    best = max(range(len(trace)), key=lambda i: (trace[i], -i)) + 1
    return StageResult(name, stage, variant, name.lower() * 4, Path("."), "dev_accuracy", trace,
                       [0.5] * len(trace), ["h"] * len(trace), best, parent)


def test_sweep_grid_is_the_two_by_two():
    assert sorted(SWEEP_GRID.values()) == [(1e-5, 0.1), (1e-5, 0.5), (2e-5, 0.1), (2e-5, 0.5)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=4, max_size=4))
def test_sweep_table_sorted_by_dev_accuracy(accs):
    runs = [(name, EnsembleSpec(name=name, lr=lr, dropout=p, lr_scale=100.0),
             result(name, [acc])) for (name, (lr, p)), acc in zip(SWEEP_GRID.items(), accs)]
    rows = [line.split("|") for line in sweep_table(runs).splitlines()[2:]]
    shown = [float(r[4]) for r in rows]
    assert shown == sorted(shown, reverse=True)
    assert sorted(r[0].strip() for r in rows) == sorted(SWEEP_GRID)


def test_sweep_table_ties_keep_grid_order():
    runs = [(n, EnsembleSpec(name=n, lr=lr, dropout=p), result(n, [91.5]))
            for n, (lr, p) in SWEEP_GRID.items()]
    names = [line.split("|")[0].strip() for line in sweep_table(runs).splitlines()[2:]]
    assert names == list(SWEEP_GRID)


def test_models_and_lineage_roundtrip(tmp_path):
    rows = [result("A-PT", [3.2], stage="PT"),
            result("A-PT-C", [80.0, 90.0], parent="a-pt" * 4, stage="PT-C")]
    write_models_tsv(tmp_path / "models.tsv", rows)
    assert read_models_tsv(tmp_path / "models.tsv") == {
        "A-PT": ("a-pt" * 4, 1, 3.2), "A-PT-C": ("a-pt-c" * 4, 2, 90.0)}
    write_lineage_tsv(tmp_path / "lineage.tsv", rows)
    assert read_lineage_tsv(tmp_path / "lineage.tsv") == [
        ("A-PT", "PT", "A", None, "a-pt" * 4), ("A-PT-C", "PT-C", "A", "a-pt" * 4, "a-pt-c" * 4)]


@pytest.mark.parametrize("scale", sorted(SCALES))
def test_config_roundtrip(tmp_path, scale):
    cfg = RunConfig.for_scale(scale, seed=7)
    cfg.save(tmp_path / "c.tsv")
    back = RunConfig.load(tmp_path / "c.tsv")
    assert back == cfg
    assert back.to_tsv() == (tmp_path / "c.tsv").read_text()
    assert list(back.values) == list(DEFAULTS)


def test_config_errors():
    with pytest.raises(KeyError):
        RunConfig({"train.nope": 1})
    with pytest.raises(ValueError):
        RunConfig.from_tsv("train.from_scratch\tyes\n")
    with pytest.raises(ValueError):
        RunConfig.from_tsv("seed 42\n")
    assert RunConfig.from_tsv("train.lr\t1e-05\n")["train.lr"] == 1e-5


def test_env_seed(monkeypatch):
    monkeypatch.delenv("SE_SEED", raising=False)
    assert env_seed() == 42
    monkeypatch.setenv("SE_SEED", "7")
    assert RunConfig.for_scale("smoke")["seed"] == 7
