import subprocess
import sys

import pytest

from olid_ensemble.cli import main

SUBCOMMANDS = ["prepare-data", "pretrain", "finetune", "ensemble-train", "evaluate", "predict",
               "reproduce", "sweep"]


def run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    assert main(["prepare-data", "--workdir", str(work), "--scale", "smoke", "--seed", "42",
                 "--synthetic", "300"]) == 0
    return work


def test_help_lists_every_subcommand():
    res = subprocess.run([sys.executable, "-m", "olid_ensemble", "--help"], capture_output=True,
                         text=True, check=True)
    for name in SUBCOMMANDS:
        assert name in res.stdout


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_subcommand_help(name, capsys):
    with pytest.raises(SystemExit) as exc:
        main([name, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_prepare_data_rerun_is_byte_identical(tmp_path, capsys, workdir):
    rc, out, _ = run(capsys, "prepare-data", "--workdir", str(tmp_path), "--scale", "smoke",
                     "--seed", "42", "--synthetic", "300")
    assert rc == 0 and out.startswith("duplicates_removed\t")
    assert tree(tmp_path / "data") == tree(workdir / "data")


def test_missing_labels_file_is_runtime_error(tmp_path, capsys, workdir):
    d = workdir / "data"
    rc, _, err = run(capsys, "prepare-data", "--workdir", str(tmp_path),
                     "--olid-train", str(d / "olid_train.tsv"), "--olid-test", str(d / "olid_test.tsv"),
                     "--solid-text", str(d / "solid_text.tsv"),
                     "--solid-labels", str(tmp_path / "nope.tsv"))
    assert rc == 1 and err.startswith("error:")


@pytest.mark.parametrize("argv", [
    ["finetune", "--variant", "A", "--stage", "PT-C-C", "--parent", "0" * 64],
    ["finetune", "--variant", "A", "--stage", "PT-R"],
    ["pretrain", "--variant", "C", "--stage", "PT"],
    ["prepare-data"],
    ["sweep"],
])
def test_usage_errors_exit_2(argv, workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main([*argv, "--workdir", str(workdir)])
    assert exc.value.code == 2


def test_stage_chain_ensemble_predict_evaluate(workdir, capsys):
    common = ["--workdir", str(workdir), "--scale", "smoke", "--seed", "42"]
    rc, out, _ = run(capsys, "pretrain", "--variant", "B", "--stage", "PT", "--epochs", "1",
                     *common)
    assert rc == 0
    pt = out.split("\t")[1]
    rc, out, _ = run(capsys, "finetune", "--variant", "B", "--stage", "PT-C", "--parent", pt,
                     "--epochs", "1", *common)
    ptc = out.split("\t")[1]
    rc, out, _ = run(capsys, "finetune", "--variant", "B", "--stage", "PT-C-C", "--parent", ptc,
                     "--epochs", "1", *common)
    assert rc == 0
    ptcc = out.split("\t")[1]
    rc, out, _ = run(capsys, "finetune", "--variant", "A", "--stage", "FT", "--epochs", "1",
                     *common)
    ft = out.split("\t")[1]
    rows = (workdir / "out" / "run_manifest.tsv").read_text().splitlines()
    assert len(rows) == 5 and rows[1].startswith("PT\tB") and pt in rows[1] and ptc in rows[2]

    rc, out, _ = run(capsys, "ensemble-train", "--members", f"{ptcc},{ft}", "--name", "E_1",
                     "--epochs", "1", "--freeze-members", *common)
    assert rc == 0
    ens = workdir / "out" / "ensembles" / "E_1"
    assert (ens / "ensemble.tsv").exists()

    data = workdir / "data"
    pred = workdir / "pred.csv"
    rc, out, _ = run(capsys, "predict", "--model", str(ens), "--input",
                     str(data / "task_test.tsv"), "--output", str(pred), *common)
    assert rc == 0 and pred.read_text().startswith("id,label\n")
    rc, single, _ = run(capsys, "predict", "--model", ptcc, "--input",
                        str(data / "task_test.tsv"), "--output", str(workdir / "p2.csv"), *common)
    assert rc == 0

    metrics = workdir / "metrics.tsv"
    rc, out, _ = run(capsys, "evaluate", "--pred", str(pred), "--gold",
                     str(data / "task_test_labels.tsv"), "--name", "E_1", "--metrics", str(metrics))
    assert rc == 0 and out.startswith("Model")
    assert metrics.read_text().startswith("model\tmetric\tvalue\n")


def test_evaluate_missing_prediction_fails(tmp_path, workdir, capsys):
    pred = tmp_path / "p.csv"
    pred.write_text("id,label\nx0,NOT\n")
    rc, _, err = run(capsys, "evaluate", "--pred", str(pred), "--gold",
                     str(workdir / "data" / "task_test_labels.tsv"))
    assert rc == 1 and "no prediction" in err
