import csv
import subprocess
import sys

import pytest

from articfit.cli import EXIT_BAD_INPUT, EXIT_OK, main

SMALL = ["--subjects", "3", "--frames", "3"]
FAST = ["--iters", "1", "--steps", "15", "--pcs", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), *SMALL]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    out = dataset.parent / "model.afm"
    assert main(["train", "--data", str(dataset), "--out", str(out), *FAST]) == EXIT_OK
    return out


def test_synth_layout(dataset):
    assert (dataset / "manifest.json").exists()
    assert (dataset / "truth" / "true_model.afm").exists()
    assert len(list((dataset / "subjects").iterdir())) == 3


def test_train_outputs(trained):
    rows = list(csv.DictReader(open(trained.with_suffix(".metrics.csv"))))
    assert [int(r["iteration"]) for r in rows] == [0, 1]
    assert trained.with_suffix(".fits.json").exists()


def test_train_refuses_truth_dir(dataset, tmp_path, capsys):
    code = main(["train", "--data", str(dataset / "truth"), "--out", str(tmp_path / "m"), *FAST])
    assert code == EXIT_BAD_INPUT
    assert "ground-truth" in capsys.readouterr().err


def test_train_refuses_true_model_as_prior(dataset, tmp_path):
    code = main(["train", "--data", str(dataset), "--prior",
                 str(dataset / "truth" / "true_model.afm"), "--out", str(tmp_path / "m"), *FAST])
    assert code == EXIT_BAD_INPUT


def test_missing_data_is_bad_input(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) \
        == EXIT_BAD_INPUT


def test_corrupt_model_is_bad_input(tmp_path, dataset):
    bad = tmp_path / "bad.afm"
    bad.write_bytes(b"garbage")
    assert main(["measure", "--model", str(bad)]) == EXIT_BAD_INPUT


def test_bad_thread_env(monkeypatch, trained):
    monkeypatch.setenv("ARTICFIT_THREADS", "many")
    assert main(["measure", "--model", str(trained)]) == EXIT_BAD_INPUT


def test_register_measure_eval_export(dataset, trained, tmp_path):
    fits = tmp_path / "s.json"
    assert main(["register", "--model", str(trained), "--data", str(dataset),
                 "--subject", "s000", "--out", str(fits), *FAST]) == EXIT_OK
    table = tmp_path / "m.csv"
    assert main(["measure", "--model", str(trained), "--fit", str(fits),
                 "--out", str(table)]) == EXIT_OK
    row = next(csv.DictReader(open(table)))
    assert row["id"] == "s000" and float(row["BV"]) > 0
    ev = tmp_path / "e.csv"
    assert main(["eval", "--model", str(trained), "--data", str(dataset), "--split", "train",
                 "--fits", str(trained.with_suffix(".fits.json")), "--out", str(ev)]) == EXIT_OK
    assert len(list(csv.DictReader(open(ev)))) == 9
    out = tmp_path / "export"
    assert main(["export", "--model", str(trained), "--fits", str(fits),
                 "--metrics", str(trained.with_suffix(".metrics.csv")),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "error_vs_iteration.svg").exists()
    assert (out / "s000_canonical.obj").exists()


def test_unknown_subject(dataset, trained, tmp_path):
    assert main(["register", "--model", str(trained), "--data", str(dataset),
                 "--subject", "zzz", "--out", str(tmp_path / "x.json")]) == EXIT_BAD_INPUT


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "articfit.cli", "measure", "--model",
                        str(tmp_path / "missing.afm")], capture_output=True, text=True)
    assert r.returncode == EXIT_BAD_INPUT and "bad input" in r.stderr
