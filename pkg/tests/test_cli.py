import csv

import pytest

from lsv import cli, train

GEN = ["--speakers", "7", "--test-speakers", "3", "--utts", "4", "--frames-min", "210", "--frames-max", "260",
       "--feat-dim", "2", "--seed", "7", "--separation", "1.0"]
TRAIN = ["--epochs", "2", "--batch-size", "4", "--width", "8", "--seed", "7"]


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen", *GEN]) == 0
    return tmp_path


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_gen_counts_and_repeatable(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen", "--speakers", "32", "--utts", "20", "--seed", "7", "--test-speakers", "8",
                     "--frames-min", "60", "--frames-max", "80", "--corpus", "a"]) == 0
    assert capsys.readouterr().out.strip() == "a/manifest.tsv"
    assert len((tmp_path / "a/manifest.tsv").read_text().splitlines()) == 640
    assert cli.main(["gen", "--speakers", "32", "--utts", "20", "--seed", "7", "--test-speakers", "8",
                     "--frames-min", "60", "--frames-max", "80", "--corpus", "b"]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop(next(k for k in a if k.name == "gen.config"))
    b.pop(next(k for k in b if k.name == "gen.config"))
    assert a == b
    assert "seed=7" in (tmp_path / "a/gen.config").read_text()


def test_gen_config_error(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen", "--speakers", "1"]) == 2


def test_unknown_config_key(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text("# comment\nspeakers = 4\nbogus = 1\n")
    assert cli.main(["gen", "--config", "run.cfg"]) == 2


def test_config_file_with_flag_override(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text("speakers = 4\nutts = 2\ntest_speakers = 0\nframes_min = 60\nframes_max = 60\n")
    assert cli.main(["gen", "--config", "run.cfg", "--utts", "3"]) == 0
    assert len((tmp_path / "corpus/manifest.tsv").read_text().splitlines()) == 12


def test_train_systems_write_metrics(workdir):
    assert cli.main(["train", "--system", "d-vector", *TRAIN]) == 0
    assert cli.main(["train", "--system", "d-ladder", "--lambda0", "1000", "--lambda1", "10",
                     "--lambda-rest", "0.1", "--sigma", "0.3", *TRAIN]) == 0
    for system in ("d-vector", "d-ladder"):
        assert len(train.read_metrics(workdir / "runs" / system / "metrics.csv")) > 0
        assert (workdir / "runs" / system / "train.config").exists()
    assert "lambda0=1000.0" in (workdir / "runs/d-ladder/train.config").read_text()


def test_train_unsupported_combination(workdir):
    assert cli.main(["train", "--system", "x-multi", "--framework", "d-vector", *TRAIN]) == 2
    assert cli.main(["train", "--system", "z-vector", *TRAIN]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort(workdir):
    assert cli.main(["train", "--system", "d-vector", *TRAIN, "--base-lr", "1e300"]) == 3


def test_missing_artifacts(workdir):
    assert cli.main(["train", "--manifest", "nowhere.tsv", *TRAIN]) == 4
    assert cli.main(["eval", "--run", "runs/none"]) == 4
    assert cli.main(["train", "--system", "d-vector", *TRAIN]) == 0
    assert cli.main(["eval", "--run", "runs/d-vector", "--trials", "missing.tsv"]) == 4
    assert cli.main(["report"]) == 4
    assert cli.main(["report", "--run", "runs/d-vector"]) == 4  # no eval epochs recorded


def test_resume_bit_identical(workdir):
    args = ["train", "--system", "d-ladder", "--epochs", "3", "--batch-size", "4", "--width", "8"]
    assert cli.main([*args, "--run-dir", "full"]) == 0
    assert cli.main([*args, "--run-dir", "part"]) == 0
    (workdir / "part/ckpt_e03.lsvc").unlink()
    assert cli.main([*args, "--run-dir", "part", "--resume"]) == 0
    assert (workdir / "part/ckpt_e03.lsvc").read_bytes() == (workdir / "full/ckpt_e03.lsvc").read_bytes()
    assert cli.main([*args[:-2], "--width", "16", "--run-dir", "part", "--resume"]) == 2


def test_eval_report_rows_and_repeatable(workdir):
    for system in ("d-vector", "d-ladder", "x-vector", "x-ladder"):
        assert cli.main(["train", "--system", system, *TRAIN]) == 0
    runs = [a for s in ("d-vector", "d-ladder", "x-vector", "x-ladder") for a in ("--run", f"runs/{s}")]
    assert cli.main(["eval", *runs, "--out", "one.csv"]) == 0
    assert cli.main(["eval", *runs, "--out", "two.csv"]) == 0
    rows = _rows(workdir / "one.csv")
    assert rows[0] == ["system", "eer_percent"] and [r[0] for r in rows[1:]] == ["d-vector", "d-ladder",
                                                                                  "x-vector", "x-ladder"]
    assert (workdir / "one.csv").read_bytes() == (workdir / "two.csv").read_bytes()
    assert (workdir / "one.x-ladder.scores").read_bytes() == (workdir / "two.x-ladder.scores").read_bytes()
    assert (workdir / "one.csv.config").exists()


def test_eval_plda_without_train_split(workdir):
    assert cli.main(["train", "--system", "x-vector", *TRAIN]) == 0
    lines = (workdir / "corpus/manifest.tsv").read_text().splitlines(keepends=True)
    (workdir / "corpus/test_only.tsv").write_text("".join(l for l in lines if l.rstrip("\n").endswith("test")))
    assert cli.main(["eval", "--run", "runs/x-vector", "--manifest", "corpus/test_only.tsv",
                     "--backend", "plda"]) == 2
    assert cli.main(["eval", "--run", "runs/x-vector", "--manifest", "corpus/test_only.tsv",
                     "--backend", "cosine"]) == 0


def test_report_table_and_curve(workdir):
    systems = ("x-vector", "x-multi", "x-ladder")
    for system in systems:
        assert cli.main(["train", "--system", system, *TRAIN, "--epochs", "4", "--eval-every", "2",
                         "--eval-trials", "corpus/trials.tsv"]) == 0
    assert cli.main(["report", *[a for s in systems for a in ("--run", f"runs/{s}")], "--out", "rep"]) == 0
    table = _rows(workdir / "rep/comparison.csv")
    assert table[0] == ["system", "eer_percent"] and [r[0] for r in table[1:]] == list(systems)
    curve = _rows(workdir / "rep/eer_curve.csv")
    assert curve[0] == ["epoch", "eer_percent", "system"]
    assert [(r[0], r[2]) for r in curve[1:]] == [(e, s) for s in systems for e in ("2", "4")]
    assert (workdir / "rep/report.config").exists()


def test_extract_writes_embeddings(workdir):
    assert cli.main(["train", "--system", "d-vector", *TRAIN]) == 0
    assert cli.main(["extract", "--run-dir", "runs/d-vector", "--out", "emb.tsv"]) == 0
    lines = (workdir / "emb.tsv").read_text().splitlines()
    assert len(lines) == 28 and len(lines[0].split("\t")[2].split()) == 8
