import json

import numpy as np
import pytest

from unq.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from unq.data_io import read_codes, read_fvecs, read_ivecs, synth_dataset, write_fvecs
from unq.model import UnqModel, load_checkpoint, save_checkpoint
from unq.search import exhaustive_search, read_results, write_results

TINY = ["--M", "2", "--K", "8", "--d-code", "6", "--enc-hidden", "12", "--dec-hidden", "12",
        "--batch-size", "64", "--workers", "1"]


@pytest.fixture
def files(tmp_path):
    b = synth_dataset(300, 400, 20, 8, n_components=4, seed=0)
    paths = {}
    for name, arr in (("train", b.train), ("base", b.base), ("queries", b.queries)):
        paths[name] = str(tmp_path / f"{name}.fvecs")
        write_fvecs(paths[name], arr)
    paths["dir"] = tmp_path
    return paths


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(f, tag, extra=()):
    d = f["dir"]
    assert run("train", "--train", f["train"], "--out", d / f"{tag}.unq", "--epochs", 2, "--seed", 3,
               *TINY, *extra) == EXIT_OK
    assert run("encode", "--model", d / f"{tag}.unq", "--base", f["base"], "--out", d / f"{tag}.unqc") == EXIT_OK
    assert run("search", "--model", d / f"{tag}.unq", "--codes", d / f"{tag}.unqc", "--queries", f["queries"],
               "--L", 50, "--k", 10, "--workers", 1, "--out", d / f"{tag}.tsv") == EXIT_OK
    return [(d / f"{tag}{ext}").read_bytes() for ext in (".unq", ".unq.log", ".unqc", ".tsv")]


def test_groundtruth(files, capsys):
    out = files["dir"] / "gt.ivecs"
    assert run("groundtruth", "--base", files["base"], "--queries", files["base"], "--k", 1, "--out", out,
               "--workers", 1) == EXIT_OK
    gt = read_ivecs(out)
    assert gt.shape == (400, 1)
    np.testing.assert_array_equal(gt[:, 0], np.arange(400))


def test_pipeline_is_deterministic(files):
    a = pipeline(files, "a")
    b = pipeline(files, "b")
    assert a == b
    log_lines = a[1].decode().splitlines()
    assert len(log_lines) == 2 and log_lines[0].split("\t")[0] == "0"


def test_train_zero_epochs_equals_initialization(files):
    d = files["dir"]
    assert run("train", "--train", files["train"], "--out", d / "z.unq", "--epochs", 0, "--seed", 5, *TINY) == 0
    init = UnqModel(8, 2, 8, 6, [12], [12], seed=5)
    save_checkpoint(init, d / "init.unq")
    assert (d / "z.unq").read_bytes() == (d / "init.unq").read_bytes()


def test_train_alpha_zero_logs_no_triplet_term(files):
    d = files["dir"]
    assert run("train", "--train", files["train"], "--out", d / "n.unq", "--epochs", 2, "--alpha", 0,
               *TINY) == EXIT_OK
    for line in (d / "n.unq.log").read_text().splitlines():
        assert float(line.split("\t")[2]) == 0.0


def test_train_ablation_flags_accepted(files):
    d = files["dir"]
    for flag in ("--no-triplet", "--triplet-only", "--no-regularizer", "--soft-gumbel"):
        assert run("train", "--train", files["train"], "--out", d / "f.unq", "--epochs", 1, flag, *TINY) == 0
    assert run("train", "--train", files["train"], "--out", d / "f.unq", "--no-triplet", "--triplet-only",
               *TINY) == EXIT_USAGE


def test_train_nan_input_exit_code(files):
    d = files["dir"]
    x = np.ones((64, 8), np.float32)
    x[0, 0] = np.nan
    write_fvecs(d / "nan.fvecs", x)
    assert run("train", "--train", d / "nan.fvecs", "--out", d / "x.unq", "--epochs", 1, "--alpha", 0,
               *TINY) == EXIT_NUMERIC


def test_encode_reports_bytes_and_handles_empty_base(files, capsys):
    d = files["dir"]
    save_checkpoint(UnqModel(8, 8, 256, 4, [], [], seed=0), d / "m.unq")
    assert run("encode", "--model", d / "m.unq", "--base", files["base"], "--out", d / "c.unqc") == 0
    assert "8 bytes per vector" in capsys.readouterr().out
    (d / "empty.fvecs").write_bytes(b"")
    assert run("encode", "--model", d / "m.unq", "--base", d / "empty.fvecs", "--out", d / "e.unqc") == 0
    assert len((d / "e.unqc").read_bytes()) == 16
    assert read_codes(d / "e.unqc").N == 0


def test_search_modes(files):
    d = files["dir"]
    pipeline(files, "s")
    common = ["search", "--model", d / "s.unq", "--codes", d / "s.unqc", "--queries", files["queries"],
              "--k", 10, "--workers", 1]
    assert run(*common, "--L", 5, "--out", d / "x.tsv") == EXIT_USAGE
    assert run(*common, "--L", 400, "--out", d / "full.tsv") == 0
    ids, scores = read_results(d / "full.tsv")
    model = load_checkpoint(d / "s.unq")
    table = read_codes(d / "s.unqc")
    ref_ids, _ = exhaustive_search(model, read_fvecs(files["queries"])[0], table, 10)
    np.testing.assert_array_equal(ids[0], ref_ids)
    assert run(*common, "--L", 50, "--no-rerank", "--out", d / "nr.tsv") == 0
    ids, scores = read_results(d / "nr.tsv")
    assert np.all(np.diff(scores, axis=1) >= 0)


def test_evaluate_table(files, capsys):
    d = files["dir"]
    pipeline(files, "e")
    assert run("groundtruth", "--base", files["base"], "--queries", files["queries"], "--k", 10,
               "--out", d / "gt.ivecs") == 0
    assert run("pq-train", "--train", files["train"], "--out", d / "pq.pqc", "--M", 2, "--K", 8) == 0
    assert run("pq-encode", "--codebooks", d / "pq.pqc", "--base", files["base"], "--out", d / "pq.unqc") == 0
    assert run("pq-search", "--codebooks", d / "pq.pqc", "--codes", d / "pq.unqc", "--queries", files["queries"],
               "--k", 10, "--out", d / "pq.tsv") == 0
    capsys.readouterr()
    assert run("evaluate", "--results", d / "pq.tsv", "--results", d / "e.tsv", "--label", "PQ", "--label", "UNQ",
               "--bytes", 2, "--bytes", 2, "--gt", d / "gt.ivecs", "--k", "1,10") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["method", "bytes", "R@1", "R@10"]
    assert [line.split("\t")[0] for line in lines[1:]] == ["PQ", "UNQ"]
    for line in lines[1:]:
        r1, r10 = map(float, line.split("\t")[2:])
        assert 0 <= r1 <= r10 <= 1


def test_evaluate_perfect_results(files, capsys):
    d = files["dir"]
    assert run("groundtruth", "--base", files["base"], "--queries", files["queries"], "--k", 100,
               "--out", d / "gt.ivecs") == 0
    gt = read_ivecs(d / "gt.ivecs")
    write_results(d / "perfect.tsv", gt, np.zeros(gt.shape, np.float32))
    capsys.readouterr()
    assert run("evaluate", "--results", d / "perfect.tsv", "--gt", d / "gt.ivecs") == 0
    assert capsys.readouterr().out.strip().splitlines()[1].split("\t")[2:] == ["1.0000"] * 3
    write_results(d / "short.tsv", gt[:3], np.zeros((3, 100), np.float32))
    assert run("evaluate", "--results", d / "short.tsv", "--gt", d / "gt.ivecs") == EXIT_DATA


def test_error_exit_codes(files):
    d = files["dir"]
    assert run("train") == EXIT_USAGE
    assert run("bogus") == EXIT_USAGE
    assert run("encode", "--model", d / "missing.unq", "--base", files["base"], "--out", d / "c") == EXIT_DATA
    assert run("train", "--train", files["train"], "--out", d / "nodir" / "m.unq") == EXIT_DATA
    (d / "junk.unq").write_bytes(b"XXXX")
    assert run("encode", "--model", d / "junk.unq", "--base", files["base"], "--out", d / "c") == EXIT_DATA
    save_checkpoint(UnqModel(4, 2, 8, 4, [], [], seed=0), d / "d4.unq")
    assert run("encode", "--model", d / "d4.unq", "--base", files["base"], "--out", d / "c") == EXIT_DATA


def test_config_file_overrides_flags(files):
    d = files["dir"]
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1}))
    assert run("--config", cfg, "train", "--train", files["train"], "--out", d / "c.unq", "--epochs", 5,
               *TINY) == 0
    assert len((d / "c.unq.log").read_text().splitlines()) == 1
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert run("--config", cfg, "train", "--train", files["train"], "--out", d / "c.unq", *TINY) == EXIT_USAGE
