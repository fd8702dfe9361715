import shutil

import pytest

from reslm.checkpoint import load_checkpoint
from reslm.cli import build_parser, main, resolve_config
from reslm.config import ExperimentConfig, load_config
from reslm.experiment import METHODS, TABLE_ORDER
from reslm.metrics import parse_results_table

TINY = [
    "--vocab-size", "6", "--len-max", "5", "--n-source-paired", "60", "--n-source-text", "100",
    "--n-target-text", "100", "--n-test", "8", "--hidden", "8", "--emb-dim", "4", "--att-dim", "4",
    "--asr-epochs", "1", "--lm-epochs", "1", "--res-epochs", "1", "--beam", "3",
]

CORPORA = ("source_paired.tsv", "source_text.tsv", "target_text.tsv", "test.tsv")


@pytest.fixture(scope="module")
def tiny_ws(tmp_path_factory):
    ws = tmp_path_factory.mktemp("tiny")
    assert main(["run-crossdomain", "--workdir", str(ws), "--quiet", "--no-bench"] + TINY) == 0
    return ws


def test_gen_data_is_byte_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--workdir", str(tmp_path / d), "--quiet"] + TINY) == 0
    for name in CORPORA + ("grammar_source.txt", "grammar_target.txt", "codebook.txt", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["gen-data", "--seed", "8", "--workdir", str(tmp_path / "c"), "--quiet"] + TINY) == 0
    assert (tmp_path / "a" / "test.tsv").read_bytes() != (tmp_path / "c" / "test.tsv").read_bytes()


def test_end_to_end_run_writes_table(tiny_ws):
    rows = parse_results_table((tiny_ws / "results.txt").read_text())
    assert [r[0] for r in rows] == list(TABLE_ORDER)
    assert all(0 <= w for _, w, _ in rows)
    for m in METHODS:
        assert (tiny_ws / f"hyp_{m}.txt").exists()


def test_manifest_lines_carry_config_hash(tiny_ws):
    cfg_hash = load_config(tiny_ws / "config.txt").hash()
    lines = (tiny_ws / "manifest.txt").read_text().splitlines()
    commands = [l.split("\t")[0] for l in lines]
    assert commands[:1] == ["gen-data"] and "evaluate" in commands
    for l in lines:
        assert f"config_sha256 {cfg_hash}" in l.split("\t")


def test_decode_flags_resolve_to_defaults(tmp_path):
    ns = build_parser().parse_args(["decode", "--method", "residual", "--lambda-lm", "0.6", "--beam", "10", "--workdir", str(tmp_path)])
    cfg = resolve_config(ns)
    d = ExperimentConfig()
    assert cfg == d
    assert cfg.fusion("residual").lambda_lm == 0.6 and cfg.beam_config().beam == 10


def test_decode_single_method_with_flags(tiny_ws, tmp_path):
    ws = tmp_path / "w"
    shutil.copytree(tiny_ws, ws)
    (ws / "hyp_residual.txt").unlink()
    assert main(["decode", "--method", "residual", "--lambda-lm", "0.6", "--beam", "3", "--workdir", str(ws), "--quiet"]) == 0
    assert (ws / "hyp_residual.txt").read_bytes() == (tiny_ws / "hyp_residual.txt").read_bytes()
    last = (ws / "manifest.txt").read_text().splitlines()[-1]
    assert last.startswith("decode\t") and "hyp_residual.txt" in last


def test_missing_artifact_names_path(tmp_path, capsys):
    assert main(["train-asr", "--workdir", str(tmp_path), "--quiet"]) == 3
    err = capsys.readouterr().err
    assert err.startswith("ERR:missing_artifact:") and str(tmp_path) in err and "gen-data" in err


def test_config_version_mismatch_is_refused(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("config_version = 2\nseed = 3\n")
    assert main(["gen-data", "--config", str(cfg), "--workdir", str(tmp_path / "w")]) == 4
    assert capsys.readouterr().err.startswith("ERR:version_mismatch:")
    assert not (tmp_path / "w").exists()


def test_bad_config_key_and_value(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("no_such_key = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--workdir", str(tmp_path / "w")]) == 2
    assert "ERR:config:" in capsys.readouterr().err
    assert main(["gen-data", "--seed", "x", "--workdir", str(tmp_path / "w")]) == 2


def test_checkpoint_version_mismatch_is_refused(tiny_ws, tmp_path, capsys):
    ws = tmp_path / "w"
    shutil.copytree(tiny_ws, ws)
    p = ws / "asr.ckpt"
    p.write_bytes(p.read_bytes().replace(b"RLMCKPT 1", b"RLMCKPT 9", 1))
    assert main(["decode", "--method", "none", "--workdir", str(ws), "--quiet"]) == 4
    assert capsys.readouterr().err.startswith("ERR:version_mismatch:")


def test_corrupt_corpus_is_a_format_error(tiny_ws, tmp_path, capsys):
    ws = tmp_path / "w"
    shutil.copytree(tiny_ws, ws)
    with open(ws / "test.tsv", "a") as f:
        f.write("broken line without tabs\n")
    assert main(["decode", "--method", "none", "--workdir", str(ws), "--quiet"]) == 5
    assert capsys.readouterr().err.startswith("ERR:format:")


def test_training_emits_a_checkpoint_per_epoch(tiny_ws):
    names = sorted(p.name for p in (tiny_ws / "epochs").iterdir())
    assert names == [
        "asr.e01.ckpt", "lm_source.e01.ckpt", "lm_target.e01.ckpt",
        "residual.e01.ckpt", "residual_elementwise_mse.e01.ckpt",
    ]
    # the last snapshot holds the final weights
    final, hyper = load_checkpoint(tiny_ws / "asr.ckpt", "asr")
    snap, snap_hyper = load_checkpoint(tiny_ws / "epochs" / "asr.e01.ckpt", "asr")
    assert snap_hyper == {**hyper, "epoch": 1}
    for k, v in final.params.items():
        assert snap.params[k].data.tobytes() == v.data.tobytes()
