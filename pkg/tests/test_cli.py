import argparse
import json
import subprocess
import sys

import pytest

from mtn_tmt.cli import ARTIFACTS, build_parser, main
from mtn_tmt.config import RunConfig
from mtn_tmt.training import RunRecord

SMALL = ["--d-model", "8", "--heads", "2", "--d-ff", "16", "--vct-depth", "1", "--answer-depth", "1",
         "--batch-size", "4", "--warmup", "10"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "1", "--dialogs", "4", "--turns", "2", "--out", str(root / "data")]) == 0
    assert main(["train", *SMALL, "--epochs", "2", "--train-data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_help_lists_every_flag_with_default():
    parser = build_parser()
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sub in subparsers.choices.items():
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            assert action.required or "default" in (action.help or ""), (name, action.option_strings)
        text = sub.format_help()
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "mtn_tmt", "train", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--decay-weights" in proc.stdout and "(default: 0.3)" in proc.stdout


def test_gen_data_and_train_outputs(workspace):
    assert (workspace / "data" / "manifest.json").exists()
    run_dir = workspace / "run"
    assert {"run.jsonl", "best.ckpt", "config.txt", "vocab.txt", ARTIFACTS} <= {p.name for p in run_dir.iterdir()}
    artifacts = json.loads((run_dir / ARTIFACTS).read_text())
    assert artifacts["command"] == "train" and "best.ckpt" in artifacts["files"]
    assert artifacts["config"]["d_model"] == 8
    record = RunRecord.read(run_dir / "run.jsonl")
    assert len(record.epochs) == 2 and record.config["d_model"] == 8


def test_flags_override_config_file(tmp_path, capsys, workspace):
    cfg = tmp_path / "c.txt"
    cfg.write_text(RunConfig(d_model=16, heads=4, alpha=0.5, epochs=0).to_text())
    code, out, _ = run(capsys, "train", "--config", cfg, "--alpha", "0.25", "--train-data", workspace / "data",
                       "--out", tmp_path / "o")
    assert code == 0 and "no epochs run" in out
    effective = RunConfig.from_file(tmp_path / "o" / "config.txt")
    assert (effective.d_model, effective.alpha) == (16, 0.25)
    record = RunRecord.read(tmp_path / "o" / "run.jsonl")
    assert record.epochs == [] and record.best_epoch is None


def test_train_decay_weights(tmp_path, capsys, workspace):
    code, *_ = run(capsys, "train", *SMALL, "--epochs", "1", "--decay-weights", "--train-data", workspace / "data",
                   "--out", tmp_path)
    assert code == 0
    assert RunConfig.from_file(tmp_path / "config.txt").decay_weights is True


def test_build_vocab(tmp_path, capsys, workspace):
    code, *_ = run(capsys, "build-vocab", "--corpus", workspace / "data", "--out", tmp_path)
    assert code == 0
    tokens = (tmp_path / "vocab.txt").read_text().split()
    assert tokens[:4] == ["<pad>", "<unk>", "<sos>", "<eos>"]


def test_evaluate_and_generate(tmp_path, capsys, workspace):
    ckpt = workspace / "run" / "best.ckpt"
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--data", workspace / "data", "--out", tmp_path / "e")
    assert code == 0 and "BLEU-4" in out
    rows = [json.loads(line) for line in (tmp_path / "e" / "report.jsonl").read_text().splitlines()]
    assert {r["name"] for r in rows if r["type"] == "metric"} == {"BLEU-4", "ROUGE-L", "CIDEr", "perplexity"}
    settings = next(r for r in rows if r["type"] == "settings")
    assert settings["config"]["d_model"] == 8 and settings["refs"] == "1"
    code, *_ = run(capsys, "generate", "--checkpoint", ckpt, "--data", workspace / "data", "--mode", "beam",
                   "--beam-width", "2", "--out", tmp_path / "g")
    assert code == 0
    assert len((tmp_path / "g" / "hypotheses.txt").read_text().splitlines()) == 8


def test_self_references_score_bleu_one(tmp_path, capsys, workspace):
    from mtn_tmt.data import Dataset
    data = Dataset(workspace / "data")
    hyps = tmp_path / "h.txt"
    # answers are too short to hold a 4-gram, so captions stand in as the reference text
    hyps.write_text("".join(f"{ex.key}\t{ex.caption}\n" for ex in data.examples))
    refs = tmp_path / "r.jsonl"
    refs.write_text("".join(json.dumps({"key": ex.key, "references": [ex.caption, "something else"]}) + "\n"
                            for ex in data.examples))
    code, _, _ = run(capsys, "evaluate", "--hypotheses", hyps, "--data", workspace / "data", "--refs", "n",
                     "--references", refs, "--out", tmp_path / "e")
    assert code == 0
    rows = {r["name"]: r for r in map(json.loads, (tmp_path / "e" / "report.jsonl").read_text().splitlines())
            if r["type"] == "metric"}
    assert rows["BLEU-4"]["value"] == 1.0 and rows["BLEU-4"]["refs"] == "n"
    assert rows["perplexity"]["value"] is None


def test_grid_search(tmp_path, capsys, workspace):
    code, out, _ = run(capsys, "grid-search", *SMALL, "--epochs", "1", "--alpha-grid", "0,0.5", "--beta-grid", "0.3",
                       "--train-data", workspace / "data", "--out", tmp_path)
    assert code == 0 and "winner" in out
    rows = [json.loads(line) for line in (tmp_path / "grid.jsonl").read_text().splitlines()]
    points = [r for r in rows if r["type"] == "point"]
    winner = next(r for r in rows if r["type"] == "winner")
    assert len(points) == 2
    assert winner["best_dev_perplexity"] == min(p["best_dev_perplexity"] for p in points)


def test_repeat(tmp_path, capsys, workspace):
    code, out, _ = run(capsys, "repeat", *SMALL, "--epochs", "1", "--n", "2", "--seed-base", "3",
                       "--train-data", workspace / "data", "--out", tmp_path)
    assert code == 0 and "seeds 3, 4" in out
    rows = [json.loads(line) for line in (tmp_path / "repeat.jsonl").read_text().splitlines()]
    assert [r["seed"] for r in rows if r["type"] == "run"] == [3, 4]
    assert {r["metric"] for r in rows if r["type"] == "summary"} == {"BLEU-4", "ROUGE-L", "CIDEr", "perplexity"}


def test_grad_check_single_module(tmp_path, capsys):
    code, out, _ = run(capsys, "grad-check", "--module", "linear", "--out", tmp_path)
    assert code == 0 and "linear" in out and "ok" in out
    row = json.loads((tmp_path / "gradcheck.jsonl").read_text())
    assert row["passed"] and row["max_error"] < 1e-6


def test_grad_check_failure_exits_four(capsys):
    code, out, err = run(capsys, "grad-check", "--module", "layer_norm", "--step", "0.5")
    assert code == 4 and "FAIL" in out
    assert json.loads(err)["exit"] == 4


@pytest.mark.parametrize("argv, code", [
    (["train", "--heads", "3", "--out", "/tmp/x"], 2),
    (["train", "--bogus"], 2),
    (["train", "--out", "/tmp/x"], 2),
    (["evaluate", "--checkpoint", "/nonexistent/best.ckpt", "--data", "/nonexistent", "--out", "/tmp/x"], 3),
])
def test_errors_are_single_line_json(capsys, argv, code):
    got, _, err = run(capsys, *argv)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert payload["exit"] == code and payload["message"]


def test_subprocess_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mtn_tmt", "train", "--d-model", "7", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "ConfigError"


def test_grad_check_default_exits_zero(tmp_path, capsys):
    """The full suite including the whole-model check; see the acceptance suite for the model diagnostic."""
    code, out, _ = run(capsys, "grad-check", "--out", tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "gradcheck.jsonl").read_text().splitlines()]
    failed = [r["module"] for r in rows if not r["passed"]]
    assert code == 0, f"failing checks: {failed}"
