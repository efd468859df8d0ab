import json
import subprocess
import sys

import numpy as np
import pytest

from dnet.analysis import count_params
from dnet.checkpoint import save_checkpoint
from dnet.cli import main
from dnet.models import ModelConfig, build_model, weight_store
from dnet.volume import load_volume, save_volume

TINY = ModelConfig(base_width=4, num_stages=2, num_classes=3)


def run(*argv):
    return subprocess.run([sys.executable, "-m", "dnet.cli", *argv], capture_output=True, text=True)


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "c.json"
    TINY.to_json(path)
    return path


def test_erf_subcommand(capsys):
    assert main(["erf", "--layers", "5:1:1,7:3:1"]) == 0
    assert capsys.readouterr().out.strip() == "23"
    assert main(["erf", "--layers", "5x5x3:1:1,7:3x3x1:1"]) == 0
    assert capsys.readouterr().out.strip() == "23x23x9"


def test_usage_errors_exit_two():
    for argv in (["erf"], ["erf", "--layers", "5:1"], ["frobnicate"], ["summary", "--bogus"],
                 ["summary", "--input-dims", "96,96"]):
        r = run(*argv)
        assert r.returncode == 2, argv
        assert "usage" in r.stderr


def test_runtime_failure_is_one_err_line(tmp_path):
    r = run("summary", "--config", str(tmp_path / "missing.json"))
    assert r.returncode == 1
    lines = r.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("ERR: FileNotFoundError:")


def test_indivisible_input_is_reported(config_path):
    r = run("summary", "--config", str(config_path), "--input-dims", "12,16,16")
    assert r.returncode == 1 and "multiple of 8" in r.stderr


def test_summary_total_matches_count_params(capsys):
    assert main(["summary", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["params_trainable"] == count_params(build_model(ModelConfig(), meta=True)).trainable
    assert report["dlk_erf"] == 23


def test_summary_text_and_flops(config_path, capsys):
    assert main(["summary", "--config", str(config_path), "--input-dims", "16,16,16"]) == 0
    assert "params" in capsys.readouterr().out
    assert main(["flops", "--config", str(config_path), "--input-dims", "16,16,16", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["flops_x2"] - report["flops_x1"] == report["conv_macs"]


def test_infer_zero_head_gives_background(tmp_path, config_path):
    store = weight_store(build_model(TINY, seed=2))
    store["salience.head.weight"][...] = 0
    store["salience.head.bias"][...] = 0
    save_checkpoint(store, tmp_path / "w.dnw")
    image = np.random.default_rng(0).standard_normal((1, 8, 8, 8)).astype(np.float32)
    save_volume(image, tmp_path / "in.dvol")
    argv = ["infer", "--config", str(config_path), "--weights", str(tmp_path / "w.dnw"),
            "--input", str(tmp_path / "in.dvol")]
    assert main([*argv, "--output", str(tmp_path / "m.dvol"), "--argmax"]) == 0
    mask = load_volume(tmp_path / "m.dvol")
    assert mask.dtype == np.uint16 and mask.shape == (1, 8, 8, 8) and not mask.any()
    assert main([*argv, "--output", str(tmp_path / "l.dvol")]) == 0
    logits = load_volume(tmp_path / "l.dvol")
    assert logits.shape == (3, 8, 8, 8) and not logits.any()


def test_infer_rejects_label_input(tmp_path, config_path):
    save_checkpoint(weight_store(build_model(TINY)), tmp_path / "w.dnw")
    save_volume(np.zeros((1, 8, 8, 8), np.uint16), tmp_path / "in.dvol")
    r = run("infer", "--config", str(config_path), "--weights", str(tmp_path / "w.dnw"),
            "--input", str(tmp_path / "in.dvol"), "--output", str(tmp_path / "o.dvol"))
    assert r.returncode == 1 and r.stderr.startswith("ERR:")


def test_gradcheck_exit_codes(tmp_path, capsys):
    ok = tmp_path / "ok.json"
    ModelConfig(variant="dlknet", base_width=8, num_stages=1, num_classes=2).to_json(ok)
    assert main(["gradcheck", "--config", str(ok), "--max-entries", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert all(line.startswith("PASS") for line in lines)
    assert "overall" in lines[-1]
    # an unreachable tolerance must fail
    assert main(["gradcheck", "--config", str(ok), "--max-entries", "2", "--tol", "1e-12"]) == 1
    assert capsys.readouterr().out.splitlines()[-1].startswith("FAIL")


def test_train_toy_outputs(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    ModelConfig(base_width=4, num_stages=1, num_classes=2).to_json(cfg)
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"extents": [8, 8, 8], "radius_range": [2, 3]}))
    out = [str(tmp_path / n) for n in ("w.dnw", "t.csv", "t.json")]
    argv = ["train-toy", "--config", str(cfg), "--spec", str(spec), "--steps", "3", "--seed", "1",
            "--out", out[0], "--trace", out[1], "--json", out[2]]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert "validation: dice=" in first
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 4
    trace = (tmp_path / "t.csv").read_text()
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "t.csv").read_text() == trace
