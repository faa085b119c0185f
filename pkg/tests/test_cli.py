"""Command-line interface: dataset generation, eval, resume, error contracts."""

import json
import os
import shutil
import subprocess
import sys

import pytest

from conftest import small_config

from albedoadapt.adaptloop import read_ledger
from albedoadapt.cli import main
from albedoadapt.dataio import load_dataset
from albedoadapt.torchutil import Checkpoint


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture()
def cfg_file(small_run, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(small_run.cfg.to_json())
    return str(path)


@pytest.fixture()
def run_copy(small_run, tmp_path):
    dst = str(tmp_path / "run")
    shutil.copytree(small_run.run_dir, dst)
    return dst


def test_synthgen_writes_a_loadable_dataset(tmp_path, capsys):
    out = str(tmp_path / "ds")
    code, stdout, _ = run_cli(
        ["synthgen", "--domain", "synthetic", "--count", "5", "--size", "12",
         "--out", out, "--seed", "3"],
        capsys,
    )
    assert code == 0
    assert last_json(stdout) == {"out": out, "count": 5, "domain": "synthetic"}
    pairs = load_dataset(out)
    assert len(pairs) == 5
    assert pairs[0].rgb.shape == (12, 12, 3)

    out2 = str(tmp_path / "ds2")
    run_cli(["synthgen", "--domain", "synthetic", "--count", "5", "--size", "12",
             "--out", out2, "--seed", "3"], capsys)
    again = load_dataset(out2)
    assert [p.sample_id for p in again] == [p.sample_id for p in pairs]


def test_usage_errors_exit_2_with_json(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synthgen", "--domain", "cartoon", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2
    err = last_json(capsys.readouterr().err)
    assert err["error"]["type"] == "UsageError"

    with pytest.raises(SystemExit) as exc:
        main(["synthgen", "--domain", "synthetic"])  # --out is required
    assert exc.value.code == 2


def test_runtime_errors_exit_1_with_json(tmp_path, capsys):
    code, _, err = run_cli(["init", "--out", str(tmp_path / "run")], capsys)
    assert code == 1
    body = last_json(err)
    assert body["error"]["type"] == "ConfigError"
    assert "--synthetic" in body["error"]["message"]

    bad = tmp_path / "broken.json"
    bad.write_text("{nope")
    code, _, err = run_cli(
        ["synthgen", "--domain", "synthetic", "--config", str(bad),
         "--out", str(tmp_path / "y")],
        capsys,
    )
    assert code == 1
    assert "error" in last_json(err)


def test_eval_without_classifier(small_run, cfg_file, tmp_path, capsys):
    datasets = json.load(open(os.path.join(small_run.run_dir, "datasets.json")))
    model_path = os.path.join(small_run.run_dir, "iter_2", "model.ckpt")
    out = str(tmp_path / "report")
    code, stdout, _ = run_cli(
        ["eval", "--model", model_path, "--pool", datasets["eval"],
         "--config", cfg_file, "--out", out],
        capsys,
    )
    assert code == 0
    report = last_json(stdout)
    assert report["negative_ratio"] is None
    assert report["n"] == small_run.cfg.eval_count
    assert report["mse_mean"] > 0.0
    assert report["model_hash"] == Checkpoint.load(model_path).content_hash()
    assert json.load(open(os.path.join(out, "metrics.json"))) == report
    assert os.path.isdir(os.path.join(out, "eval_albedos"))


def test_eval_with_classifier_matches_loop_metrics(small_run, cfg_file, tmp_path, capsys):
    datasets = json.load(open(os.path.join(small_run.run_dir, "datasets.json")))
    it2 = os.path.join(small_run.run_dir, "iter_2")
    out = str(tmp_path / "report")
    code, stdout, _ = run_cli(
        ["eval", "--model", os.path.join(it2, "model.ckpt"),
         "--classifier", os.path.join(it2, "classifier.ckpt"),
         "--pool", datasets["eval"], "--config", cfg_file, "--out", out],
        capsys,
    )
    assert code == 0
    report = last_json(stdout)
    assert 0.0 <= report["negative_ratio"] <= 1.0
    # same model, config, and eval set as the loop's own iteration-2 report
    loop_metrics = json.load(open(os.path.join(it2, "metrics.json")))
    for key in ("mse_mean", "psnr_mean", "ssim_mean", "negative_ratio", "model_hash"):
        assert report[key] == loop_metrics[key]


def test_loop_resumes_a_finished_run(run_copy, cfg_file, capsys):
    before = read_ledger(run_copy)
    code, stdout, _ = run_cli(
        ["loop", "--iters", "2", "--config", cfg_file, "--out", run_copy], capsys
    )
    assert code == 0
    body = last_json(stdout)
    assert body["iteration"] == 2
    assert body["model_hash"] == before["iterations"][-1]["model_hash"]
    assert read_ledger(run_copy) == before


def test_dpo_under_a_new_name(run_copy, cfg_file, capsys):
    code, stdout, _ = run_cli(
        ["dpo", "--name", "probe", "--config", cfg_file, "--out", run_copy], capsys
    )
    assert code == 0
    body = last_json(stdout)
    ledger = read_ledger(run_copy)
    assert body["name"] == "probe"
    assert body["model_hash"] == ledger["dpo"]["probe"]["model_hash"]
    assert body["n_pairs"] == ledger["dpo"]["probe"]["n_pairs"]
    assert os.path.exists(os.path.join(run_copy, "probe", "model.ckpt"))
    # clean re-run of the same recipe reproduces the committed model
    assert body["model_hash"] == ledger["dpo"]["dpo"]["model_hash"]


def test_seed_flag_overrides_config(tmp_path, capsys):
    cfg = small_config(seed=7)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_cli(["synthgen", "--domain", "real_like", "--count", "4", "--size", "12",
             "--config", str(path), "--out", out1], capsys)
    run_cli(["synthgen", "--domain", "real_like", "--count", "4", "--size", "12",
             "--config", str(path), "--seed", "8", "--out", out2], capsys)
    ids1 = [p.sample_id for p in load_dataset(out1)]
    ids2 = [p.sample_id for p in load_dataset(out2)]
    assert ids1 != ids2


def test_console_script_is_installed(tmp_path):
    out = str(tmp_path / "ds")
    proc = subprocess.run(
        ["albedoadapt", "synthgen", "--domain", "synthetic", "--count", "3",
         "--size", "12", "--out", out, "--seed", "1"],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout.strip().splitlines()[-1])["count"] == 3
    assert len(load_dataset(out)) == 3
