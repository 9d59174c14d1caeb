import csv
import os

import numpy as np
import pytest

from rlprune import nn
from rlprune._io import atomic_open
from rlprune.agent import sigma_schedule
from rlprune.cli import main, read_config_file, resolve
from rlprune.errors import ConfigError
from rlprune.search import log_to_csv

SMALL_DATA = ["--num-per-class", "60", "--noise-sigma", "0.5"]
QUICK = ["--episodes-explore", "12", "--episodes-exploit", "6"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data, base = str(root / "data"), str(root / "base")
    assert main(["gen-data", "--out", data] + SMALL_DATA) == 0
    assert main(["train", "--data", data, "--out", base, "--epochs", "10"]) == 0
    return root, data, os.path.join(base, "model.amcw")


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_full_pipeline_leaves_artifacts(pipeline, capsys):
    root, data, model = pipeline
    run, ft = str(root / "run"), str(root / "ft")
    assert main(["search", "--model", model, "--data", data, "--out", run, "--handcrafted", "true"] + QUICK) == 0
    assert main(["finetune", "--model", os.path.join(run, "best_model.amcw"), "--data", data, "--out", ft,
                 "--epochs", "1"]) == 0
    for name in ("train.amcd", "val.amcd", "test.amcd"):
        assert os.path.isfile(os.path.join(data, name))
    for name in ("episodes.csv", "best_policy.json", "best_model.amcw", "config_echo", "baselines.json"):
        assert os.path.isfile(os.path.join(run, name))
    assert os.path.isfile(os.path.join(ft, "finetuned.amcw"))
    assert main(["report", "--run", run]) == 0
    summary = open(os.path.join(run, "report", "summary.txt")).read()
    for name in ("search", "uniform", "shallow", "deep"):
        assert name in summary


def test_config_echo_reproduces_run(pipeline):
    root, data, model = pipeline
    first, second = str(root / "echo1"), str(root / "echo2")
    assert main(["search", "--model", model, "--data", data, "--out", first, "--seed", "3"] + QUICK) == 0
    assert main(["search", "--config", os.path.join(first, "config_echo"), "--out", second]) == 0
    for name in ("episodes.csv", "best_model.amcw", "best_policy.json"):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read()


def test_missing_model_names_the_key(pipeline, capsys):
    root, data, _ = pipeline
    assert main(["search", "--data", data, "--out", str(root / "x")]) == 2
    assert "model" in capsys.readouterr().err
    assert main(["search", "--model", str(root / "nope.amcw"), "--data", data, "--out", str(root / "x")]) == 2
    assert "model" in capsys.readouterr().err


def test_unknown_config_key_rejected(pipeline, tmp_path, capsys):
    _, data, model = pipeline
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"model = {model}\ndata = {data}\nout = {tmp_path / 'o'}\nalpah = 0.5\n")
    assert main(["search", "--config", str(cfg)]) == 2
    assert "alpah" in capsys.readouterr().err


def test_bad_values_are_config_errors(pipeline, tmp_path):
    _, data, model = pipeline
    base = ["search", "--model", model, "--data", data, "--out", str(tmp_path / "o")]
    assert main(base + ["--alpha", "lots"]) == 2
    assert main(base + ["--reward", "r_flops"]) == 2  # protocol mismatch
    assert main(base + ["--prune", "fine", "--cost", f"latency:{tmp_path / 'missing.txt'}"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--image-size", "4"]) == 2


def test_infeasible_budget_exit_code(pipeline, tmp_path):
    _, data, model = pipeline
    assert main(["search", "--model", model, "--data", data, "--out", str(tmp_path / "o"), "--alpha", "0.97"]) == 3


def test_numeric_failure_exit_code(pipeline, tmp_path, capsys):
    _, data, _ = pipeline
    assert main(["train", "--data", data, "--out", str(tmp_path / "o"), "--epochs", "3", "--lr", "1e30"]) == 4
    assert "batch" in capsys.readouterr().err
    assert not os.path.exists(tmp_path / "o" / "model.amcw")


def test_amc_threads(pipeline, tmp_path, monkeypatch):
    root, data, model = pipeline
    monkeypatch.setenv("AMC_THREADS", "zero")
    assert main(["search", "--model", model, "--data", data, "--out", str(tmp_path / "o")] + QUICK) == 2
    monkeypatch.setenv("AMC_THREADS", "3")
    assert main(["search", "--model", model, "--data", data, "--out", str(tmp_path / "t3"), "--seed", "3"] + QUICK) == 0
    nn.set_eval_threads(1)
    monkeypatch.delenv("AMC_THREADS")
    assert main(["search", "--model", model, "--data", data, "--out", str(tmp_path / "t1"), "--seed", "3"] + QUICK) == 0
    a = open(tmp_path / "t3" / "episodes.csv").read()
    assert a == open(tmp_path / "t1" / "episodes.csv").read()


def test_report_curves(tmp_path):
    rng = np.random.default_rng(0)
    log = [{"episode": e, "phase": "explore" if e < 100 else "exploit", "reward": float(-rng.random()),
            "val_acc": float(rng.random()), "cost_ratio": 0.5, "sigma": sigma_schedule(e, 100),
            "actions": [0.0, 0.5, 0.25]} for e in range(400)]
    run = tmp_path / "run"
    run.mkdir()
    (run / "episodes.csv").write_text(log_to_csv(log))
    assert main(["report", "--run", str(run), "--out", str(tmp_path / "rep")]) == 0
    rows = read_rows(tmp_path / "rep" / "curves.csv")
    assert len(rows) == 400
    rewards = np.array([float(r["reward"]) for r in rows])
    np.testing.assert_array_equal([float(r["running_best"]) for r in rows], np.maximum.accumulate(rewards))
    sig = [float(r["sigma"]) for r in rows]
    assert len(set(sig[:100])) == 1
    assert all(a > b for a, b in zip(sig[100:], sig[101:]))
    policy = read_rows(tmp_path / "rep" / "policy.csv")
    assert [float(r["ratio_removed"]) for r in policy] == [0.0, 0.5, 0.25]


def test_report_rejects_missing_or_corrupt_log(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == 2
    (tmp_path / "episodes.csv").write_text("not,a,log\n1,2,3\n")
    assert main(["report", "--run", str(tmp_path)]) == 2


def test_correlate_ablate_iterate_smoke(pipeline, tmp_path):
    _, data, model = pipeline
    common = ["--model", model, "--data", data]
    assert main(["correlate"] + common + ["--out", str(tmp_path / "c"), "--num-policies", "10",
                                          "--finetune-epochs", "1"]) == 0
    assert len(read_rows(tmp_path / "c" / "correlation.csv")) == 10
    assert main(["correlate"] + common + ["--out", str(tmp_path / "c2"), "--num-policies", "3"]) == 2
    assert main(["ablate-state"] + common + ["--out", str(tmp_path / "a"), "--episodes-explore", "3",
                                             "--episodes-exploit", "0"]) == 0
    names = [r["name"] for r in read_rows(tmp_path / "a" / "ablation.csv")]
    assert names == ["full", "no_index", "no_layer_embedding"]
    assert main(["iterate"] + common + ["--out", str(tmp_path / "i"), "--densities", "0.5,0.4", "--cost", "params",
                                        "--episodes-explore", "3", "--episodes-exploit", "0",
                                        "--finetune-epochs", "1"]) == 0
    stages = read_rows(tmp_path / "i" / "stages.csv")
    assert [float(s["density_target"]) for s in stages] == [0.5, 0.4]


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nalpha = 0.3   # trailing\nstate-features = t,n,c\n\n")
    values = read_config_file(path)
    assert values == {"alpha": "0.3", "state_features": "t,n,c"}
    cfg = resolve("search", dict(values, model="m", data="d", out="o"), {"alpha": "0.4"})
    assert cfg["alpha"] == 0.4 and cfg["state_features"] == ("t", "n", "c")
    path.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "artifact.bin"
    target.write_bytes(b"old")
    with pytest.raises(RuntimeError):
        with atomic_open(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("killed")
    assert target.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["artifact.bin"]
