import csv
import json

import pytest

from fmer.cli import main

TINY = ["--set", "env_name=multigoal", "--set", "total_steps=30", "--set", "warmup_steps=40",
        "--set", "batch=16", "--set", "hidden=16", "--set", "n_hidden=2", "--set", "candidates=4",
        "--set", "ode_steps=4", "--set", "eval_interval=15", "--set", "n_eval=1",
        "--set", "buffer_capacity=1000", "--set", "checkpoint_interval=15"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", *TINY, "--run-dir", str(d)]) == 0
    return d


def test_train_layout(run_dir):
    assert (run_dir / "metrics.csv").exists()
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == [
        "step_00000015.fmer", "step_00000030.fmer"]


def test_missing_env_is_config_error(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path / "r")]) == 2
    assert "env_name" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert main(["train", "--preset", "multigoal-desk", "--set", "bogus=1", "--run-dir", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_file_then_set(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("env_name = multigoal\ntotal_steps = 5\nwarmup_steps = 0\nbatch = 4\nhidden = 8\n"
                   "n_hidden = 1\ncandidates = 2\node_steps = 2\n")
    d = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--set", "total_steps=0", "--run-dir", str(d)]) == 0
    assert "total_steps = 0" in (d / "config.txt").read_text()


def test_eval_json_deterministic(run_dir, tmp_path):
    ck = run_dir / "checkpoints" / "step_00000030.fmer"
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", str(ck), "--episodes", "2", "--json", str(a)]) == 0
    assert main(["eval", str(ck), "--episodes", "2", "--json", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["episodes"] == 2


def test_eval_zero_episodes(run_dir, capsys):
    assert main(["eval", str(run_dir / "checkpoints" / "step_00000030.fmer"), "--episodes", "0"]) == 0
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1]) == {"episodes": 0}


def test_eval_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.fmer"
    bad.write_bytes(b"nope")
    assert main(["eval", str(bad)]) == 4
    assert main(["eval", str(tmp_path / "missing.fmer")]) == 4


def test_resume_mismatch_exit_code(run_dir, tmp_path):
    ck = str(run_dir / "checkpoints" / "step_00000015.fmer")
    args = ["train", *TINY, "--run-dir", str(tmp_path / "r2"), "--resume", ck]
    assert main(args + ["--set", "gamma=0.9"]) == 3


def test_resume_allowed_change_continues(run_dir, tmp_path):
    ck = str(run_dir / "checkpoints" / "step_00000015.fmer")
    d = tmp_path / "r3"
    assert main(["train", *TINY, "--run-dir", str(d), "--resume", ck, "--set", "n_eval=2"]) == 0
    with open(d / "metrics.csv") as fh:
        steps = [int(r["step"]) for r in csv.DictReader(fh)]
    assert steps[0] > 15 and steps[-1] == 30


def test_plotdata_kinds(run_dir, tmp_path):
    out = tmp_path / "pd"
    assert main(["plotdata", str(run_dir), "--kind", "curves", "--out", str(out)]) == 0
    with open(out / "curves.csv") as fh:
        assert len(list(csv.reader(fh))) == len(open(run_dir / "metrics.csv").readlines())
    assert main(["plotdata", str(run_dir), "--kind", "qgrid", "--grid-n", "3", "--out", str(out)]) == 0
    with open(out / "qgrid.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["a1", "a2", "q"] and len(rows) == 10
    assert main(["plotdata", str(run_dir), "--kind", "trajectories", "--states-n", "2", "--out", str(out)]) == 0
    data = json.loads((out / "trajectories.json").read_text())
    assert len(data["states"]) == 4
    first = data["states"][0]
    assert len(first["paths"]) == 4 and len(first["paths"][0]) == 5
    assert first["arrow"] == first["actions"][first["selected"]]
    assert main(["plotdata", str(run_dir), "--kind", "heatmap"]) == 2
    assert main(["plotdata", str(tmp_path), "--kind", "qgrid"]) == 4
