import csv
import json
import subprocess
import sys

import pytest

from mpcritic import experiment
from mpcritic.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from mpcritic.errors import ConfigError
from mpcritic.mpc import TIMING_COLUMNS

from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY_ONLINE = ["--override", "train.total_steps=100", "--override", "train.learning_starts=50",
               "--override", "train.batch_size=16", "--override", "baseline.total_steps=100",
               "--override", "baseline.learning_starts=50", "--override", "baseline.batch_size=16",
               "--override", "env.n=2"]
TINY_NONLINEAR = ["--override", "train.total_steps=100", "--override", "train.learning_starts=50",
                  "--override", "train.batch_size=16", "--override", "train.hidden=[8]",
                  "--override", "train.critic_hidden=[8]", "--override", "train.model_hidden=[8]"]


def _read(path):
    return list(csv.reader(open(path)))


def test_flatten_nested_and_dotted_agree():
    assert experiment.flatten({"train": {"lr_critic": 0.1}, "seeds": [1]}) == \
        {"train.lr_critic": 0.1, "seeds": [1]}


@pytest.mark.parametrize("name,kind", [("validate_lqr", "validate-lqr"), ("bench_timing", "bench-timing"),
                                       ("train_online", "train-online"),
                                       ("train_nonlinear", "train-nonlinear")])
def test_shipped_configs_parse(name, kind):
    cfg = experiment.load(kind, CONFIGS / f"{name}.yaml")
    assert cfg.kind == kind and cfg.seeds


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="train.learning_rate"):
        experiment.resolve("train-online", {"train.learning_rate": 1.0})
    with pytest.raises(ConfigError, match="bogus"):
        experiment.resolve("bench-timing", {"bogus": 1})


def test_override_beats_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  tau: 0.1\nseeds: [3, 4]\n")
    cfg = experiment.load("train-nonlinear", path, ["train.tau=0.2"], seed=7)
    assert cfg.train.tau == 0.2 and cfg.seeds == (7,) and cfg.train.seeds == (7,)
    assert cfg.digest() != experiment.load("train-nonlinear", path).digest()


def test_wrong_experiment_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("experiment: bench-timing\n")
    with pytest.raises(ConfigError):
        experiment.load("train-online", path)


def test_exit_codes(tmp_path):
    assert main(["train-online", "--out", str(tmp_path), "--override", "train.nope=1"]) == EXIT_CONFIG
    assert main(["train-online", "--out", str(tmp_path), "--override", "seeds=[]"]) == EXIT_CONFIG
    assert main(["train-online", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["bench-timing", "--out", str(blocker / "sub")]) == EXIT_IO
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_CONFIG


def test_divergence_exit_code(tmp_path):
    code = main(["validate-lqr", "--out", str(tmp_path), "--override", "sizes=[2]",
                 "--override", "train.total_steps=50", "--override", "train.record_every=10",
                 "--override", "train.divergence_rmse=1e-9", "--override", "train.dataset_size=100"])
    assert code == EXIT_DIVERGED


def test_zero_steps_writes_headers_only(tmp_path):
    code = main(["train-online", "--out", str(tmp_path), "--override", "train.total_steps=0",
                 "--override", "baseline.total_steps=0"])
    assert code == EXIT_OK
    assert _read(tmp_path / "summary.csv") == [["agent", "reward_mean", "reward_sd", "viol_min", "viol_max"]]
    assert len(_read(tmp_path / "log_mpcritic.csv")) == 1


def test_train_online_outputs(tmp_path):
    assert main(["train-online", "--out", str(tmp_path), "--seed", "1", *TINY_ONLINE]) == EXIT_OK
    rows = _read(tmp_path / "summary.csv")
    assert rows[0] == ["agent", "reward_mean", "reward_sd", "viol_min", "viol_max"]
    assert [r[0] for r in rows[1:]] == ["mpcritic", "dnn"]
    log = _read(tmp_path / "log_dnn.csv")
    assert "wall_time" not in log[0] and len(log) == 3
    meta = json.loads((tmp_path / "summary.csv.meta.json").read_text())
    assert {"config_hash", "version", "seeds", "wall_time_s"} <= set(meta)
    assert meta["seeds"] == [1]


def test_same_seed_reruns_are_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["train-nonlinear", "--out", str(tmp_path / sub), "--seed", "0",
                     "--override", "train.arms=[guided]", *TINY_NONLINEAR]) == EXIT_OK
    for name in ("log_guided.csv", "trajectories_guided.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bench_timing_rows(tmp_path):
    code = main(["bench-timing", "--out", str(tmp_path), "--override", "sizes=[2, 3]",
                 "--override", "batch=4", "--override", "hidden=[8]"])
    assert code == EXIT_OK
    rows = _read(tmp_path / "timing.csv")
    assert tuple(rows[0]) == TIMING_COLUMNS
    keys = [(r[0], r[3], r[4]) for r in rows[1:]]
    assert len(keys) == len(set(keys)) == 2 * 2 * 2


def test_validate_lqr_outputs(tmp_path):
    code = main(["validate-lqr", "--out", str(tmp_path), "--override", "sizes=[2]",
                 "--override", "train.total_steps=20", "--override", "train.record_every=10",
                 "--override", "train.dataset_size=100", "--override", "seeds=[0, 1]"])
    assert code == EXIT_OK
    curves = _read(tmp_path / "rmse_curves.csv")
    assert curves[0] == ["n", "m", "seed", "step", "closed_loop_rmse"]
    assert len(curves) == 1 + 2 * 3
    assert len(_read(tmp_path / "summary.csv")) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mpcritic.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-online" in proc.stdout


def test_exponent_without_dot_is_numeric():
    cfg = experiment.load("train-online", None, ["train.lr_critic=1e-3", "train.total_steps=2e3"])
    assert cfg.train.lr_critic == 1e-3 and cfg.train.total_steps == 2000
    with pytest.raises(ConfigError):
        experiment.load("train-online", None, ["train.tau=fast"])
    with pytest.raises(ConfigError):
        experiment.load("train-online", None, ["train.batch_size=2.5"])
