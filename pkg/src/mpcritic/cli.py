"""``mpcritic`` command line: one subcommand per study.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiment
from .envs import LqrEnv, ReactorEnv, rollout_policy, write_trajectory_csv
from .errors import ConfigError, DivergenceError, MpcriticError, NotStabilizableError, NumericalError
from .mpc import TIMING_COLUMNS, time_forward_backward
from .rl.logs import summarize, write_log_csv, write_summary_csv
from .rl.offline import validate_offline
from .rl.train import run_nonlinear_guided, run_online_baseline, run_online_mpcritic

log = logging.getLogger("mpcritic")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_meta(csv_path: Path, cfg: experiment.ExperimentConfig, wall_time: float, **extra):
    meta = {"file": csv_path.name, "experiment": cfg.kind, "config_hash": cfg.digest(),
            "version": code_version(), "seeds": list(cfg.seeds), "wall_time_s": wall_time, **extra}
    with open(csv_path.with_name(csv_path.name + ".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _rows_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


def _lqr_env(cfg, n):
    return LqrEnv(n, M=float(cfg.env("m_weight")) * np.eye(n), R=float(cfg.env("r_weight")) * np.eye(n),
                  horizon=int(cfg.env("horizon")), noise_std=float(cfg.env("noise_std")))


def _ckpt_dir(tcfg, out: Path):
    if not tcfg.checkpoint_every:
        return None
    path = out / "checkpoints"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate_lqr(cfg: experiment.ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    curves, summary = [], []
    for n in cfg.settings["sizes"]:
        n = int(n)
        env = _lqr_env(cfg, n)
        runs = [validate_offline(n, n, seed, cfg.train, env=env) for seed in cfg.seeds]
        for r in runs:
            curves.extend([n, n, r.seed, int(k), _fmt(v)] for k, v in zip(r.steps, r.closed_loop))
        finals = np.array([r.final_rmse for r in runs])
        sd = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
        summary.append([n, n, len(runs), _fmt(finals.mean()), _fmt(2 * sd),
                        _fmt(np.mean([r.model_rmse for r in runs])),
                        _fmt(np.mean([r.gain_rmse for r in runs])),
                        _fmt(np.mean([r.terminal_rmse for r in runs])),
                        _fmt(np.mean([r.terminal_bias for r in runs]))])
    wall = time.perf_counter() - t0
    path = out / "rmse_curves.csv"
    _rows_csv(path, ["n", "m", "seed", "step", "closed_loop_rmse"], curves)
    write_meta(path, cfg, wall)
    header = ["n", "m", "seeds", "final_rmse_mean", "final_rmse_2sd", "model_rmse_mean",
              "gain_rmse_mean", "terminal_rmse_mean", "terminal_bias_mean"]
    path = out / "summary.csv"
    _rows_csv(path, header, summary)
    write_meta(path, cfg, wall)
    _print_table(header, summary)
    return EXIT_OK


def cmd_bench_timing(cfg: experiment.ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    s = cfg.settings
    rows = []
    for n in s["sizes"]:
        for policy in ("mu", "mpc"):
            recs = time_forward_backward(policy, int(n), batch=int(s["batch"]), seeds=cfg.seeds,
                                         horizon=int(s["horizon"]), hidden=tuple(s["hidden"]))
            for rec in recs:
                r = rec.row()
                rows.append([r[c] if c not in ("mean_s", "std_s") else _fmt(r[c]) for c in TIMING_COLUMNS])
    path = out / "timing.csv"
    _rows_csv(path, TIMING_COLUMNS, rows)
    write_meta(path, cfg, time.perf_counter() - t0)
    _print_table(TIMING_COLUMNS, rows)
    return EXIT_OK


def _summary_rows(rows):
    return [[r["agent"], *("" if r[c] is None else (r[c] if isinstance(r[c], int) else f"{r[c]:.6g}")
                           for c in ("reward_mean", "reward_sd", "viol_min", "viol_max"))] for r in rows]


def cmd_train_online(cfg: experiment.ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    n = int(cfg.env("n"))
    env = _lqr_env(cfg, n)
    agents = {"mpcritic": (run_online_mpcritic, cfg.train),
              "dnn": (run_online_baseline, cfg.baseline)}
    summary = []
    for name, (runner, tcfg) in agents.items():
        logs = [runner(tcfg, env, seed, _ckpt_dir(tcfg, out)) for seed in cfg.seeds]
        path = out / f"log_{name}.csv"
        write_log_csv(path, logs)
        write_meta(path, cfg, time.perf_counter() - t0,
                   solver_failures=sum(lg.solver_failures for lg in logs))
        summary.append(summarize(name, logs))
    path = out / "summary.csv"
    write_summary_csv(path, summary)
    write_meta(path, cfg, time.perf_counter() - t0)
    _print_table(("agent", "reward_mean", "reward_sd", "viol_min", "viol_max"), _summary_rows(summary))
    return EXIT_OK


def cmd_train_nonlinear(cfg: experiment.ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    env = ReactorEnv(goal=float(cfg.env("goal")), reward_var=float(cfg.env("reward_var")),
                     horizon=int(cfg.env("horizon")), state_upper=tuple(cfg.env("state_upper")),
                     noise_std=float(cfg.env("noise_std")))
    per_arm = {arm: [] for arm in cfg.train.arms}
    trajectories = {arm: [] for arm in cfg.train.arms}
    for seed in cfg.seeds:
        logs = run_nonlinear_guided(cfg.train, env, seed, checkpoint_dir=_ckpt_dir(cfg.train, out))
        for arm, lg in logs.items():
            per_arm[arm].append(lg)
            if not lg.rows:
                continue
            # one greedy episode with the trained actor, for plotting
            stats = rollout_policy(env, lambda s, t, a=lg.learner: a.act(s, t), 1, seed)
            trajectories[arm].append((seed, stats.trajectories))
    summary = []
    for arm, logs in per_arm.items():
        path = out / f"log_{arm}.csv"
        write_log_csv(path, logs)
        write_meta(path, cfg, time.perf_counter() - t0)
        tpath = out / f"trajectories_{arm}.csv"
        write_trajectory_csv(tpath, trajectories[arm], env.n, env.m)
        write_meta(tpath, cfg, time.perf_counter() - t0)
        summary.append(summarize(arm, logs))
    path = out / "summary.csv"
    write_summary_csv(path, summary)
    write_meta(path, cfg, time.perf_counter() - t0)
    _print_table(("agent", "reward_mean", "reward_sd", "viol_min", "viol_max"), _summary_rows(summary))
    return EXIT_OK


COMMANDS = {
    "validate-lqr": cmd_validate_lqr,
    "bench-timing": cmd_bench_timing,
    "train-online": cmd_train_online,
    "train-nonlinear": cmd_train_nonlinear,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors count as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpcritic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", type=Path, help="YAML file of flat dotted keys")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = experiment.load(args.command, args.config, args.override, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericalError, NotStabilizableError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MpcriticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
