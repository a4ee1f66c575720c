"""Per-episode training logs and the final-episode summary table."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

LOG_COLUMNS = ("seed", "step", "episode", "return", "violations",
               "critic_loss", "actor_loss", "model_loss", "rmse")
SUMMARY_COLUMNS = ("agent", "reward_mean", "reward_sd", "viol_min", "viol_max")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


@dataclass
class TrainLog:
    agent: str
    seed: int
    rows: list = field(default_factory=list)
    wall_time: float = 0.0
    solver_failures: int = 0
    learner: object = field(default=None, repr=False, compare=False)

    def add(self, step, episode, ret, violations, losses=(None, None, None), rmse=None):
        self.rows.append({"seed": self.seed, "step": step, "episode": episode, "return": ret,
                          "violations": violations, "critic_loss": losses[0],
                          "actor_loss": losses[1], "model_loss": losses[2], "rmse": rmse})

    @property
    def returns(self) -> np.ndarray:
        return np.array([r["return"] for r in self.rows], dtype=np.float64)

    @property
    def violations(self) -> np.ndarray:
        return np.array([r["violations"] for r in self.rows], dtype=int)

    def final(self, last=10):
        return self.returns[-last:], self.violations[-last:]


def write_log_csv(path, logs):
    """One CSV for any number of logs (e.g. one per seed); header always written."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for log in logs:
            for row in log.rows:
                w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def summarize(agent: str, logs, last=10) -> dict:
    """Pool the final ``last`` episodes of every seed: mean/sample-SD return, min/max violations."""
    rets = np.concatenate([lg.final(last)[0] for lg in logs]) if logs else np.array([])
    viols = np.concatenate([lg.final(last)[1] for lg in logs]) if logs else np.array([], dtype=int)
    if rets.size == 0:
        return {"agent": agent, "reward_mean": None, "reward_sd": None, "viol_min": None, "viol_max": None}
    sd = float(np.std(rets, ddof=1)) if rets.size > 1 else 0.0
    return {"agent": agent, "reward_mean": float(np.mean(rets)), "reward_sd": sd,
            "viol_min": int(viols.min()), "viol_max": int(viols.max())}


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            if row["reward_mean"] is None:  # no finished episodes
                continue
            w.writerow([row["agent"] if c == "agent" else _fmt(row[c]) for c in SUMMARY_COLUMNS])
