"""Training hyperparameters shared by all experiment recipes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import ConfigError


@dataclass
class TrainConfig:
    # learning rates per loss
    lr_critic: float = 1e-3
    lr_actor: float = 1e-3
    lr_model: float = 1e-3
    lr_stage: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "constant"  # or "linear": decays to lr_final_frac * lr
    lr_final_frac: float = 0.01
    batch_size: int = 256
    gamma: float = 0.99
    rho: float = 10.0
    horizon: int = 1
    tau: float = 0.005
    policy_delay: int = 2
    total_steps: int = 100_000
    update_ratio: int = 1
    learning_starts: int = 1000
    buffer_size: int = 1_000_000
    explore_sigma: float = 0.1
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    hidden: tuple = (100, 100)
    critic_hidden: tuple = (256,)
    model_hidden: tuple = (64, 64)
    learn_stage_cost: bool = False
    terminal_form: str = "sym"
    twin: bool = True
    checkpoint_every: int = 0  # environment steps; 0 disables
    seeds: tuple = (0,)
    # offline validation
    dataset_size: int = 100_000
    divergence_rmse: float = 1e3
    record_every: int = 100
    # online/nonlinear episodes
    episode_length: int = 50
    qp_rho: float = 1e3
    qp_tol: float = 1e-9
    qp_max_iter: int = 500
    mpc_horizon: int = 10
    # nonlinear guided learning
    guided_stage_var: float = 0.25
    arms: tuple = ("vanilla", "guided", "constrained")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        _coerce_numbers(self)
        for name in ("lr_critic", "lr_actor", "lr_model", "lr_stage"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("tau", "rho", "qp_rho", "guided_stage_var"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.terminal_form not in ("sym", "factor"):
            raise ConfigError(f"unknown terminal_form {self.terminal_form!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.total_steps < 0 or self.policy_delay < 1 or self.mpc_horizon < 1:
            raise ConfigError("total_steps must be >= 0, policy_delay and mpc_horizon >= 1")
        bad = set(self.arms) - {"vanilla", "guided", "constrained"}
        if bad:
            raise ConfigError(f"unknown arms: {', '.join(sorted(bad))}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.horizon < 1 or self.update_ratio < 1:
            raise ConfigError("batch_size, horizon and update_ratio must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.model_hidden = tuple(int(h) for h in self.model_hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.arms = tuple(str(a) for a in self.arms)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def updated(self, **changes):
        known = {f.name for f in fields(self)}
        bad = sorted(set(changes) - known)
        if bad:
            raise ConfigError(f"unknown training keys: {', '.join(bad)}")
        return replace(self, **changes)


def _coerce_numbers(cfg):
    """Cast numeric fields to the type of their default (YAML reads "1e-3" as text)."""
    for f in fields(cfg):
        kind = type(f.default)
        if kind not in (int, float) or isinstance(getattr(cfg, f.name), bool):
            continue
        value = getattr(cfg, f.name)
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{f.name} must be a number, got {value!r}") from None
        if kind is int and not number.is_integer():
            raise ConfigError(f"{f.name} must be an integer, got {value!r}")
        cast = int(number) if kind is int else number
        setattr(cfg, f.name, cast)


def offline_defaults(**kw) -> TrainConfig:
    """Offline LQR recovery: Adam with linear decay, one-step critic, factored terminal."""
    base = dict(optimizer="adam", lr_critic=1e-2, lr_actor=1e-2, lr_model=1e-2,
                lr_schedule="linear", gamma=0.99, horizon=1, tau=0.05,
                terminal_form="factor", total_steps=100_000, batch_size=256,
                seeds=(0, 1, 2, 3, 4))
    base.update(kw)
    return TrainConfig(**base)
