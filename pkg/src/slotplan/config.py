"""Run configuration: one validated record per hyperparameter block.

Configs load from YAML (empty file = all defaults), reject unknown keys, and
round-trip through ``to_dict``/``from_dict``. Command-line flags override
file values at the CLI layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

DISCRETE_ACTIONS = 5  # up, down, left, right, stay
CONTINUOUS_ACTION_DIM = 2


class ConfigError(ValueError):
    """Invalid, unknown, or out-of-range configuration values."""


@dataclass
class EnvConfig:
    variant: str = "discrete"  # "discrete" | "continuous"
    grid_size: int = 5
    n_objects: int = 3
    horizon: int = 0  # 0 = variant default (50 discrete, 100 continuous)
    shaped_reward: bool = False
    shaping_scale: float = 0.01
    contact_radius: float = 0.05
    max_step: float = 0.1
    min_separation: float = 0.15
    permutation_mode: str = "identity"  # slot row order: "identity" | "random"
    noise_sigma: float = 0.0


@dataclass
class ModelConfig:
    slot_dim: int = 16
    hidden: int = 64
    action_embed_dim: int = 8
    logstd_min: float = -5.0
    logstd_max: float = 2.0
    # resolved from the environment block; kept here so the model stack is
    # usable standalone in tests
    action_mode: str = "discrete"
    n_actions: int = DISCRETE_ACTIONS
    action_dim: int = CONTINUOUS_ACTION_DIM
    action_bound: float = 0.1

    @property
    def policy_width(self) -> int:
        if self.action_mode == "discrete":
            return self.n_actions
        return 2 * self.action_dim


@dataclass
class PlannerConfig:
    num_simulations: int = 32  # N
    num_candidates: int = 16  # M (top-m at the root; capped by |A| when discrete)
    depth_cap: int = 8
    mixture_coef: float = 0.75  # policy share of the continuous candidate mixture
    policy_smoothing: float = 1e-3  # epsilon mass mixed toward softmax(logits)
    c_visit: float = 50.0
    c_scale: float = 0.1
    q_floor: float = 0.1  # min Q spread the advantage normalizer resolves


@dataclass
class TrainerConfig:
    lambda_reward: float = 1.0
    lambda_policy: float = 1.0
    lambda_value: float = 0.25
    lambda_consistency: float = 2.0
    gamma: float = 0.97
    td_horizon: int = 5  # l
    unroll_len: int = 5
    warmup_iters: int = 2000  # T1: TD targets before this training iteration
    stale_window: int = 10000  # T2: TD targets for records this close to eviction
    buffer_capacity: int = 100_000
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    batch_size: int = 64
    train_per_env_step: float = 0.25
    min_replay: int = 500
    total_env_steps: int = 50_000
    eval_interval: int = 2_000
    eval_episodes: int = 30
    checkpoint_interval: int = 0  # env steps between checkpoints; 0 = final only
    consistency_loss: str = "mse"  # "mse" | "cosine"
    stop_at_success: float = 0.0  # stop early once eval success rate reaches this (0 = off)
    stop_at_return: float = 0.0  # stop early once mean eval return reaches this (0 = off)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seed: int = 0
    out_dir: str = "runs/run"

    def finalize(self) -> "RunConfig":
        """Resolve derived fields and validate; returns self for chaining."""
        if self.env.horizon == 0:
            self.env.horizon = 50 if self.env.variant == "discrete" else 100
        self.model.action_mode = self.env.variant
        if self.env.variant == "discrete":
            self.model.n_actions = DISCRETE_ACTIONS
        self.model.action_bound = self.env.max_step
        validate(self)
        return self


def _check(cond: bool, name: str, msg: str, errors: list[str]) -> None:
    if not cond:
        errors.append(f"{name}: {msg}")


def validate(cfg: RunConfig) -> None:
    """Raise ConfigError naming every violated field."""
    e: list[str] = []
    env, model, pl, tr = cfg.env, cfg.model, cfg.planner, cfg.trainer

    _check(env.variant in ("discrete", "continuous"), "env.variant", f"unknown variant {env.variant!r}", e)
    _check(env.grid_size >= 2, "env.grid_size", "must be >= 2", e)
    _check(env.n_objects >= 2, "env.n_objects", "needs at least agent and target", e)
    _check(env.horizon >= 0, "env.horizon", "must be >= 0", e)
    _check(env.permutation_mode in ("identity", "random"), "env.permutation_mode", f"unknown mode {env.permutation_mode!r}", e)
    _check(env.noise_sigma >= 0, "env.noise_sigma", "must be >= 0", e)
    if env.variant == "discrete":
        _check(env.n_objects <= env.grid_size**2, "env.n_objects", "exceeds grid capacity", e)
    else:
        _check(0 < env.contact_radius < 0.5, "env.contact_radius", "must be in (0, 0.5)", e)
        _check(0 < env.max_step <= 1.0, "env.max_step", "must be in (0, 1]", e)

    _check(model.slot_dim >= 5, "model.slot_dim", "must hold kind one-hot plus position (>= 5)", e)
    _check(model.hidden >= 1, "model.hidden", "must be positive", e)
    _check(model.action_embed_dim >= 1, "model.action_embed_dim", "must be positive", e)
    _check(model.logstd_min < model.logstd_max, "model.logstd_min", "must be below logstd_max", e)

    _check(pl.num_simulations >= 1, "planner.num_simulations", "must be positive", e)
    _check(pl.num_candidates >= 1, "planner.num_candidates", "must be positive", e)
    _check(pl.depth_cap >= 1, "planner.depth_cap", "must be >= 1", e)
    _check(0.0 <= pl.mixture_coef <= 1.0, "planner.mixture_coef", "must be in [0, 1]", e)
    _check(pl.policy_smoothing >= 0.0, "planner.policy_smoothing", "must be >= 0", e)
    root_actions = (
        min(pl.num_candidates, DISCRETE_ACTIONS) if cfg.env.variant == "discrete" else pl.num_candidates
    )
    _check(
        pl.num_simulations >= root_actions,
        "planner.num_simulations",
        f"must cover the {root_actions} root candidates",
        e,
    )
    if cfg.env.variant == "continuous":
        _check(pl.num_candidates >= 2, "planner.num_candidates", "continuous search needs >= 2 candidates", e)

    for lam_name in ("lambda_reward", "lambda_policy", "lambda_value", "lambda_consistency"):
        _check(getattr(tr, lam_name) >= 0, f"trainer.{lam_name}", "must be >= 0", e)
    _check(0.0 <= tr.gamma < 1.0, "gamma", f"must be in [0, 1), got {tr.gamma}", e)
    _check(tr.td_horizon >= 1, "trainer.td_horizon", "must be >= 1", e)
    _check(tr.unroll_len >= 1, "trainer.unroll_len", "must be >= 1", e)
    _check(tr.buffer_capacity >= 1, "trainer.buffer_capacity", "must be positive", e)
    _check(tr.batch_size >= 1, "trainer.batch_size", "must be positive", e)
    _check(tr.learning_rate > 0, "trainer.learning_rate", "must be positive", e)
    _check(tr.max_grad_norm > 0, "trainer.max_grad_norm", "must be positive", e)
    _check(tr.train_per_env_step >= 0, "trainer.train_per_env_step", "must be >= 0", e)
    _check(tr.min_replay >= 1, "trainer.min_replay", "must be positive", e)
    _check(tr.total_env_steps >= 0, "trainer.total_env_steps", "must be >= 0", e)
    _check(tr.eval_interval >= 1, "trainer.eval_interval", "must be positive", e)
    _check(tr.eval_episodes >= 1, "trainer.eval_episodes", "must be positive", e)
    _check(tr.warmup_iters >= 0, "trainer.warmup_iters", "must be >= 0", e)
    _check(tr.stale_window >= 0, "trainer.stale_window", "must be >= 0", e)
    _check(tr.consistency_loss in ("mse", "cosine"), "trainer.consistency_loss", f"unknown loss {tr.consistency_loss!r}", e)

    if e:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(e))


# ---------------------------------------------------------------------------
# dict / YAML round trip

_BLOCKS = {"env": EnvConfig, "model": ModelConfig, "planner": PlannerConfig, "trainer": TrainerConfig}


def _fill_dataclass(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) under {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        expected = known[name].type
        if expected in ("int",) and isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected int, got bool")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"bad value under {where}: {err}") from err


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    blocks: dict[str, Any] = {}
    for key, cls in _BLOCKS.items():
        sub = data.pop(key, {}) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(sub).__name__}")
        blocks[key] = _fill_dataclass(cls, sub, key)
    seed = data.pop("seed", 0)
    out_dir = data.pop("out_dir", "runs/run")
    if data:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(data))}")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed: expected an integer")
    return RunConfig(seed=seed, out_dir=str(out_dir), **blocks)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    """Parse, resolve, and validate a YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        loc = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"cannot parse {path}{loc}: {err}") from err
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw).finalize()


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
