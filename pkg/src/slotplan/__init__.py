"""Object-centric model-based RL: Gumbel tree search over a GNN slot world model."""

from .autodiff import Tape, Tensor, backward
from .config import (
    ConfigError,
    EnvConfig,
    ModelConfig,
    PlannerConfig,
    RunConfig,
    TrainerConfig,
    load_config,
)
from .envs import ContinuousObjectWorld, GridObjectWorld, enumerate_tabular, make_env
from .model import ModelParams, WorldModel, dynamics_step, init_params, predict_heads
from .search import SearchResult, run_search
from .slots import encode, new_episode_permutation
from .training import ReplayBuffer, TrainingRun, TransitionRecord, evaluate_policy, run_training

__version__ = "0.1.0"
