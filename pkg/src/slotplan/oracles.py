"""Independent oracles that certify the stack.

Nothing here shares code with the implementations it checks: value iteration
solves the enumerated MDP by plain dynamic programming, the trajectory-value
oracle re-accumulates returns in a different order (Horner from the leaf,
compensated summation across trajectories), and the gradient sweep trusts
only forward evaluations (central finite differences).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .config import ModelConfig
from .model import GaussianHead, ModelParams, dynamics_step, predict_heads


@dataclass
class TabularSolution:
    """Optimal value/Q tables from value iteration on exact MDP tables."""

    values: np.ndarray  # V*(s)
    q_values: np.ndarray  # Q*(s, a)
    iterations: int
    residual: float


def value_iteration(
    transitions: np.ndarray, rewards: np.ndarray, gamma: float,
    tol: float = 1e-10, max_iterations: int = 100_000,
) -> TabularSolution:
    """Sweep V <- max_a [R + gamma * V(T)] until the update falls below tol.

    ``transitions`` holds next-state indices (deterministic MDP); absorbing
    terminal states are self-loops with zero reward, so their value is 0.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    n_states, _ = transitions.shape
    v = np.zeros(n_states)
    for it in range(1, max_iterations + 1):
        q = rewards + gamma * v[transitions]
        v_new = q.max(axis=1)
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual < tol:
            return TabularSolution(v, rewards + gamma * v[transitions], it, residual)
    raise RuntimeError(f"value iteration did not converge in {max_iterations} sweeps")


class TabularOracleModel:
    """Exact-tables stand-in for the learned model: latent = state index,
    leaf values from a solved value table, uniform policy logits."""

    def __init__(self, transitions: np.ndarray, rewards: np.ndarray, values: np.ndarray):
        self.transitions = transitions
        self.rewards = rewards
        self.values = values
        self.n_actions = transitions.shape[1]

    def initial(self, state_index) -> int:
        return int(state_index)

    def step(self, latent: int, action) -> tuple[int, float]:
        a = int(action)
        return int(self.transitions[latent, a]), float(self.rewards[latent, a])

    def evaluate(self, latent: int):
        return float(self.values[latent]), np.zeros(self.n_actions)


def sve_bruteforce(trajectories: Sequence, gamma: float) -> float:
    """Independent re-computation of the mean simulated return.

    Accumulates each trajectory backwards (Horner) and averages with
    compensated summation, unlike the forward power-sum in the planner.
    """
    values = []
    for rewards, bootstrap, depth in trajectories:
        if depth != len(rewards):
            raise ValueError("trajectory depth disagrees with reward count")
        g = bootstrap
        for r in reversed(rewards):
            g = r + gamma * g
        values.append(g)
    if not values:
        raise ValueError("empty trajectory log")
    return math.fsum(values) / len(values)


# ---------------------------------------------------------------------------
# finite-difference gradient sweep


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradReport:
    tolerance: float
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def failures(self) -> list[TensorCheck]:
        return [c for c in self.checks if c.max_rel_error > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"gradient sweep: {len(self.checks)} tensors, max rel err {self.max_rel_error:.3e}"]
        for c in self.failures:
            lines.append(
                f"  FAIL {c.name}[{c.worst_index}]: analytic {c.analytic:.6e} vs numeric {c.numeric:.6e}"
                f" (rel {c.max_rel_error:.3e})"
            )
        return "\n".join(lines)


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_sweep(
    loss_fn: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradReport:
    """Check reverse-mode gradients of ``loss_fn`` against central finite
    differences over every element of every named parameter.

    ``loss_fn`` must be a deterministic pure function of the parameters'
    current data. Relative error uses a unit floor:
    |a - n| / max(1, |a|, |n|). Failing tensors are identified by name.
    """
    for _, p in named_params:
        p.zero_grad()
    with Tape():
        loss = loss_fn()
    backward(loss)

    report = GradReport(tolerance=tolerance)
    for name, p in named_params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = TensorCheck(name, 0.0, (), 0.0, 0.0)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            err = _rel_error(a, numeric)
            if err > worst.max_rel_error:
                idx = np.unravel_index(i, p.data.shape)
                worst = TensorCheck(name, err, tuple(int(j) for j in idx), a, numeric)
        report.checks.append(worst)
    return report


# ---------------------------------------------------------------------------
# permutation laws


@dataclass
class PermutationReport:
    trials: int
    max_dynamics_deviation: float
    max_head_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (
            self.max_dynamics_deviation <= self.tolerance
            and self.max_head_deviation <= self.tolerance
        )


def permutation_stress(
    params: ModelParams, cfg: ModelConfig, n_trials: int, seed: int,
    k: int = 4, tolerance: float = 1e-6,
) -> PermutationReport:
    """Randomized check that dynamics is permutation-equivariant and the
    reward/value/policy heads are permutation-invariant."""
    rng = np.random.default_rng(seed)
    worst_dyn = 0.0
    worst_head = 0.0
    for _ in range(n_trials):
        slots = rng.normal(size=(k, cfg.slot_dim))
        perm = rng.permutation(k)
        if cfg.action_mode == "discrete":
            action = int(rng.integers(cfg.n_actions))
        else:
            action = rng.uniform(-cfg.action_bound, cfg.action_bound, size=cfg.action_dim)

        out = dynamics_step(slots, action, params, cfg)
        out_perm = dynamics_step(slots[perm], action, params, cfg)
        worst_dyn = max(worst_dyn, float(np.abs(out[perm] - out_perm).max()))

        h = predict_heads(slots, params, cfg)
        h_perm = predict_heads(slots[perm], params, cfg)
        dev = max(abs(h.reward - h_perm.reward), abs(h.value - h_perm.value))
        if isinstance(h.policy, GaussianHead):
            dev = max(
                dev,
                float(np.abs(h.policy.mean - h_perm.policy.mean).max()),
                float(np.abs(h.policy.log_std - h_perm.policy.log_std).max()),
            )
        else:
            dev = max(dev, float(np.abs(h.policy - h_perm.policy).max()))
        worst_head = max(worst_head, dev)
    return PermutationReport(n_trials, worst_dyn, worst_head, tolerance)
