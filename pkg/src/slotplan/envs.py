"""Synthetic reach-the-target worlds over a handful of objects.

Two variants share the same terminal semantics: touching the target ends the
episode with reward 1, touching a distractor ends it with reward 0, and the
horizon cuts off with 0. The discrete variant is a small grid (exactly
enumerable for the tabular oracle); the continuous variant moves the agent by
a bounded 2-D displacement inside the unit square.

``step`` is a pure function of (state, action); all randomness lives in
``reset`` via an explicit seed or generator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .config import EnvConfig

KIND_AGENT = 0
KIND_TARGET = 1
KIND_DISTRACTOR = 2
KIND_NAMES = ("agent", "target", "distractor")

ACTION_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))  # up, down, left, right, stay
ACTION_NAMES = ("up", "down", "left", "right", "stay")
N_ACTIONS = len(ACTION_DELTAS)

OUTCOME_TARGET = "target"
OUTCOME_DISTRACTOR = "distractor"
OUTCOME_TIMEOUT = "timeout"


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition (e.g. step on a terminal state)."""


class CapacityError(ValueError):
    """Requested object count does not fit the arena."""


@dataclass(frozen=True)
class WorldObject:
    oid: int
    kind: int
    pos: tuple  # (row, col) ints on the grid; (x, y) floats in the unit square


@dataclass(frozen=True)
class EnvState:
    objects: tuple[WorldObject, ...]
    t: int
    done: bool
    outcome: str | None = None

    def agent(self) -> WorldObject:
        return self.objects[0]

    def target(self) -> WorldObject:
        return self.objects[1]

    def distractors(self) -> tuple[WorldObject, ...]:
        return self.objects[2:]


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: float
    done: bool


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _make_objects(kinds: Iterable[int], positions: Iterable[tuple]) -> tuple[WorldObject, ...]:
    return tuple(WorldObject(i, k, p) for i, (k, p) in enumerate(zip(kinds, positions)))


def _kinds(n_objects: int) -> tuple[int, ...]:
    return (KIND_AGENT, KIND_TARGET) + (KIND_DISTRACTOR,) * (n_objects - 2)


class GridObjectWorld:
    """Deterministic gridworld: one agent, one target, optional distractors."""

    def __init__(self, cfg: EnvConfig):
        if cfg.variant != "discrete":
            raise ValueError("GridObjectWorld requires the discrete variant")
        self.cfg = cfg
        self.g = cfg.grid_size
        self.k = cfg.n_objects
        self.horizon = cfg.horizon if cfg.horizon else 50
        self.n_actions = N_ACTIONS

    def reset(self, seed) -> EnvState:
        if self.k > self.g * self.g:
            raise CapacityError(f"{self.k} objects exceed {self.g}x{self.g} grid capacity")
        rng = _as_rng(seed)
        cells = rng.choice(self.g * self.g, size=self.k, replace=False)
        positions = [(int(c) // self.g, int(c) % self.g) for c in cells]
        return EnvState(_make_objects(_kinds(self.k), positions), t=0, done=False)

    def step(self, state: EnvState, action: int) -> StepResult:
        if state.done:
            raise ContractViolation("step on a terminal state")
        if not 0 <= int(action) < N_ACTIONS:
            raise ValueError(f"action {action!r} outside 0..{N_ACTIONS - 1}")
        dr, dc = ACTION_DELTAS[int(action)]
        r, c = state.agent().pos
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.g and 0 <= nc < self.g):
            nr, nc = r, c  # walls block
        pos = (nr, nc)

        reward, done, outcome = 0.0, False, None
        if pos == state.target().pos:
            reward, done, outcome = 1.0, True, OUTCOME_TARGET
        elif any(pos == d.pos for d in state.distractors()):
            reward, done, outcome = 0.0, True, OUTCOME_DISTRACTOR
        elif state.t + 1 >= self.horizon:
            done, outcome = True, OUTCOME_TIMEOUT

        objects = (replace(state.agent(), pos=pos),) + state.objects[1:]
        return StepResult(EnvState(objects, state.t + 1, done, outcome), reward, done)


class ContinuousObjectWorld:
    """Unit-square arena; the agent moves by a clamped 2-D displacement."""

    def __init__(self, cfg: EnvConfig):
        if cfg.variant != "continuous":
            raise ValueError("ContinuousObjectWorld requires the continuous variant")
        self.cfg = cfg
        self.k = cfg.n_objects
        self.horizon = cfg.horizon if cfg.horizon else 100
        self.radius = cfg.contact_radius
        self.max_step = cfg.max_step
        self.min_sep = cfg.min_separation

    def reset(self, seed) -> EnvState:
        rng = _as_rng(seed)
        positions: list[tuple] = []
        for _ in range(self.k):
            for _attempt in range(1000):
                p = rng.uniform(0.0, 1.0, size=2)
                if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= self.min_sep for q in positions):
                    positions.append((float(p[0]), float(p[1])))
                    break
            else:
                raise CapacityError(f"cannot place {self.k} objects with separation {self.min_sep}")
        return EnvState(_make_objects(_kinds(self.k), positions), t=0, done=False)

    def step(self, state: EnvState, action) -> StepResult:
        if state.done:
            raise ContractViolation("step on a terminal state")
        delta = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -self.max_step, self.max_step)
        x, y = state.agent().pos
        pos = (float(np.clip(x + delta[0], 0.0, 1.0)), float(np.clip(y + delta[1], 0.0, 1.0)))

        tx, ty = state.target().pos
        dist_target = float(np.hypot(pos[0] - tx, pos[1] - ty))
        reward, done, outcome = 0.0, False, None
        if dist_target <= self.radius:
            reward, done, outcome = 1.0, True, OUTCOME_TARGET
        elif any(np.hypot(pos[0] - d.pos[0], pos[1] - d.pos[1]) <= self.radius for d in state.distractors()):
            reward, done, outcome = 0.0, True, OUTCOME_DISTRACTOR
        elif state.t + 1 >= self.horizon:
            done, outcome = True, OUTCOME_TIMEOUT
        if self.cfg.shaped_reward:
            reward -= self.cfg.shaping_scale * dist_target

        objects = (replace(state.agent(), pos=pos),) + state.objects[1:]
        return StepResult(EnvState(objects, state.t + 1, done, outcome), reward, done)


def make_env(cfg: EnvConfig):
    return GridObjectWorld(cfg) if cfg.variant == "discrete" else ContinuousObjectWorld(cfg)


# ---------------------------------------------------------------------------
# exact tabulation (oracle input)

ENUMERATION_MAX_GRID = 4
ENUMERATION_MAX_OBJECTS = 3


@dataclass(frozen=True)
class TabularMdp:
    """Exact deterministic MDP tables for the grid variant.

    States enumerate all distinct placements of the live objects; the final
    index is a single absorbing terminal state with zero outgoing reward.
    The step counter is not part of the state: tables describe the stationary
    dynamics, horizons only apply to episodic rollouts.
    """

    grid_size: int
    n_objects: int
    placements: tuple[tuple[int, ...], ...]  # cell index per object, per state
    transitions: np.ndarray  # (S, A) next-state indices
    rewards: np.ndarray  # (S, A)

    @property
    def n_states(self) -> int:
        return len(self.placements) + 1

    @property
    def terminal_index(self) -> int:
        return len(self.placements)

    def index_of(self, state: EnvState) -> int:
        if state.done:
            return self.terminal_index
        g = self.grid_size
        cells = tuple(o.pos[0] * g + o.pos[1] for o in state.objects)
        return self._lookup[cells]

    def state_of(self, index: int) -> EnvState:
        g = self.grid_size
        cells = self.placements[index]
        positions = [(c // g, c % g) for c in cells]
        return EnvState(_make_objects(_kinds(self.n_objects), positions), t=0, done=False)

    def __post_init__(self):
        object.__setattr__(self, "_lookup", {p: i for i, p in enumerate(self.placements)})


def enumerate_tabular(cfg: EnvConfig) -> TabularMdp:
    """Build exact (S, A) transition and reward tables by replaying ``step``."""
    if cfg.variant != "discrete":
        raise ValueError("only the discrete variant is enumerable")
    g, k = cfg.grid_size, cfg.n_objects
    if g > ENUMERATION_MAX_GRID or k > ENUMERATION_MAX_OBJECTS:
        raise CapacityError(
            f"state space above enumeration cap (grid <= {ENUMERATION_MAX_GRID}, objects <= {ENUMERATION_MAX_OBJECTS})"
        )
    env = GridObjectWorld(cfg)
    placements = tuple(itertools.permutations(range(g * g), k))
    n = len(placements)
    transitions = np.full((n + 1, N_ACTIONS), n, dtype=np.int64)
    rewards = np.zeros((n + 1, N_ACTIONS), dtype=np.float64)
    mdp = TabularMdp(g, k, placements, transitions, rewards)
    for i, cells in enumerate(placements):
        state = mdp.state_of(i)
        for a in range(N_ACTIONS):
            res = env.step(state, a)
            rewards[i, a] = res.reward
            transitions[i, a] = mdp.terminal_index if res.done else mdp.index_of(res.state)
    return mdp


# ---------------------------------------------------------------------------
# debug rendering

_MARKERS = {KIND_AGENT: "A", KIND_TARGET: "T", KIND_DISTRACTOR: "D"}


def render_ascii(state: EnvState, grid_size: int) -> str:
    """Character grid with A/T/D markers; terminal states get a DONE banner."""
    grid = [["·"] * grid_size for _ in range(grid_size)]
    for obj in reversed(state.objects):  # agent drawn last, wins overlaps
        r, c = obj.pos
        grid[r][c] = _MARKERS[obj.kind]
    lines = ["".join(row) for row in grid]
    if state.done:
        lines.append(f"DONE ({state.outcome})")
    return "\n".join(lines)


def parse_ascii(text: str) -> dict[str, list[tuple[int, int]]]:
    """Recover marker positions from a rendered grid (inverse of render_ascii)."""
    found: dict[str, list[tuple[int, int]]] = {"A": [], "T": [], "D": []}
    for r, line in enumerate(text.splitlines()):
        if line.startswith("DONE"):
            break
        for c, ch in enumerate(line):
            if ch in found:
                found[ch].append((r, c))
    return found


# ---------------------------------------------------------------------------
# uniform-random baseline

def rollout_random(cfg: EnvConfig, n_episodes: int, seed) -> tuple[float, float]:
    """Monte Carlo (success rate, mean return) of the uniform random policy."""
    env = make_env(cfg)
    rng = _as_rng(seed)
    successes = 0
    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        state = env.reset(rng)
        total = 0.0
        while not state.done:
            if cfg.variant == "discrete":
                action = int(rng.integers(N_ACTIONS))
            else:
                action = rng.uniform(-cfg.max_step, cfg.max_step, size=2)
            res = env.step(state, action)
            total += res.reward
            state = res.state
        successes += state.outcome == OUTCOME_TARGET
        returns[ep] = total
    return successes / n_episodes, float(returns.mean())
