"""Replay buffer, training targets, unrolled joint loss, and the run loop.

The joint objective unrolls the dynamics over stored actions and combines
four lambda-weighted terms per step: reward MSE (reward head on the predicted
next slots vs. the environment reward), policy cross-entropy against the
search target, value MSE against a mixed target, and a temporal consistency
penalty between predicted and encoded next slots (MSE by default, negative
cosine similarity by config).

Value targets switch per sample: multi-step TD (bootstrapped with the current
value head) during the warmup iterations or when the sampled record is stale,
i.e. its age in insertions exceeds capacity - stale_window; otherwise the
search value stored at collection time. Targets beyond episode end are masked
and contribute exactly zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .config import ModelConfig, RunConfig, TrainerConfig
from .envs import OUTCOME_TARGET, make_env
from .model import (
    ModelParams,
    NumericFault,
    WorldModel,
    action_features,
    dynamics_flat,
    gaussian_log_density,
    init_params,
    policy_flat,
    reward_flat,
    split_gaussian,
    value_flat,
)
from .search import run_search
from .slots import encode, layout_descriptor, new_episode_permutation


@dataclass
class TransitionRecord:
    """One environment transition plus its search-derived training targets."""

    slots: np.ndarray  # (k, d) encoder output at t
    action: object  # int (discrete) or (2,) array (continuous)
    reward: float  # environment reward u_t
    done: bool
    policy: np.ndarray  # search target over actions (discrete) or candidates
    candidates: Optional[np.ndarray]  # (m, action_dim) sampled root actions
    search_value: float  # search value estimate at collection time
    next_slots: np.ndarray  # (k, d) encoder output at t+1
    episode_id: int
    step_in_episode: int
    insert_index: int = -1  # global insertion counter, set by the buffer
    insert_iteration: int = 0  # training iteration at insertion


class ReplayBuffer:
    """Bounded FIFO ring buffer addressed by global insertion index."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._store: list[Optional[TransitionRecord]] = [None] * capacity
        self.total_inserted = 0

    def __len__(self) -> int:
        return min(self.total_inserted, self.capacity)

    @property
    def oldest_index(self) -> int:
        return max(0, self.total_inserted - self.capacity)

    def insert(self, record: TransitionRecord) -> int:
        idx = self.total_inserted
        record.insert_index = idx
        self._store[idx % self.capacity] = record
        self.total_inserted += 1
        return idx

    def get(self, index: int) -> Optional[TransitionRecord]:
        if index < self.oldest_index or index >= self.total_inserted:
            return None
        return self._store[index % self.capacity]

    def age(self, index: int) -> int:
        """Insertions since this record: 0 for the newest."""
        return self.total_inserted - 1 - index

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(self.oldest_index, self.total_inserted, size=n)

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "total_inserted": self.total_inserted,
            "records": [self.get(i) for i in range(self.oldest_index, self.total_inserted)],
        }

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity:
            raise ValueError("buffer capacity mismatch")
        self._store = [None] * self.capacity
        self.total_inserted = state["total_inserted"] - len(state["records"])
        for rec in state["records"]:
            self._store[rec.insert_index % self.capacity] = rec
            self.total_inserted = rec.insert_index + 1


# ---------------------------------------------------------------------------
# value targets


def _td_walk(buffer: ReplayBuffer, index: int, tcfg: TrainerConfig):
    """Truncated multi-step TD pieces: (reward sum, bootstrap discount, slots).

    ``slots`` is None when the episode ended inside the horizon (terminal
    transitions drop the bootstrap). Missing successors (not yet collected or
    evicted) truncate the sum and bootstrap early.
    """
    rec = buffer.get(index)
    total, disc = 0.0, 1.0
    cur = rec
    for i in range(tcfg.td_horizon):
        total += disc * cur.reward
        disc *= tcfg.gamma
        if cur.done:
            return total, disc, None
        if i == tcfg.td_horizon - 1:
            break
        nxt = buffer.get(index + i + 1)
        if nxt is None or nxt.episode_id != cur.episode_id:
            break
        cur = nxt
    return total, disc, cur.next_slots


def _branch_is_td(i_s: int, i_t: int, tcfg: TrainerConfig) -> bool:
    return i_t < tcfg.warmup_iters or i_s > tcfg.buffer_capacity - tcfg.stale_window


def value_target(
    buffer: ReplayBuffer, index: int, i_t: int, params: ModelParams,
    tcfg: TrainerConfig, mcfg: ModelConfig,
) -> tuple[float, str]:
    """Mixed value target for one record: multi-step TD early in training or
    for stale records, the stored search value otherwise."""
    rec = buffer.get(index)
    if rec is None:
        raise ValueError(f"record {index} not in buffer")
    i_s = buffer.age(index)
    if not _branch_is_td(i_s, i_t, tcfg):
        return rec.search_value, "sve"
    total, disc, slots = _td_walk(buffer, index, tcfg)
    if slots is not None:
        k = slots.shape[0]
        total += disc * float(value_flat(Tensor(slots), 1, k, params).data.reshape(()))
    return total, "td"


# ---------------------------------------------------------------------------
# batched target construction


@dataclass
class BatchTargets:
    batch: int
    k: int
    slots0: np.ndarray  # (batch*k, d)
    actions: np.ndarray  # (unroll, batch) ints or (unroll, batch, action_dim)
    reward_targets: np.ndarray  # (unroll, batch)
    value_targets: np.ndarray  # (unroll+1, batch)
    policy_targets: np.ndarray  # (unroll+1, batch, policy width)
    cand_actions: Optional[np.ndarray]  # (unroll+1, batch, m, action_dim)
    consistency_targets: np.ndarray  # (unroll, batch*k, d)
    mask: np.ndarray  # (unroll+1, batch) position validity
    branch_counts: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)  # (i_t, i_s, branch) per target
    batch_ids: list = field(default_factory=list)


def build_targets(
    buffer: ReplayBuffer, indices, i_t: int, params: ModelParams,
    tcfg: TrainerConfig, mcfg: ModelConfig,
) -> BatchTargets:
    indices = [int(i) for i in indices]
    b = len(indices)
    first = buffer.get(indices[0])
    k, d = first.slots.shape
    u = tcfg.unroll_len
    discrete = mcfg.action_mode == "discrete"
    pw = mcfg.n_actions if discrete else 0
    m = 0 if discrete else len(first.policy)

    slots0 = np.zeros((b * k, d))
    actions = np.zeros((u, b), dtype=np.int64) if discrete else np.zeros((u, b, mcfg.action_dim))
    reward_t = np.zeros((u, b))
    value_t = np.zeros((u + 1, b))
    policy_t = np.zeros((u + 1, b, pw if discrete else m))
    cand_t = None if discrete else np.zeros((u + 1, b, m, mcfg.action_dim))
    cons_t = np.zeros((u, b * k, d))
    mask = np.zeros((u + 1, b))

    # defer bootstrap evaluations so one batched forward prices them all
    pending: list[tuple[int, int, float, np.ndarray]] = []  # (p, b, discount, slots)
    counts = {"td": 0, "sve": 0}
    trace: list[tuple[int, int, str]] = []

    for bi, idx in enumerate(indices):
        rec0 = buffer.get(idx)
        slots0[bi * k : (bi + 1) * k] = rec0.slots
        for p in range(u + 1):
            rec = buffer.get(idx + p)
            valid = (
                rec is not None
                and rec.episode_id == rec0.episode_id
                and (p == 0 or mask[p - 1, bi] > 0)
            )
            if not valid:
                break
            mask[p, bi] = 1.0
            i_s = buffer.age(idx + p)
            if _branch_is_td(i_s, i_t, tcfg):
                counts["td"] += 1
                trace.append((i_t, i_s, "td"))
                total, disc, bslots = _td_walk(buffer, idx + p, tcfg)
                value_t[p, bi] = total
                if bslots is not None:
                    pending.append((p, bi, disc, bslots))
            else:
                counts["sve"] += 1
                trace.append((i_t, i_s, "sve"))
                value_t[p, bi] = rec.search_value
            policy_t[p, bi] = rec.policy
            if cand_t is not None:
                cand_t[p, bi] = rec.candidates
            if p < u:
                actions[p, bi] = rec.action
                reward_t[p, bi] = rec.reward
                cons_t[p, bi * k : (bi + 1) * k] = rec.next_slots

    if pending:
        stacked = np.concatenate([slots for _, _, _, slots in pending], axis=0)
        values = value_flat(Tensor(stacked), len(pending), k, params).data.reshape(-1)
        for (p, bi, disc, _), v in zip(pending, values):
            value_t[p, bi] += disc * float(v)

    return BatchTargets(
        batch=b, k=k, slots0=slots0, actions=actions, reward_targets=reward_t,
        value_targets=value_t, policy_targets=policy_t, cand_actions=cand_t,
        consistency_targets=cons_t, mask=mask, branch_counts=counts, trace=trace,
        batch_ids=indices,
    )


# ---------------------------------------------------------------------------
# loss

_COS_EPS = 1e-12


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> tuple[Tensor, float]:
    diff = ad.sub(pred, Tensor(target.reshape(pred.shape)))
    sq = ad.mul(diff, diff)
    masked = ad.mul(sq, Tensor(mask.reshape(pred.shape[0], 1)))
    return ad.reduce_sum(masked), float(mask.sum())


def _consistency_term(pred: Tensor, target: np.ndarray, row_mask: np.ndarray, kind: str) -> tuple[Tensor, float]:
    d = pred.shape[1]
    if kind == "mse":
        diff = ad.sub(pred, Tensor(target))
        sq = ad.reduce_sum(ad.mul(diff, diff), axis=1)  # per-row squared error
        total = ad.reduce_sum(ad.mul(sq, Tensor(row_mask)))
        return total, float(row_mask.sum()) * d
    # negative cosine similarity per slot row
    xy = ad.reduce_sum(ad.mul(pred, Tensor(target)), axis=1)
    xx = ad.add(ad.reduce_sum(ad.mul(pred, pred), axis=1), _COS_EPS)
    yy = (target * target).sum(axis=1) + _COS_EPS
    inv_norm = ad.exp(ad.scale(ad.log(ad.mul(xx, Tensor(yy))), -0.5))
    cos = ad.mul(xy, inv_norm)
    total = ad.scale(ad.reduce_sum(ad.mul(cos, Tensor(row_mask))), -1.0)
    return total, float(row_mask.sum())


def compute_loss(
    targets: BatchTargets, params: ModelParams, tcfg: TrainerConfig, mcfg: ModelConfig,
) -> tuple[Tensor, dict]:
    """Unrolled joint loss; every term averaged over its unmasked entries,
    then lambda-weighted. Raises NumericFault on a non-finite total."""
    try:
        return _compute_loss(targets, params, tcfg, mcfg)
    except ad.DomainError as err:
        # non-finite activations surface as domain errors inside primitives
        raise NumericFault(f"loss forward pass failed: {err}", params=params,
                           batch_ids=targets.batch_ids) from err


def _compute_loss(
    targets: BatchTargets, params: ModelParams, tcfg: TrainerConfig, mcfg: ModelConfig,
) -> tuple[Tensor, dict]:
    b, k = targets.batch, targets.k
    u = tcfg.unroll_len
    discrete = mcfg.action_mode == "discrete"

    cur = Tensor(targets.slots0)
    zero = Tensor(0.0)
    sums = {"reward": zero, "policy": zero, "value": zero, "consistency": zero}
    counts = {"reward": 0.0, "policy": 0.0, "value": 0.0, "consistency": 0.0}

    for p in range(u + 1):
        pmask = targets.mask[p]
        v = value_flat(cur, b, k, params)
        term, n = _masked_mse(v, targets.value_targets[p].reshape(b, 1), pmask)
        sums["value"] = ad.add(sums["value"], term)
        counts["value"] += n

        pol = policy_flat(cur, b, k, params)
        if discrete:
            logp = ad.log(ad.softmax(pol, axis=1))
            ce = ad.scale(ad.reduce_sum(ad.mul(logp, Tensor(targets.policy_targets[p])), axis=1), -1.0)
            term = ad.reduce_sum(ad.mul(ce, Tensor(pmask)))
        else:
            m = targets.policy_targets.shape[2]
            mean, log_std = split_gaussian(pol, mcfg)
            rep = np.repeat(np.arange(b), m)
            acts = targets.cand_actions[p].reshape(b * m, mcfg.action_dim)
            logp = gaussian_log_density(
                ad.gather_rows(mean, rep), ad.gather_rows(log_std, rep), acts, mcfg.action_bound
            )
            weights = (targets.policy_targets[p] * pmask[:, None]).reshape(b * m)
            term = ad.scale(ad.reduce_sum(ad.mul(logp, Tensor(weights))), -1.0)
        sums["policy"] = ad.add(sums["policy"], term)
        counts["policy"] += float(pmask.sum())

        if p < u:
            act_feat = action_features(targets.actions[p], params, mcfg)
            nxt = dynamics_flat(cur, act_feat, b, k, params)

            r = reward_flat(nxt, b, k, params)
            term, n = _masked_mse(r, targets.reward_targets[p].reshape(b, 1), pmask)
            sums["reward"] = ad.add(sums["reward"], term)
            counts["reward"] += n

            row_mask = np.repeat(pmask, k)
            term, n = _consistency_term(nxt, targets.consistency_targets[p], row_mask, tcfg.consistency_loss)
            sums["consistency"] = ad.add(sums["consistency"], term)
            counts["consistency"] += n

            cur = nxt

    lambdas = {
        "reward": tcfg.lambda_reward,
        "policy": tcfg.lambda_policy,
        "value": tcfg.lambda_value,
        "consistency": tcfg.lambda_consistency,
    }
    total = Tensor(0.0)
    parts = {}
    for name, s in sums.items():
        mean_term = ad.scale(s, 1.0 / counts[name]) if counts[name] > 0 else Tensor(0.0)
        parts[name] = mean_term.item() if isinstance(mean_term, Tensor) else 0.0
        total = ad.add(total, ad.scale(mean_term, lambdas[name]))

    if not math.isfinite(total.item()):
        raise NumericFault("non-finite training loss", params=params, batch_ids=targets.batch_ids)
    return total, parts


# ---------------------------------------------------------------------------
# optimization


def clip_gradient_norm(tensors: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most ``max_norm``;
    returns the pre-clip norm."""
    total_sq = 0.0
    for t in tensors:
        if t.grad is not None:
            total_sq += float((t.grad * t.grad).sum())
    norm = math.sqrt(total_sq)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


class Adam:
    """Adaptive moment estimation over named parameter tensors."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def train_step(
    buffer: ReplayBuffer, params: ModelParams, opt: Adam, i_t: int,
    tcfg: TrainerConfig, mcfg: ModelConfig, rng: np.random.Generator,
    trace: Optional[list] = None,
) -> dict:
    """One optimizer update on a uniform batch; numeric faults skip the
    update and are counted rather than raised."""
    indices = buffer.sample_indices(rng, tcfg.batch_size)
    targets = build_targets(buffer, indices, i_t, params, tcfg, mcfg)
    if trace is not None:
        trace.extend(targets.trace)
    for t in params.tensors():
        t.zero_grad()
    try:
        with Tape():
            loss, parts = compute_loss(targets, params, tcfg, mcfg)
        backward(loss)
    except NumericFault:
        return {"fault": 1, "loss": math.nan, "branch_td": targets.branch_counts["td"],
                "branch_sve": targets.branch_counts["sve"]}
    grad_norm = clip_gradient_norm(params.tensors(), tcfg.max_grad_norm)
    opt.step()
    return {
        "fault": 0,
        "loss": loss.item(),
        "loss_reward": parts["reward"],
        "loss_policy": parts["policy"],
        "loss_value": parts["value"],
        "loss_consistency": parts["consistency"],
        "grad_norm": grad_norm,
        "branch_td": targets.branch_counts["td"],
        "branch_sve": targets.branch_counts["sve"],
    }


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalStats:
    success_rate: float
    mean_return: float
    std_return: float
    episodes: int


def evaluate_policy(params: ModelParams, cfg: RunConfig, n_episodes: int, eval_key: int) -> EvalStats:
    """Greedy evaluation: act by the search's chosen action, nothing else.

    The chosen action is already the exploit choice (the halving survivor by
    Q); root Gumbel draws stay on so exact ties -- e.g. a freshly initialized
    model, where every action scores identically -- resolve uniformly instead
    of collapsing onto the lowest action index. Seeding is independent of the
    training streams so mid-run evaluation never perturbs training
    determinism.
    """
    env = make_env(cfg.env)
    model = WorldModel(params, cfg.model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x45564C, eval_key]))
    pos_scale = float(cfg.env.grid_size - 1) if cfg.env.variant == "discrete" else 1.0
    successes = 0
    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        perm = new_episode_permutation(rng, cfg.env.n_objects, cfg.env.permutation_mode)
        state = env.reset(rng)
        total = 0.0
        while not state.done:
            slots = encode(state, perm, cfg.model.slot_dim, pos_scale,
                           cfg.env.noise_sigma, rng if cfg.env.noise_sigma > 0 else None)
            result = run_search(
                model, slots, cfg.planner, cfg.trainer.gamma, rng,
                cfg.env.variant, cfg.env.max_step,
            )
            res = env.step(state, result.action)
            total += res.reward
            state = res.state
        successes += state.outcome == OUTCOME_TARGET
        returns[ep] = total
    return EvalStats(
        success_rate=successes / n_episodes,
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        episodes=n_episodes,
    )


# ---------------------------------------------------------------------------
# training orchestration


class TrainingRun:
    """Owns all mutable training state; deterministic given the config seed,
    and checkpointable at any environment step."""

    def __init__(self, cfg: RunConfig, trace_targets: bool = False):
        self.cfg = cfg
        self.env = make_env(cfg.env)
        self.params = init_params(cfg.seed, cfg.model)
        self.opt = Adam(self.params.named_tensors(), cfg.trainer.learning_rate)
        self.buffer = ReplayBuffer(cfg.trainer.buffer_capacity)
        ss = np.random.SeedSequence(cfg.seed)
        env_ss, perm_ss, noise_ss, search_ss, sample_ss = ss.spawn(5)
        self.rng_env = np.random.default_rng(env_ss)
        self.rng_perm = np.random.default_rng(perm_ss)
        self.rng_noise = np.random.default_rng(noise_ss)
        self.rng_search = np.random.default_rng(search_ss)
        self.rng_sample = np.random.default_rng(sample_ss)
        self.pos_scale = float(cfg.env.grid_size - 1) if cfg.env.variant == "discrete" else 1.0

        self.env_steps = 0
        self.i_t = 0
        self.episode_counter = 0
        self.eval_counter = 0
        self.fault_count = 0
        self.train_due = 0.0
        self.state = None
        self.perm = None
        self.slots = None
        self.step_in_episode = 0
        self.target_trace: Optional[list] = [] if trace_targets else None
        self.last_eval: Optional[EvalStats] = None

    # -- episode plumbing

    def _encode(self, state) -> np.ndarray:
        sigma = self.cfg.env.noise_sigma
        return encode(state, self.perm, self.cfg.model.slot_dim, self.pos_scale,
                      sigma, self.rng_noise if sigma > 0 else None)

    def _begin_episode(self) -> None:
        self.episode_counter += 1
        self.perm = new_episode_permutation(self.rng_perm, self.cfg.env.n_objects,
                                            self.cfg.env.permutation_mode)
        self.state = self.env.reset(self.rng_env)
        self.slots = self._encode(self.state)
        self.step_in_episode = 0

    def _env_step(self) -> None:
        if self.state is None or self.state.done:
            self._begin_episode()
        model = WorldModel(self.params, self.cfg.model)
        result = run_search(
            model, self.slots, self.cfg.planner, self.cfg.trainer.gamma,
            self.rng_search, self.cfg.env.variant, self.cfg.env.max_step,
        )
        res = self.env.step(self.state, result.action)
        next_slots = self._encode(res.state)
        record = TransitionRecord(
            slots=self.slots, action=result.action, reward=res.reward, done=res.done,
            policy=result.policy, candidates=result.candidates,
            search_value=result.value, next_slots=next_slots,
            episode_id=self.episode_counter, step_in_episode=self.step_in_episode,
            insert_iteration=self.i_t,
        )
        self.buffer.insert(record)
        self.env_steps += 1
        self.step_in_episode += 1
        self.state = res.state
        self.slots = next_slots

    # -- main loop

    def run(self, metrics=None, checkpoint_fn=None) -> dict:
        tcfg = self.cfg.trainer
        stop_reason = "completed"
        while self.env_steps < tcfg.total_env_steps:
            self._env_step()
            if len(self.buffer) >= tcfg.min_replay:
                self.train_due += tcfg.train_per_env_step
            while self.train_due >= 1.0:
                self.train_due -= 1.0
                row = train_step(self.buffer, self.params, self.opt, self.i_t,
                                 tcfg, self.cfg.model, self.rng_sample, self.target_trace)
                self.fault_count += row["fault"]
                self.i_t += 1
                if metrics is not None:
                    metrics.train_row(self.i_t, self.env_steps, row)
            if self.env_steps % tcfg.eval_interval == 0:
                stats = evaluate_policy(self.params, self.cfg, tcfg.eval_episodes, self.eval_counter)
                self.eval_counter += 1
                self.last_eval = stats
                if metrics is not None:
                    metrics.eval_row(self.i_t, self.env_steps, stats)
                if tcfg.stop_at_success > 0 and stats.success_rate >= tcfg.stop_at_success:
                    stop_reason = "success_threshold"
                    break
                if tcfg.stop_at_return > 0 and stats.mean_return >= tcfg.stop_at_return:
                    stop_reason = "return_threshold"
                    break
            if checkpoint_fn is not None and tcfg.checkpoint_interval > 0 \
                    and self.env_steps % tcfg.checkpoint_interval == 0:
                checkpoint_fn(self)
        return {
            "env_steps": self.env_steps,
            "train_iters": self.i_t,
            "episodes": self.episode_counter,
            "faults": self.fault_count,
            "stop_reason": stop_reason,
            "final_eval": self.last_eval,
        }

    # -- persistence

    def capture(self) -> dict:
        from .config import to_dict

        rngs = {
            "env": self.rng_env.bit_generator.state,
            "perm": self.rng_perm.bit_generator.state,
            "noise": self.rng_noise.bit_generator.state,
            "search": self.rng_search.bit_generator.state,
            "sample": self.rng_sample.bit_generator.state,
        }
        return {
            "config": to_dict(self.cfg),
            "params": self.params.to_arrays(),
            "optimizer": self.opt.state_dict(),
            "buffer": self.buffer.state_dict(),
            "rng": rngs,
            "counters": {
                "env_steps": self.env_steps,
                "i_t": self.i_t,
                "episode_counter": self.episode_counter,
                "eval_counter": self.eval_counter,
                "fault_count": self.fault_count,
                "train_due": self.train_due,
                "step_in_episode": self.step_in_episode,
            },
            "episode": {"state": self.state, "perm": self.perm, "slots": self.slots},
            "feature_layout": layout_descriptor(self.cfg.model.slot_dim),
        }

    def restore(self, payload: dict) -> None:
        expected = layout_descriptor(self.cfg.model.slot_dim)
        if payload["feature_layout"] != expected:
            raise ValueError(
                f"feature layout mismatch: checkpoint has {payload['feature_layout']!r}, expected {expected!r}"
            )
        self.params.load_arrays(payload["params"])
        self.opt.load_state_dict(payload["optimizer"])
        self.buffer.load_state_dict(payload["buffer"])
        self.rng_env.bit_generator.state = payload["rng"]["env"]
        self.rng_perm.bit_generator.state = payload["rng"]["perm"]
        self.rng_noise.bit_generator.state = payload["rng"]["noise"]
        self.rng_search.bit_generator.state = payload["rng"]["search"]
        self.rng_sample.bit_generator.state = payload["rng"]["sample"]
        c = payload["counters"]
        self.env_steps = c["env_steps"]
        self.i_t = c["i_t"]
        self.episode_counter = c["episode_counter"]
        self.eval_counter = c["eval_counter"]
        self.fault_count = c["fault_count"]
        self.train_due = c["train_due"]
        self.step_in_episode = c["step_in_episode"]
        ep = payload["episode"]
        self.state, self.perm, self.slots = ep["state"], ep["perm"], ep["slots"]


def run_training(cfg: RunConfig, metrics=None, checkpoint_fn=None,
                 resume_payload: Optional[dict] = None, trace_targets: bool = False):
    """Top-level loop: returns (summary dict, TrainingRun)."""
    run = TrainingRun(cfg, trace_targets=trace_targets)
    if resume_payload is not None:
        run.restore(resume_payload)
    summary = run.run(metrics=metrics, checkpoint_fn=checkpoint_fn)
    return summary, run
