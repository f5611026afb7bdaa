"""GNN world model over slot sets.

Four learned components on a fully connected object graph, sharing no
weights: a relational dynamics model (edge messages conditioned on the
action, summed per receiver, consumed by a node model) and three heads
(reward, value, policy) that pool permutation-invariantly over per-object
embeddings. Dynamics is permutation-equivariant by weight sharing; pooling
makes the heads permutation-invariant.

Everything operates on batches flattened to (batch * k, slot_dim) rows so a
single matmul covers all nodes (and all k*(k-1) edges) at once. Gradients
flow through :mod:`slotplan.autodiff` when a Tape is active; planner-facing
wrappers run untaped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig

LOG_2PI = math.log(2.0 * math.pi)


class NumericFault(RuntimeError):
    """Non-finite values produced by a forward pass or loss.

    Carries a reference to the parameters in effect (``params``) and, when
    raised during training, the offending batch ids (``batch_ids``).
    """

    def __init__(self, message: str, params: "ModelParams | None" = None, batch_ids=None):
        super().__init__(message)
        self.params = params
        self.batch_ids = batch_ids


class EdgeEvalCounter:
    """Counts edge-MLP row evaluations (K*(K-1) per dynamics/head pass)."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


EDGE_EVALS = EdgeEvalCounter()


@dataclass
class Mlp:
    weights: list[Tensor]
    biases: list[Tensor]


@dataclass
class ModelParams:
    """All learnable weights: 2 dynamics MLPs, 3x2 head GNN MLPs, 3 output
    MLPs, and the action embedding (table for discrete actions, linear
    projection for continuous)."""

    edge_dyn: Mlp
    node_dyn: Mlp
    edge_rew: Mlp
    node_rew: Mlp
    head_rew: Mlp
    edge_val: Mlp
    node_val: Mlp
    head_val: Mlp
    edge_pol: Mlp
    node_pol: Mlp
    head_pol: Mlp
    action_embed: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Mlp):
                for i, (w, b) in enumerate(zip(value.weights, value.biases)):
                    out.append((f"{f.name}.w{i}", w))
                    out.append((f"{f.name}.b{i}", b))
            else:
                out.append((f.name, value))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} != {t.data.shape}")
            t.data = np.array(src, dtype=np.float64, copy=True)


@dataclass
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray


@dataclass
class HeadOutputs:
    reward: float
    value: float
    policy: "np.ndarray | GaussianHead"  # logits (discrete) or Gaussian params


def _mlp_dims(cfg: ModelConfig) -> dict[str, list[int]]:
    d, h, a = cfg.slot_dim, cfg.hidden, cfg.action_embed_dim
    p = cfg.policy_width
    return {
        "edge_dyn": [2 * d + a, h, h, h],
        "node_dyn": [d + a + h, h, h, d],
        "edge_rew": [2 * d, h, h, h],
        "node_rew": [d + h, h, h, h],
        "head_rew": [h, h, h, 1],
        "edge_val": [2 * d, h, h, h],
        "node_val": [d + h, h, h, h],
        "head_val": [h, h, h, 1],
        "edge_pol": [2 * d, h, h, h],
        "node_pol": [d + h, h, h, h],
        "head_pol": [h, h, h, p],
    }


_ZERO_FINAL = ("head_rew", "head_val", "head_pol")


def _init_mlp(rng: np.random.Generator, dims: list[int], zero_final: bool) -> Mlp:
    weights, biases = [], []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if zero_final and i == last:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(weights, biases)


def init_params(seed: int, cfg: ModelConfig) -> ModelParams:
    """Deterministic initialization: fan-in-scaled uniform hidden layers,
    zero-initialized final layers on the reward/value/policy output MLPs
    (so heads start exactly unbiased and the policy starts uniform)."""
    rng = np.random.default_rng(seed)
    mlps = {}
    for name, dims in _mlp_dims(cfg).items():
        mlps[name] = _init_mlp(rng, dims, zero_final=name in _ZERO_FINAL)
    if cfg.action_mode == "discrete":
        rows = cfg.n_actions
    else:
        rows = cfg.action_dim
    bound = 1.0 / math.sqrt(max(rows, 1))
    embed = Tensor(rng.uniform(-bound, bound, size=(rows, cfg.action_embed_dim)), requires_grad=True)
    return ModelParams(action_embed=embed, **mlps)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count: sum over MLP layers of (in+1)*out, plus
    the action embedding rows * action_embed_dim."""
    total = 0
    for dims in _mlp_dims(cfg).values():
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            total += (fan_in + 1) * fan_out
    rows = cfg.n_actions if cfg.action_mode == "discrete" else cfg.action_dim
    return total + rows * cfg.action_embed_dim


# ---------------------------------------------------------------------------
# forward passes (flattened batches)

_EDGE_CACHE: dict[tuple[int, int], tuple[np.ndarray, ...]] = {}


def _edge_index(batch: int, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Receiver rows, sender rows, receiver segment ids, and per-edge batch ids
    for the fully connected graph (no self edges) over a flattened batch."""
    key = (batch, k)
    cached = _EDGE_CACHE.get(key)
    if cached is None:
        recv, send = [], []
        for i in range(k):
            for j in range(k):
                if i != j:
                    recv.append(i)
                    send.append(j)
        recv = np.asarray(recv, dtype=np.int64)
        send = np.asarray(send, dtype=np.int64)
        offsets = np.repeat(np.arange(batch, dtype=np.int64) * k, len(recv))
        recv_flat = np.tile(recv, batch) + offsets
        send_flat = np.tile(send, batch) + offsets
        ebatch = np.repeat(np.arange(batch, dtype=np.int64), len(recv))
        cached = (recv_flat, send_flat, recv_flat, ebatch)
        _EDGE_CACHE[key] = cached
    return cached


def _node_batch_ids(batch: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(batch, dtype=np.int64), k)


def _apply_mlp(mlp: Mlp, x: Tensor) -> Tensor:
    rows = x.shape[0]
    n = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = ad.add(ad.matmul(x, w), ad.broadcast_rows(b, rows))
        if i < n - 1:
            x = ad.tanh(x)
    return x


# The planner calls the model thousands of times per environment step with no
# tape active; the raw-numpy mirror below skips the op wrappers. It computes
# the same expressions with the same ufuncs, so results are bit-identical to
# the taped path (covered by a cross-path equality test).


def _tape_active() -> bool:
    return bool(ad._ACTIVE_TAPES)


def _mlp_fast(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    n = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = x @ w.data + b.data
        if i < n - 1:
            x = np.tanh(x)
    return x


def _dynamics_fast(slots: np.ndarray, act_feat: np.ndarray, batch: int, k: int, params: ModelParams) -> np.ndarray:
    if k > 1:
        recv, send, seg, ebatch = _edge_index(batch, k)
        msgs = _mlp_fast(params.edge_dyn, np.concatenate([slots[recv], slots[send], act_feat[ebatch]], axis=1))
        EDGE_EVALS.add(len(recv))
        agg = np.zeros((batch * k, msgs.shape[1]))
        np.add.at(agg, seg, msgs)
    else:
        agg = np.zeros((batch * k, params.edge_dyn.biases[-1].shape[0]))
    a_n = act_feat[_node_batch_ids(batch, k)]
    return _mlp_fast(params.node_dyn, np.concatenate([slots, a_n, agg], axis=1))


def _gnn_head_fast(slots: np.ndarray, edge_mlp: Mlp, node_mlp: Mlp, head_mlp: Mlp, batch: int, k: int) -> np.ndarray:
    if k > 1:
        recv, send, seg, _ = _edge_index(batch, k)
        msgs = _mlp_fast(edge_mlp, np.concatenate([slots[recv], slots[send]], axis=1))
        EDGE_EVALS.add(len(recv))
        agg = np.zeros((batch * k, msgs.shape[1]))
        np.add.at(agg, seg, msgs)
    else:
        agg = np.zeros((batch * k, edge_mlp.biases[-1].shape[0]))
    embed = _mlp_fast(node_mlp, np.concatenate([slots, agg], axis=1))
    pooled = np.zeros((batch, embed.shape[1]))
    np.add.at(pooled, _node_batch_ids(batch, k), embed)
    return _mlp_fast(head_mlp, pooled)


def action_features(actions, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Per-sample action representation: embedding lookup (discrete) or a
    linear projection of the raw action vector (continuous)."""
    if cfg.action_mode == "discrete":
        idx = np.asarray(actions, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= cfg.n_actions):
            raise ValueError("action index out of range")
        if not _tape_active():
            return Tensor(params.action_embed.data[idx])
        return ad.gather_rows(params.action_embed, idx)
    arr = np.asarray(actions, dtype=np.float64).reshape(-1, cfg.action_dim)
    if not _tape_active():
        return Tensor(arr @ params.action_embed.data)
    return ad.matmul(Tensor(arr), params.action_embed)


def dynamics_flat(slots_flat: Tensor, act_feat: Tensor, batch: int, k: int, params: ModelParams) -> Tensor:
    """One round of message passing: next slots for a (batch*k, d) input."""
    if not _tape_active():
        return Tensor(_dynamics_fast(slots_flat.data, act_feat.data, batch, k, params))
    if k > 1:
        recv, send, seg, ebatch = _edge_index(batch, k)
        s_i = ad.gather_rows(slots_flat, recv)
        s_j = ad.gather_rows(slots_flat, send)
        a_e = ad.gather_rows(act_feat, ebatch)
        msgs = _apply_mlp(params.edge_dyn, ad.concat([s_i, s_j, a_e], axis=1))
        EDGE_EVALS.add(len(recv))
        agg = ad.segment_sum(msgs, seg, batch * k)
    else:
        agg = Tensor(np.zeros((batch * k, params.edge_dyn.biases[-1].shape[0])))
    a_n = ad.gather_rows(act_feat, _node_batch_ids(batch, k))
    return _apply_mlp(params.node_dyn, ad.concat([slots_flat, a_n, agg], axis=1))


def _gnn_head(slots_flat: Tensor, edge_mlp: Mlp, node_mlp: Mlp, head_mlp: Mlp, batch: int, k: int) -> Tensor:
    if not _tape_active():
        return Tensor(_gnn_head_fast(slots_flat.data, edge_mlp, node_mlp, head_mlp, batch, k))
    if k > 1:
        recv, send, seg, _ = _edge_index(batch, k)
        s_i = ad.gather_rows(slots_flat, recv)
        s_j = ad.gather_rows(slots_flat, send)
        msgs = _apply_mlp(edge_mlp, ad.concat([s_i, s_j], axis=1))
        EDGE_EVALS.add(len(recv))
        agg = ad.segment_sum(msgs, seg, batch * k)
    else:
        agg = Tensor(np.zeros((batch * k, edge_mlp.biases[-1].shape[0])))
    embed = _apply_mlp(node_mlp, ad.concat([slots_flat, agg], axis=1))
    pooled = ad.segment_sum(embed, _node_batch_ids(batch, k), batch)
    return _apply_mlp(head_mlp, pooled)


def reward_flat(slots_flat: Tensor, batch: int, k: int, params: ModelParams) -> Tensor:
    return _gnn_head(slots_flat, params.edge_rew, params.node_rew, params.head_rew, batch, k)


def value_flat(slots_flat: Tensor, batch: int, k: int, params: ModelParams) -> Tensor:
    return _gnn_head(slots_flat, params.edge_val, params.node_val, params.head_val, batch, k)


def policy_flat(slots_flat: Tensor, batch: int, k: int, params: ModelParams) -> Tensor:
    return _gnn_head(slots_flat, params.edge_pol, params.node_pol, params.head_pol, batch, k)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp built from relu so gradients vanish outside [lo, hi]."""
    return ad.add(ad.sub(x, ad.relu(ad.sub(x, hi))), ad.relu(ad.sub(Tensor(np.full(x.shape, lo)), x)))


def split_gaussian(policy_out: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Split a (n, 2*action_dim) policy output into mean and clamped log-std."""
    d = cfg.action_dim
    mean = ad.slice_axis(policy_out, 1, 0, d)
    log_std = clamp(ad.slice_axis(policy_out, 1, d, 2 * d), cfg.logstd_min, cfg.logstd_max)
    return mean, log_std


def _ensure_finite(arr: np.ndarray, what: str, params: ModelParams) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {what}", params=params)


# ---------------------------------------------------------------------------
# single-sample wrappers (planner / environment interaction; no tape)


def dynamics_step(slots: np.ndarray, action, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Predict next slots for one (k, d) slot set under one action."""
    k = slots.shape[0]
    act = [action] if cfg.action_mode == "discrete" else np.asarray(action, dtype=np.float64).reshape(1, -1)
    out = dynamics_flat(Tensor(slots), action_features(act, params, cfg), 1, k, params).data
    _ensure_finite(out, "dynamics output", params)
    return out


def predict_heads(slots: np.ndarray, params: ModelParams, cfg: ModelConfig) -> HeadOutputs:
    """Reward, value, and policy predictions for one (k, d) slot set."""
    k = slots.shape[0]
    flat = Tensor(slots)
    r = reward_flat(flat, 1, k, params).data
    v = value_flat(flat, 1, k, params).data
    p = policy_flat(flat, 1, k, params).data
    for arr, what in ((r, "reward head"), (v, "value head"), (p, "policy head")):
        _ensure_finite(arr, what, params)
    if cfg.action_mode == "discrete":
        policy = p.reshape(-1)
    else:
        d = cfg.action_dim
        policy = GaussianHead(
            mean=p[0, :d].copy(),
            log_std=np.clip(p[0, d:], cfg.logstd_min, cfg.logstd_max),
        )
    return HeadOutputs(reward=float(r.reshape(())), value=float(v.reshape(())), policy=policy)


# ---------------------------------------------------------------------------
# Gaussian policy utilities (continuous actions)

OOB_DENSITY_QUERIES = EdgeEvalCounter()  # warning counter for out-of-bounds queries


def gaussian_log_density(mean: Tensor, log_std: Tensor, actions: np.ndarray, bound: float) -> Tensor:
    """Log-density of a diagonal Gaussian at each action row.

    ``mean``/``log_std`` are (n, d) tensors (gradients flow); ``actions`` is a
    constant (n, d) array. Out-of-bounds actions are evaluated at their
    clamped value and counted on ``OOB_DENSITY_QUERIES``.
    """
    acts = np.asarray(actions, dtype=np.float64)
    if np.any(np.abs(acts) > bound):
        OOB_DENSITY_QUERIES.add(1)
        acts = np.clip(acts, -bound, bound)
    d = acts.shape[1]
    z = ad.mul(ad.sub(Tensor(acts), mean), ad.exp(ad.scale(log_std, -1.0)))
    quad = ad.scale(ad.reduce_sum(ad.mul(z, z), axis=1), -0.5)
    norm = ad.add(ad.reduce_sum(log_std, axis=1), 0.5 * d * LOG_2PI)
    return ad.sub(quad, norm)


def gaussian_sample(head: GaussianHead, m: int, rng: np.random.Generator, bound: float) -> np.ndarray:
    """Reparameterized draws mean + std * eps, clamped to the action box."""
    eps = rng.standard_normal((m, head.mean.shape[0]))
    samples = head.mean[None, :] + np.exp(head.log_std)[None, :] * eps
    return np.clip(samples, -bound, bound)


# ---------------------------------------------------------------------------
# planner-facing adapter


class WorldModel:
    """Planner view of the learned model: latent = (k, d) slot matrix.

    ``step`` applies the dynamics and prices the arrival state with the
    reward head; ``evaluate`` prices a state with the value and policy heads.
    Parameters are read-only here, so concurrent searches are safe.
    """

    def __init__(self, params: ModelParams, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    def initial(self, slots: np.ndarray) -> np.ndarray:
        return np.asarray(slots, dtype=np.float64)

    def step(self, latent: np.ndarray, action) -> tuple[np.ndarray, float]:
        nxt = dynamics_step(latent, action, self.params, self.cfg)
        k = nxt.shape[0]
        r = reward_flat(Tensor(nxt), 1, k, self.params).data
        _ensure_finite(r, "reward head", self.params)
        return nxt, float(r.reshape(()))

    def evaluate(self, latent: np.ndarray):
        k = latent.shape[0]
        flat = Tensor(latent)
        v = value_flat(flat, 1, k, self.params).data
        p = policy_flat(flat, 1, k, self.params).data
        _ensure_finite(v, "value head", self.params)
        _ensure_finite(p, "policy head", self.params)
        if self.cfg.action_mode == "discrete":
            return float(v.reshape(())), p.reshape(-1)
        d = self.cfg.action_dim
        head = GaussianHead(
            mean=p[0, :d].copy(),
            log_std=np.clip(p[0, d:], self.cfg.logstd_min, self.cfg.logstd_max),
        )
        return float(v.reshape(())), head
