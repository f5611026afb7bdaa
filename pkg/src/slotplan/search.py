"""Tree search over a learned (or exact) model with Gumbel root selection.

Root candidates are scored by gumbel + logits (discrete) or sampled from a
mixture of the policy Gaussian and a uniform prior over the action box
(continuous). A sequential-halving schedule spends the simulation budget:
ceil(log2(m)) phases, each granted floor(N / phases) simulations distributed
round-robin over the surviving candidates (so per-candidate visits within a
phase differ by at most one), with the leftover N - phases * floor(N / phases)
spent in the final phase. Survivors are the top half by Q, ties broken by
gumbel score then lowest index; the budget is always spent exactly.

Below the root, descent is deterministic: argmax over the action set of
prior logit + (c_visit + max child visits) * c_scale * qhat, where qhat is
the per-tree min-max normalized Q and unvisited actions fall back to the
node's own value estimate. Continuous nodes descend through the policy mean.

The model is duck-typed: anything with ``step(latent, action) ->
(latent, reward)`` and ``evaluate(latent) -> (value, policy)`` works, which
is how the exact tabular oracle plugs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import PlannerConfig
from .model import GaussianHead, gaussian_sample

Trajectory = tuple[tuple[float, ...], float, int]  # (rewards root->leaf, leaf bootstrap, depth)


@dataclass
class Candidate:
    key: int  # action index (discrete) or candidate slot (continuous)
    action: object
    gumbel: float
    logit: float


@dataclass
class CandidateSet:
    mode: str
    candidates: list[Candidate]

    def __len__(self) -> int:
        return len(self.candidates)


class SearchNode:
    __slots__ = ("latent", "reward", "eval_value", "value_sum", "visits", "children", "policy", "depth")

    def __init__(self, latent, reward: float, eval_value: float, policy, depth: int):
        self.latent = latent
        self.reward = reward
        self.eval_value = eval_value
        self.value_sum = eval_value  # own evaluation counts as the first visit
        self.visits = 1
        self.children: dict[int, SearchNode] = {}
        self.policy = policy
        self.depth = depth

    def value(self) -> float:
        return self.value_sum / self.visits


@dataclass
class SearchResult:
    policy: np.ndarray  # over the full action set (discrete) or the M candidates
    value: float  # search-based value estimate (mean simulated return)
    action: object  # chosen root action
    trajectories: list[Trajectory]
    candidates: np.ndarray | None  # (M, action_dim) in continuous mode
    visit_counts: dict[int, int]
    root: SearchNode = field(repr=False, default=None)


class _MinMax:
    """Per-tree Q range. The floor on the denominator keeps meaningless
    sub-floor Q spreads (value-network noise early in training) from being
    amplified to the full [0, 1] range, which would turn the advantage term
    into a near-one-hot signal on noise."""

    __slots__ = ("lo", "hi", "floor")

    def __init__(self, floor: float = 0.1):
        self.lo = math.inf
        self.hi = -math.inf
        self.floor = floor

    def update(self, v: float) -> None:
        self.lo = min(self.lo, v)
        self.hi = max(self.hi, v)

    def normalize(self, q: float) -> float:
        if self.hi <= self.lo:
            return 0.5
        return (q - self.lo) / max(self.hi - self.lo, self.floor)


# ---------------------------------------------------------------------------
# root candidate generation


def gumbel_root_candidates(
    policy, mode: str, m: int, rng: np.random.Generator, mixture_coef: float = 0.75,
    action_bound: float = 0.1, greedy: bool = False,
) -> CandidateSet:
    """Propose root actions.

    Discrete: score every action by g(a) + logits(a) with i.i.d. Gumbel(0, 1)
    draws and keep the top m; ``greedy=True`` zeroes the Gumbel noise so the
    ranking degenerates to the logits ranking. Continuous: draw m candidates,
    each from the policy Gaussian with probability ``mixture_coef`` and from
    the uniform prior over the action box otherwise.
    """
    if mode == "discrete":
        logits = np.asarray(policy, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(logits)):
            raise ValueError("policy logits must be finite")
        g = np.zeros_like(logits) if greedy else rng.gumbel(size=logits.shape)
        scores = g + logits
        order = sorted(range(len(logits)), key=lambda a: (-scores[a], a))[: min(m, len(logits))]
        cands = [Candidate(key=a, action=a, gumbel=float(g[a]), logit=float(logits[a])) for a in order]
        return CandidateSet("discrete", cands)

    if mode == "continuous":
        if m < 2:
            raise ValueError("continuous search needs at least 2 candidates")
        head: GaussianHead = policy
        d = head.mean.shape[0]
        # fixed draw pattern regardless of the mixture outcome keeps runs reproducible
        use_policy = rng.random(m) < mixture_coef
        from_policy = gaussian_sample(head, m, rng, action_bound)
        from_prior = rng.uniform(-action_bound, action_bound, size=(m, d))
        actions = np.where(use_policy[:, None], from_policy, from_prior)
        var = np.exp(2.0 * head.log_std)
        logp = -0.5 * (((actions - head.mean[None, :]) ** 2) / var[None, :]).sum(axis=1)
        logp -= head.log_std.sum() + 0.5 * d * math.log(2.0 * math.pi)
        cands = [
            Candidate(key=i, action=actions[i].copy(), gumbel=0.0, logit=float(logp[i]))
            for i in range(m)
        ]
        return CandidateSet("continuous", cands)

    raise ValueError(f"unknown action mode {mode!r}")


# ---------------------------------------------------------------------------
# tree simulation


def _expand(model, parent: SearchNode, action) -> SearchNode:
    latent, reward = model.step(parent.latent, action)
    value, policy = model.evaluate(latent)
    return SearchNode(latent, reward, value, policy, parent.depth + 1)


def _select_action(node: SearchNode, gamma: float, minmax: _MinMax, pcfg: PlannerConfig, mode: str):
    """Deterministic in-tree rule: argmax of logit + scaled normalized Q."""
    if mode == "continuous":
        # single child through the policy mean; key 0
        return 0, node.policy.mean.copy()
    logits = node.policy
    max_visits = max((c.visits for c in node.children.values()), default=0)
    scale = (pcfg.c_visit + max_visits) * pcfg.c_scale
    best_a, best_score = 0, -math.inf
    for a in range(len(logits)):
        child = node.children.get(a)
        q = child.reward + gamma * child.value() if child is not None else node.value()
        score = logits[a] + scale * minmax.normalize(q)
        if score > best_score:
            best_a, best_score = a, score
    return best_a, best_a


def simulate_once(
    root: SearchNode, candidate: Candidate, model, gamma: float, depth_cap: int,
    pcfg: PlannerConfig, minmax: _MinMax, mode: str,
) -> Trajectory:
    """Run one simulation through the candidate's subtree.

    Descends with the in-tree rule, expands one leaf (or bootstraps in place
    at the depth cap), then backs the discounted return up through every
    ancestor strictly above the bootstrap node. Returns the trajectory record
    (rewards from the root, leaf bootstrap value, depth) used for the
    search-based value estimate.
    """
    path = [root]  # nodes strictly above the bootstrap node
    rewards: list[float] = []

    child = root.children.get(candidate.key)
    if child is None:
        leaf = _expand(model, root, candidate.action)
        root.children[candidate.key] = leaf
        rewards.append(leaf.reward)
    else:
        node = child
        path.append(node)
        rewards.append(node.reward)
        leaf = None
        while node.depth < depth_cap:
            key, action = _select_action(node, gamma, minmax, pcfg, mode)
            nxt = node.children.get(key)
            if nxt is None:
                leaf = _expand(model, node, action)
                node.children[key] = leaf
                rewards.append(leaf.reward)
                break
            node = nxt
            path.append(node)
            rewards.append(node.reward)
        if leaf is None:
            # depth cap: bootstrap on the current node, no expansion; its
            # incoming reward is already the last entry of ``rewards``
            leaf = path.pop()

    bootstrap = leaf.eval_value
    g = bootstrap
    for i in range(len(rewards) - 1, -1, -1):
        g = rewards[i] + gamma * g
        node = path[i]
        node.value_sum += g
        node.visits += 1
        minmax.update(g)
    return tuple(rewards), bootstrap, len(rewards)


def search_value_estimate(trajectories: list[Trajectory], gamma: float) -> float:
    """Mean over simulations of (sum_t gamma^t r_t + gamma^H * leaf bootstrap)."""
    if not trajectories:
        raise ValueError("empty trajectory log")
    total = 0.0
    for rewards, bootstrap, depth in trajectories:
        value = sum(r * gamma**t for t, r in enumerate(rewards))
        total += value + gamma**depth * bootstrap
    return total / len(trajectories)


# ---------------------------------------------------------------------------
# sequential halving at the root


def _candidate_q(root: SearchNode, cand: Candidate, gamma: float) -> float:
    child = root.children.get(cand.key)
    if child is None:
        return -math.inf
    return child.reward + gamma * child.value()


def _rank(root: SearchNode, cands: list[Candidate], gamma: float) -> list[Candidate]:
    keyed = {c.key: i for i, c in enumerate(cands)}
    return sorted(cands, key=lambda c: (-_candidate_q(root, c, gamma), -c.gumbel, keyed[c.key]))


def sequential_halving(
    candidates: CandidateSet, budget: int, model, root: SearchNode, gamma: float,
    pcfg: PlannerConfig,
) -> tuple[Candidate, list[Trajectory]]:
    """Spend ``budget`` simulations over the candidates, halving each phase.

    Returns the surviving candidate and the full trajectory log (length is
    exactly ``budget``).
    """
    cands = list(candidates.candidates)
    m = len(cands)
    if m == 0:
        raise ValueError("no candidates")
    if budget < m:
        raise ValueError(f"budget {budget} below candidate count {m}")

    log: list[Trajectory] = []
    minmax = _MinMax(pcfg.q_floor)

    def run_phase(survivors: list[Candidate], sims: int) -> None:
        n = len(survivors)
        base, extra = divmod(sims, n)
        for i, cand in enumerate(survivors):
            visits = base + (1 if i < extra else 0)
            for _ in range(visits):
                log.append(
                    simulate_once(root, cand, model, gamma, pcfg.depth_cap, pcfg, minmax, candidates.mode)
                )

    if m == 1:
        run_phase(cands, budget)
        return cands[0], log

    phases = math.ceil(math.log2(m))
    base = budget // phases
    leftover = budget - base * phases
    survivors = sorted(cands, key=lambda c: (-(c.gumbel + c.logit), c.key))
    for phase in range(phases):
        sims = base + (leftover if phase == phases - 1 else 0)
        run_phase(survivors, sims)
        survivors = _rank(root, survivors, gamma)
        if phase < phases - 1:
            survivors = survivors[: max(1, math.ceil(len(survivors) / 2))]
    return survivors[0], log


# ---------------------------------------------------------------------------
# target policy


def make_target_policy(
    root: SearchNode, candidates: CandidateSet, gamma: float, pcfg: PlannerConfig,
) -> np.ndarray:
    """Distribution the trainer regresses the policy head onto.

    Discrete: softmax of (logits + scaled normalized Q) over visited actions,
    zero elsewhere, then mixed with ``policy_smoothing`` mass of
    softmax(logits) to keep full support. Continuous: the same softmax over
    visited candidates, no smoothing.
    """
    minmax = _MinMax(pcfg.q_floor)
    qs = {}
    for cand in candidates.candidates:
        q = _candidate_q(root, cand, gamma)
        if q != -math.inf:
            qs[cand.key] = q
            minmax.update(q)
    max_visits = max((c.visits for c in root.children.values()), default=0)
    scale = (pcfg.c_visit + max_visits) * pcfg.c_scale

    if candidates.mode == "discrete":
        logits = np.asarray(root.policy, dtype=np.float64).reshape(-1)
        n = len(logits)
        pi = np.zeros(n)
        visited = sorted(qs)
        if visited:
            scores = np.array([logits[a] + scale * minmax.normalize(qs[a]) for a in visited])
            scores -= scores.max()
            w = np.exp(scores)
            pi[visited] = w / w.sum()
        eps = pcfg.policy_smoothing
        if eps > 0.0:
            prior = np.exp(logits - logits.max())
            pi = (1.0 - eps) * pi + eps * prior / prior.sum()
        return pi

    m = len(candidates.candidates)
    pi = np.zeros(m)
    visited = [c for c in candidates.candidates if c.key in qs]
    if visited:
        scores = np.array([c.logit + scale * minmax.normalize(qs[c.key]) for c in visited])
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        for c, wi in zip(visited, w):
            pi[c.key] = wi
    return pi


# ---------------------------------------------------------------------------
# orchestration


def run_search(
    model, root_latent, pcfg: PlannerConfig, gamma: float, rng: np.random.Generator,
    mode: str, action_bound: float = 0.1, greedy: bool = False,
) -> SearchResult:
    """Full root search: candidates, sequential halving, targets, SVE."""
    latent = model.initial(root_latent)
    value, policy = model.evaluate(latent)
    root = SearchNode(latent, 0.0, value, policy, depth=0)
    candidates = gumbel_root_candidates(
        policy, mode, pcfg.num_candidates, rng,
        mixture_coef=pcfg.mixture_coef, action_bound=action_bound, greedy=greedy,
    )
    chosen, log = sequential_halving(candidates, pcfg.num_simulations, model, root, gamma, pcfg)
    pi = make_target_policy(root, candidates, gamma, pcfg)
    sve = search_value_estimate(log, gamma)
    cand_array = None
    if candidates.mode == "continuous":
        cand_array = np.stack([c.action for c in candidates.candidates])
    visit_counts = {key: child.visits for key, child in root.children.items()}
    return SearchResult(
        policy=pi, value=sve, action=chosen.action, trajectories=log,
        candidates=cand_array, visit_counts=visit_counts, root=root,
    )
