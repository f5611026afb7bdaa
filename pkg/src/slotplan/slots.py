"""Ground-truth slot encoder: EnvState -> unordered set of per-object rows.

Stands in for a frozen visual extractor. Each object contributes one row of
[kind one-hot | normalized position | zero padding]; a per-episode
permutation fixes which row each object occupies (the order is stable within
an episode but arbitrary across episodes), and optional Gaussian noise can be
added for robustness experiments.
"""

from __future__ import annotations

import numpy as np

from .envs import EnvState, KIND_NAMES

N_KINDS = len(KIND_NAMES)
MIN_SLOT_DIM = N_KINDS + 2

EpisodePermutation = np.ndarray  # permutation of range(k), fixed per episode


def layout_descriptor(slot_dim: int) -> str:
    """Versioned description of the feature layout, stored with checkpoints."""
    return f"v1:onehot({','.join(KIND_NAMES)})|pos01(row,col)|zeropad;slot_dim={slot_dim}"


def new_episode_permutation(seed, k: int, mode: str = "identity") -> EpisodePermutation:
    """Identity order, or a uniform draw from the symmetric group on k rows."""
    if mode == "identity":
        return np.arange(k, dtype=np.int64)
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return rng.permutation(k).astype(np.int64)
    raise ValueError(f"unknown permutation mode {mode!r}")


def encode(
    state: EnvState,
    perm: EpisodePermutation,
    slot_dim: int,
    pos_scale: float,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Encode a state as a (k, slot_dim) matrix; row perm[i] holds object i.

    ``pos_scale`` normalizes positions into [0, 1] (grid_size - 1 on the grid,
    1.0 in the unit square). Slots beyond the live object count stay zero.
    """
    k = len(perm)
    if slot_dim < MIN_SLOT_DIM:
        raise ValueError(f"slot_dim {slot_dim} below feature width {MIN_SLOT_DIM}")
    if len(state.objects) > k:
        raise ValueError(f"{len(state.objects)} objects exceed {k} slots")
    out = np.zeros((k, slot_dim), dtype=np.float64)
    for i, obj in enumerate(state.objects):
        row = perm[i]
        out[row, obj.kind] = 1.0
        out[row, N_KINDS] = obj.pos[0] / pos_scale
        out[row, N_KINDS + 1] = obj.pos[1] / pos_scale
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an explicit rng")
        out += rng.normal(0.0, noise_sigma, size=out.shape)
    return out
