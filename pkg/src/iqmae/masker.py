"""Per-sample masking inside packed sequences.

Each record gets its own shuffle and its own masked count, derived from a
counter-based hash of (seed, record id, patch index). The vectorized planner
never loops over records; :func:`plan_masks_reference` is the explicit loop it
must agree with bit for bit.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .packer import SPECIAL_TOKENS, PackedSequence

SR, CLS, VISIBLE, MASKED = 0, 1, 2, 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _id_key(rid) -> int:
    if isinstance(rid, (int, np.integer)):
        return int(rid) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(repr(rid).encode())


def record_seeds(seed: int, record_ids) -> np.ndarray:
    """Per-record sub-seed, independent of where the record sits in a pack."""
    keys = np.array([_id_key(r) for r in record_ids], dtype=np.uint64)
    base = splitmix64(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    return splitmix64(base ^ splitmix64(keys))


def masked_count(patches: int, ratio: float) -> int:
    """round(ratio * P) clamped to [1, P-1]; single-patch records stay visible."""
    if patches < 2:
        return 0
    return min(max(int(math.floor(ratio * patches + 0.5)), 1), patches - 1)


def normalized_positions(patch_count: int) -> np.ndarray:
    if patch_count < 1:
        raise ShapeError("patch_count must be >= 1")
    if patch_count == 1:
        return np.zeros(1)
    return np.arange(patch_count) / (patch_count - 1)


def token_positions(pack: PackedSequence) -> np.ndarray:
    """Normalized coordinate of every token in a pack.

    Patches get i/(P-1); the sampling-rate and classification tokens sit at
    the reserved slots -2 and -1 on the same scale.
    """
    counts = np.asarray(pack.token_counts)
    patches = counts - SPECIAL_TOKENS
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(pack.total_tokens) - np.repeat(starts, counts)
    denom = np.repeat(np.maximum(patches - 1, 1), counts).astype(np.float64)
    return (local - SPECIAL_TOKENS) / denom


@dataclass(frozen=True, eq=False)
class MaskPlan:
    roles: np.ndarray  # int8 per token: SR, CLS, VISIBLE, MASKED
    blocks: np.ndarray  # record index per token
    permutation: np.ndarray  # concatenated per-record shuffles of patch positions
    masked_counts: np.ndarray
    ratio: float
    seed: int

    @property
    def total_tokens(self) -> int:
        return int(self.roles.size)

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(self.roles != MASKED)

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(self.roles == MASKED)

    def same_as(self, other: "MaskPlan") -> bool:
        return (
            np.array_equal(self.roles, other.roles)
            and np.array_equal(self.permutation, other.permutation)
            and np.array_equal(self.masked_counts, other.masked_counts)
        )

    def record_permutation(self, r: int, patch_counts) -> np.ndarray:
        offsets = np.concatenate([[0], np.cumsum(patch_counts)])
        return self.permutation[offsets[r] : offsets[r + 1]]


def _check_ratio(ratio: float) -> None:
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")


def plan_masks(pack: PackedSequence, ratio: float, seed: int) -> MaskPlan:
    _check_ratio(ratio)
    counts = np.asarray(pack.token_counts, dtype=np.int64)
    patches = counts - SPECIAL_TOKENS
    n_rec = counts.size
    total = int(counts.sum())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    blocks = np.repeat(np.arange(n_rec), counts)
    local = np.arange(total) - starts[blocks]

    is_patch = local >= SPECIAL_TOKENS
    p_block = blocks[is_patch]
    p_idx = (local[is_patch] - SPECIAL_TOKENS).astype(np.uint64)
    sub = record_seeds(seed, pack.record_ids)
    with np.errstate(over="ignore"):
        keys = splitmix64(sub[p_block] + (p_idx + np.uint64(1)) * _GOLDEN)

    order = np.lexsort((keys, p_block))  # by record, then key
    p_starts = np.concatenate([[0], np.cumsum(patches)[:-1]])
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size) - np.repeat(p_starts, patches)

    m = np.floor(ratio * patches + 0.5).astype(np.int64)
    m = np.where(patches >= 2, np.clip(m, 1, np.maximum(patches - 1, 1)), 0)

    roles = np.where(local == 0, SR, CLS).astype(np.int8)
    roles[is_patch] = np.where(rank < m[p_block], MASKED, VISIBLE)
    perm = p_idx[order].astype(np.int64)
    return MaskPlan(roles, blocks, perm, m, float(ratio), int(seed))


def plan_masks_reference(pack: PackedSequence, ratio: float, seed: int) -> MaskPlan:
    """Per-record loop implementation kept as an oracle for :func:`plan_masks`."""
    _check_ratio(ratio)
    sub = record_seeds(seed, pack.record_ids)
    roles, blocks, perms, ms = [], [], [], []
    for r, (a, b) in enumerate(pack.boundaries):
        p = b - a - SPECIAL_TOKENS
        with np.errstate(over="ignore"):
            keys = splitmix64(sub[r] + (np.arange(p, dtype=np.uint64) + np.uint64(1)) * _GOLDEN)
        order = np.argsort(keys, kind="stable")
        m = masked_count(p, ratio)
        rec = np.full(p, VISIBLE, dtype=np.int8)
        rec[order[:m]] = MASKED
        roles.append(np.concatenate([np.array([SR, CLS], dtype=np.int8), rec]))
        blocks.append(np.full(b - a, r))
        perms.append(order.astype(np.int64))
        ms.append(m)
    return MaskPlan(
        np.concatenate(roles),
        np.concatenate(blocks),
        np.concatenate(perms) if perms else np.zeros(0, dtype=np.int64),
        np.asarray(ms, dtype=np.int64),
        float(ratio),
        int(seed),
    )


def full_visible_plan(pack: PackedSequence) -> MaskPlan:
    """Plan with nothing masked, for downstream tasks that consume whole signals."""
    counts = np.asarray(pack.token_counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    blocks = np.repeat(np.arange(counts.size), counts)
    local = np.arange(int(counts.sum())) - starts[blocks]
    roles = np.select([local == 0, local == 1], [SR, CLS], VISIBLE).astype(np.int8)
    perm = np.concatenate([np.arange(c - SPECIAL_TOKENS) for c in counts]) if counts.size else np.zeros(0)
    return MaskPlan(roles, blocks, perm.astype(np.int64), np.zeros(counts.size, dtype=np.int64), 0.0, 0)


def select_visible(tokens: np.ndarray, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Visible tokens in pack order plus the index map that scatters them back."""
    if len(tokens) != plan.total_tokens:
        raise ShapeError(f"pack has {len(tokens)} tokens but the plan covers {plan.total_tokens}")
    idx = plan.visible_index
    return tokens[idx], idx


def scatter(visible: np.ndarray, plan: MaskPlan, fill) -> np.ndarray:
    """Inverse of :func:`select_visible`; masked slots receive ``fill``."""
    idx = plan.visible_index
    if len(visible) != idx.size:
        raise ShapeError("visible stream does not match the plan")
    out = np.empty((plan.total_tokens,) + visible.shape[1:], dtype=visible.dtype)
    out[...] = fill
    out[idx] = visible
    return out
