"""Length-adaptive multi-signal packing.

Records are turned into token runs of ``[sr, cls, patch_0 ... patch_{P-1}]``
and inserted in arrival order into fixed-capacity sequences; a new sequence
opens as soon as the next record does not fit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import OversizeError, ShapeError

SPECIAL_TOKENS = 2  # sampling-rate token + classification token


def token_count(length: int, patch_size: int = 8) -> int:
    """Tokens a record of ``length`` complex samples occupies in a pack."""
    if length % patch_size:
        raise ShapeError(f"length {length} is not a multiple of patch size {patch_size}")
    return length // patch_size + SPECIAL_TOKENS


@dataclass(frozen=True)
class PackedSequence:
    record_ids: tuple
    boundaries: tuple  # ((start, stop), ...) half-open token intervals
    capacity: int

    @property
    def total_tokens(self) -> int:
        return self.boundaries[-1][1] if self.boundaries else 0

    @property
    def num_records(self) -> int:
        return len(self.record_ids)

    @property
    def token_counts(self) -> list[int]:
        return [b - a for a, b in self.boundaries]

    @property
    def patch_counts(self) -> list[int]:
        return [b - a - SPECIAL_TOKENS for a, b in self.boundaries]

    def validate(self) -> None:
        pos = 0
        for a, b in self.boundaries:
            if a != pos or b <= a:
                raise ShapeError("boundaries must be contiguous, sorted and non-empty")
            pos = b
        if pos > self.capacity:
            raise ShapeError("pack exceeds its capacity")
        if len(self.boundaries) != len(self.record_ids):
            raise ShapeError("one boundary interval per record")

    def utilization(self) -> float:
        return self.total_tokens / self.capacity


def make_pack(record_ids: Sequence, counts: Sequence[int], capacity: int) -> PackedSequence:
    ends = np.cumsum(counts)
    starts = ends - np.asarray(counts)
    p = PackedSequence(
        tuple(record_ids), tuple((int(a), int(b)) for a, b in zip(starts, ends)), int(capacity)
    )
    p.validate()
    return p


def pack_greedy(items: Iterable[tuple], capacity: int) -> list[PackedSequence]:
    """Pack ``(record_id, token_count)`` pairs in arrival order.

    Use :func:`pack_records` to start from sample lengths.
    """
    packs: list[PackedSequence] = []
    ids: list = []
    counts: list[int] = []
    used = 0
    for rid, n in items:
        n = int(n)
        if n > capacity:
            raise OversizeError(f"record {rid!r} needs {n} tokens, capacity is {capacity}")
        if used + n > capacity:
            packs.append(make_pack(ids, counts, capacity))
            ids, counts, used = [], [], 0
        ids.append(rid)
        counts.append(n)
        used += n
    if ids:
        packs.append(make_pack(ids, counts, capacity))
    return packs


def pack_records(
    record_ids: Sequence, lengths: Sequence[int], capacity: int, patch_size: int = 8
) -> list[PackedSequence]:
    return pack_greedy(((rid, token_count(n, patch_size)) for rid, n in zip(record_ids, lengths)), capacity)


def block_ids(p: PackedSequence) -> np.ndarray:
    """Per-token index of the enclosing record."""
    return np.repeat(np.arange(p.num_records), p.token_counts)


def block_mask(p: PackedSequence) -> np.ndarray:
    """Boolean (T, T) matrix; True where two tokens belong to the same record."""
    b = block_ids(p)
    return b[:, None] == b[None, :]


class UtilizationReport(NamedTuple):
    mean_utilization: float
    padding_equivalent_waste: int  # token slots pad-to-max batching would leave empty
    packing_waste: int
    pad_to_max_utilization: float


def utilization_report(packs: Sequence[PackedSequence]) -> UtilizationReport:
    """Compare packing against pad-to-max batching of the same records.

    Pad-to-max places every record in its own row padded to the longest
    record, i.e. the conventional batch-padding layout.
    """
    if not packs:
        raise ShapeError("no packs to report on")
    capacity = packs[0].capacity
    counts = [c for p in packs for c in p.token_counts]
    used = sum(counts)
    longest = max(counts)
    return UtilizationReport(
        mean_utilization=used / (len(packs) * capacity),
        padding_equivalent_waste=len(counts) * longest - used,
        packing_waste=len(packs) * capacity - used,
        pad_to_max_utilization=used / (len(counts) * longest),
    )
