import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqmae.errors import OversizeError, ShapeError
from iqmae.packer import (
    block_ids,
    block_mask,
    make_pack,
    pack_greedy,
    pack_records,
    token_count,
    utilization_report,
)


def test_token_count_examples():
    assert token_count(128) == 18
    assert token_count(4096) == 514
    with pytest.raises(ShapeError):
        token_count(100)


def test_greedy_hand_simulation():
    packs = pack_greedy([("a", 18), ("b", 34), ("c", 66)], 100)
    assert [p.record_ids for p in packs] == [("a", "b"), ("c",)]
    assert [p.boundaries for p in packs] == [((0, 18), (18, 52)), ((0, 66),)]


def test_single_record_and_oversize():
    (p,) = pack_greedy([(0, 18)], 6000)
    assert p.utilization() == 18 / 6000
    with pytest.raises(OversizeError):
        pack_greedy([(0, 7000)], 6000)


def test_utilization_examples():
    packs = pack_greedy([("a", 18), ("b", 34), ("c", 66)], 100)
    rep = utilization_report(packs)
    assert rep.mean_utilization == pytest.approx(0.59)
    assert utilization_report(pack_greedy([(0, 50), (1, 50)], 100)).mean_utilization == 1.0


def test_mixed_lengths_beat_pad_to_max():
    lengths = [128, 4096] * 50
    packs = pack_records(range(len(lengths)), lengths, 6000)
    rep = utilization_report(packs)
    assert rep.packing_waste < rep.padding_equivalent_waste
    assert rep.mean_utilization > rep.pad_to_max_utilization


def test_block_ids_example():
    p = make_pack(["x", "y"], [18, 34], 100)
    b = block_ids(p)
    assert np.all(b[:18] == 0) and np.all(b[18:52] == 1)
    assert block_mask(make_pack([0], [18], 100)).all()


_lengths = st.lists(st.integers(16, 512).map(lambda k: 8 * k), min_size=1, max_size=200)


@given(_lengths, st.integers(514, 8000))
@settings(max_examples=60, deadline=None)
def test_lossless_and_within_capacity(lengths, capacity):
    packs = pack_records(range(len(lengths)), lengths, capacity)
    ids = [r for p in packs for r in p.record_ids]
    assert ids == list(range(len(lengths)))  # arrival order kept, so the multiset is too
    assert all(p.total_tokens <= capacity for p in packs)
    # a pack closes only because the next record would not fit
    for a, b in zip(packs, packs[1:]):
        assert a.total_tokens + b.token_counts[0] > capacity


@given(_lengths)
@settings(max_examples=30, deadline=None)
def test_boundaries_reconstruct_token_runs(lengths):
    runs = {i: np.full(token_count(n), i) for i, n in enumerate(lengths)}
    for p in pack_records(list(runs), lengths, 6000):
        stream = np.concatenate([runs[r] for r in p.record_ids])
        for r, (a, b) in zip(p.record_ids, p.boundaries):
            assert np.array_equal(stream[a:b], runs[r])


@given(st.lists(st.integers(3, 40), min_size=1, max_size=64))
@settings(max_examples=40, deadline=None)
def test_block_mask_matches_pairwise_oracle(counts):
    p = make_pack(range(len(counts)), counts, sum(counts))
    owner = [r for r, c in enumerate(counts) for _ in range(c)]
    T = len(owner)
    oracle = np.array([[owner[i] == owner[j] for j in range(T)] for i in range(T)])
    assert np.array_equal(block_mask(p), oracle)
