import random
import threading
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqmae.errors import ConfigError, InsufficientHistoryError, PipelineError
from iqmae.sampler import (
    PRETRAIN_WEIGHTS,
    LossHistory,
    Pipeline,
    SamplerState,
    WeightPolicy,
    update_weights,
    window_slope,
)


def _state(sizes, weights=None, seed=0):
    return SamplerState({f"d{i}": range(n) for i, n in enumerate(sizes)}, weights, seed)


def _counts(draws):
    return Counter(name for name, _ in draws)


def test_equal_weights_split_evenly():
    assert _counts(_state([20, 20]).next_indices(10)) == {"d0": 5, "d1": 5}


def test_one_to_half_over_nine():
    assert _counts(_state([20, 20], [1, 0.5]).next_indices(9)) == {"d0": 6, "d1": 3}


def test_empty_dataset_and_bad_weights():
    with pytest.raises(ConfigError):
        SamplerState({"a": [1], "b": []})
    with pytest.raises(ConfigError):
        _state([3, 3], [1, 0])
    with pytest.raises(ConfigError):
        _state([3], [1, 1])


def test_fourteen_way_frequencies():
    s = _state([1000] * 14, PRETRAIN_WEIGHTS)
    c = _counts(s.next_indices(100_000))
    w = np.asarray(PRETRAIN_WEIGHTS) / sum(PRETRAIN_WEIGHTS)
    for i in range(14):
        assert abs(c[f"d{i}"] / 1e5 - w[i]) < 0.01


@given(st.lists(st.floats(0.05, 5), min_size=1, max_size=8), st.integers(1, 3000))
@settings(max_examples=40, deadline=None)
def test_stride_error_bounded(weights, n):
    s = _state([50] * len(weights), weights)
    # split the draws into chunks: state carries across calls
    draws = s.next_indices(n // 2 + 1) + s.next_indices(n - n // 2 + 1)
    c = _counts(draws)
    w = np.asarray(weights) / sum(weights)
    total = len(draws)
    for i in range(len(weights)):
        assert abs(c[f"d{i}"] - total * w[i]) < 1 + 1e-9 * total


def test_every_id_once_per_epoch():
    s = _state([7, 7, 7], seed=4)
    draws = s.next_indices(21 * 3)
    for name in ("d0", "d1", "d2"):
        ids = [i for n, i in draws if n == name]
        for e in range(3):
            assert sorted(ids[7 * e : 7 * (e + 1)]) == list(range(7))
    assert ids[:7] != ids[7:14]  # fresh permutation each epoch


def test_cursor_monotone():
    s = _state([5, 3], [1, 0.3])
    last = [c.cursor for c in s.cursors]
    for _ in range(40):
        s.next_indices(1)
        now = [c.cursor for c in s.cursors]
        assert all(b >= a - 1e-12 for a, b in zip(last, now))
        last = now


# ---------------------------------------------------------------------------
# weight policy


def test_policy_validation():
    with pytest.raises(ConfigError):
        WeightPolicy(up_factor=0.9)
    with pytest.raises(ConfigError):
        WeightPolicy(min_weight=2, max_weight=1)
    with pytest.raises(ConfigError):
        WeightPolicy(mode="other")


def test_window_slope_oracle():
    y = 3.0 - 0.5 * np.arange(10)
    assert window_slope(list(y), 10) == pytest.approx(-0.5, abs=1e-14)
    with pytest.raises(InsufficientHistoryError):
        window_slope([1, 2], 3)


def test_static_mode_unchanged():
    w = {"a": 1.0, "b": 0.5}
    assert update_weights(w, {}, WeightPolicy()) == w


def test_plateau_grows_weight():
    pol = WeightPolicy("plateau_adaptive", window=5)
    hist = {"flat": LossHistory([1.0] * 5, [2.0] * 5), "falling": LossHistory([5, 4, 3, 2, 1], [5, 4, 3, 2, 1])}
    new = update_weights({"flat": 1.0, "falling": 1.0}, hist, pol)
    assert new == {"flat": 1.25, "falling": 1.0}


def test_divergence_shrinks_weight():
    pol = WeightPolicy("plateau_adaptive", window=4)
    hist = {"over": LossHistory([4, 3, 2, 1], [1, 2, 3, 4])}
    assert update_weights({"over": 1.0}, hist, pol) == {"over": 0.8}


def test_short_history_raises():
    pol = WeightPolicy("plateau_adaptive", window=10)
    with pytest.raises(InsufficientHistoryError):
        update_weights({"a": 1.0}, {"a": LossHistory([1.0], [1.0])}, pol)


@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=5), st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_adaptive_weights_stay_in_bounds(weights, seed):
    rng = np.random.default_rng(seed)
    pol = WeightPolicy("plateau_adaptive", window=6, min_weight=0.1, max_weight=10)
    w = {f"d{i}": x for i, x in enumerate(weights)}
    for _ in range(30):
        hist = {k: LossHistory(list(rng.normal(size=6).cumsum()), list(rng.normal(size=6).cumsum())) for k in w}
        w = update_weights(w, hist, pol)
        assert all(0.1 <= v <= 10 for v in w.values())


def test_equal_weight_init_is_uniform():
    assert np.allclose(_state([3] * 5).normalized_weights, 0.2)


# ---------------------------------------------------------------------------
# pipeline


def test_single_producer_capacity_one_matches_sync():
    seq = [i * i for i in range(200)]
    assert list(Pipeline(lambda j: j * j, 1, 1, total=200)) == seq
    assert list(Pipeline(lambda j: j * j, 1, 1, total=200, deterministic=True)) == seq


def test_four_producers_multiset_and_per_producer_fifo():
    got = list(Pipeline(lambda j: j, 4, 8, total=10_000))
    assert Counter(got) == Counter(range(10_000))
    for p in range(4):
        mine = [x for x in got if x % 4 == p]
        assert mine == sorted(mine)


def test_stop_after_reports_dropped():
    pipe = Pipeline(lambda j: j, 2, 4, stop_after=10)
    got = list(pipe)
    assert len(got) == 10 and pipe.consumed == 10
    assert sum(pipe.produced) == 10 + pipe.dropped


def test_producer_failure_surfaces():
    def produce(j):
        if j == 5:
            raise ValueError("boom")
        return j

    with pytest.raises(PipelineError, match="boom"):
        list(Pipeline(produce, 2, 2, total=20))
    with pytest.raises(PipelineError):
        list(Pipeline(produce, 1, 2, total=20, deterministic=True))


@pytest.mark.parametrize("producers,capacity", [(1, 1), (3, 1), (4, 2), (8, 3)])
def test_no_deadlock_with_random_delays(producers, capacity):
    rng = random.Random(producers * 10 + capacity)
    delays = [rng.random() * 1e-3 for _ in range(300)]
    result = {}

    def consume():
        pipe = Pipeline(lambda j: (time.sleep(delays[j]), j)[1], producers, capacity, total=300)
        out = []
        for x in pipe:
            out.append(x)
            if rng.random() < 0.1:
                time.sleep(1e-3)
        result["out"] = out
        result["occ"] = pipe.max_occupancy

    t = threading.Thread(target=consume, daemon=True)
    t.start()
    t.join(60)
    assert not t.is_alive(), "pipeline deadlocked"
    assert sorted(result["out"]) == list(range(300))
    assert result["occ"] <= capacity
