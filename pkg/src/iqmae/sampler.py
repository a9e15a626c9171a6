"""Dataset-adaptive weighted sampling and the prefetch pipeline.

Each dataset owns a pointer into a per-epoch shuffled id list. On every draw
all pointers accumulate credit proportional to their normalized weight; the
dataset holding the most credit (lowest index on ties) emits its next id and
pays one unit. Over N draws dataset d therefore emits N*w_d +- 1 ids.
"""

from __future__ import annotations

import logging
import queue
import threading
import traceback
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InsufficientHistoryError, PipelineError

logger = logging.getLogger(__name__)

# pre-training dataset mix, in corpus order
PRETRAIN_WEIGHTS = (1, 0.5, 1, 1, 0.5, 0.5, 1, 1, 1, 1, 1, 1, 0.5, 0.5)


@dataclass
class DatasetCursor:
    name: str
    ids: np.ndarray
    weight: float
    seed: int
    epoch: int = 0
    position: int = 0
    credit: float = 0.0
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.order = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.ids)

    @property
    def cursor(self) -> float:
        """Fractional position: records consumed plus pending credit."""
        return self.epoch * len(self.ids) + self.position + max(self.credit, 0.0)

    def take(self):
        rid = self.order[self.position]
        self.position += 1
        if self.position == len(self.ids):
            self.epoch += 1
            self.position = 0
            self.order = self._permutation(self.epoch)
        return rid


class SamplerState:
    def __init__(self, datasets: Mapping[str, Sequence[int]], weights: Sequence[float] | None = None, seed: int = 0):
        if not datasets:
            raise ConfigError("sampler needs at least one dataset")
        names = list(datasets)
        weights = [1.0] * len(names) if weights is None else list(weights)
        if len(weights) != len(names):
            raise ConfigError(f"{len(weights)} weights for {len(names)} datasets")
        self.cursors = []
        for k, name in enumerate(names):
            ids = np.asarray(datasets[name])
            if ids.size == 0:
                raise ConfigError(f"dataset {name!r} is empty")
            self.cursors.append(DatasetCursor(name, ids, 1.0, seed=int(seed) * 1000003 + k))
        self.draws = 0
        self.set_weights(weights)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cursors]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.cursors])

    @property
    def normalized_weights(self) -> np.ndarray:
        w = self.weights
        return w / w.sum()

    def set_weights(self, weights: Sequence[float] | Mapping[str, float]) -> None:
        if isinstance(weights, Mapping):
            weights = [weights[c.name] for c in self.cursors]
        if any(not w > 0 for w in weights):
            raise ConfigError("sampling weights must be > 0")
        for c, w in zip(self.cursors, weights):
            c.weight = float(w)

    def next_indices(self, n: int) -> list[tuple[str, int]]:
        if n < 1:
            raise ConfigError("n must be >= 1")
        speed = self.normalized_weights.tolist()
        credit = [c.credit for c in self.cursors]
        out = []
        for _ in range(n):
            best = 0
            for d in range(len(credit)):
                credit[d] += speed[d]
                if credit[d] > credit[best]:
                    best = d
            credit[best] -= 1.0
            cur = self.cursors[best]
            out.append((cur.name, cur.take().item()))
        for c, v in zip(self.cursors, credit):
            c.credit = v
        self.draws += n
        return out


# ---------------------------------------------------------------------------
# weight adaptation


@dataclass(frozen=True)
class WeightPolicy:
    mode: str = "static"
    window: int = 200
    up_factor: float = 1.25
    down_factor: float = 0.8
    epsilon: float = 1e-4
    min_weight: float = 0.1
    max_weight: float = 10.0

    def __post_init__(self):
        if self.mode not in ("static", "plateau_adaptive"):
            raise ConfigError(f"unknown weight policy mode {self.mode!r}")
        if not self.up_factor >= 1 >= self.down_factor > 0:
            raise ConfigError("need up_factor >= 1 >= down_factor > 0")
        if self.min_weight > self.max_weight:
            raise ConfigError("min_weight must not exceed max_weight")
        if self.window < 2:
            raise ConfigError("window must cover at least two steps")


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)


def window_slope(values: Sequence[float], window: int) -> float:
    """Least-squares slope of the last ``window`` values against step index."""
    if len(values) < window:
        raise InsufficientHistoryError(f"need {window} points, have {len(values)}")
    y = np.asarray(values[-window:], dtype=np.float64)
    x = np.arange(window, dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def update_weights(
    weights: Mapping[str, float], histories: Mapping[str, LossHistory], policy: WeightPolicy
) -> dict[str, float]:
    """Rescale weights of datasets whose loss trajectories stall or diverge.

    Divergence (validation rising while training falls) is tested first and
    shrinks the weight; otherwise a validation slope >= -epsilon counts as a
    plateau and grows it.
    """
    new = dict(weights)
    if policy.mode == "static":
        return new
    for name, w in weights.items():
        h = histories[name]
        val_slope = window_slope(h.val, policy.window)
        train_slope = window_slope(h.train, policy.window) if h.train else 0.0
        if val_slope > policy.epsilon and train_slope < -policy.epsilon:
            w = w * policy.down_factor
        elif val_slope >= -policy.epsilon:
            w = w * policy.up_factor
        else:
            continue
        new[name] = float(min(max(w, policy.min_weight), policy.max_weight))
        logger.info("sampler weight %s: %.4g -> %.4g", name, weights[name], new[name])
    return new


# ---------------------------------------------------------------------------
# producer / consumer pipeline


@dataclass
class _Failure:
    producer: int
    index: int
    error: BaseException
    trace: str


_DONE = object()


class Pipeline:
    """Bounded FIFO between ``producers`` worker threads and one consumer.

    Work item j goes to producer ``j % producers``, so producers handle
    disjoint draws and each one's output reaches the consumer in order.
    ``produce(j)`` builds item j. With ``total=None`` production is unbounded
    and the consumer must stop via ``stop_after`` or :meth:`close`.
    """

    def __init__(
        self,
        produce: Callable[[int], object],
        producers: int = 1,
        capacity: int = 8,
        total: int | None = None,
        stop_after: int | None = None,
        deterministic: bool = False,
    ):
        if producers < 1 or capacity < 1:
            raise ConfigError("need producers >= 1 and capacity >= 1")
        self.produce = produce
        self.producers = producers
        self.capacity = capacity
        self.total = total
        self.stop_after = stop_after
        self.deterministic = deterministic
        self.produced = [0] * producers
        self.consumed = 0
        self.dropped = 0
        self.max_occupancy = 0
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                self.max_occupancy = max(self.max_occupancy, self._queue.qsize())
                return True
            except queue.Full:
                continue
        return False

    def _work(self, p: int) -> None:
        j = p
        try:
            while not self._stop.is_set() and (self.total is None or j < self.total):
                item = self.produce(j)
                if not self._put(item):
                    return
                self.produced[p] += 1
                j += self.producers
        except BaseException as exc:  # surfaced to the consumer
            self._put(_Failure(p, j, exc, traceback.format_exc()))
            return
        self._put(_DONE)

    def _sync_iter(self) -> Iterator:
        j = 0
        while (self.total is None or j < self.total) and (self.stop_after is None or self.consumed < self.stop_after):
            try:
                item = self.produce(j)
            except Exception as exc:
                raise PipelineError(f"producer 0 failed on item {j}: {exc}") from exc
            self.produced[0] += 1
            self.consumed += 1
            j += 1
            yield item

    def __iter__(self) -> Iterator:
        if self.deterministic:
            yield from self._sync_iter()
            return
        self._threads = [
            threading.Thread(target=self._work, args=(p,), daemon=True, name=f"producer-{p}")
            for p in range(self.producers)
        ]
        for t in self._threads:
            t.start()
        done = 0
        try:
            while done < self.producers:
                if self.stop_after is not None and self.consumed >= self.stop_after:
                    break
                item = self._queue.get()
                if item is _DONE:
                    done += 1
                    continue
                if isinstance(item, _Failure):
                    raise PipelineError(
                        f"producer {item.producer} failed on item {item.index}: {item.error!r}\n{item.trace}"
                    ) from item.error
                self.consumed += 1
                yield item
        finally:
            self.close()

    def close(self) -> int:
        """Stop producers, discard buffered items and return how many were dropped."""
        self._stop.set()
        for t in self._threads:
            while t.is_alive():
                self._drain()
                t.join(timeout=0.05)
        self._drain()
        self._threads = []
        return self.dropped

    def _drain(self) -> None:
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return
            if item is not _DONE and not isinstance(item, _Failure):
                self.dropped += 1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_pipeline(produce: Callable[[int], object], producers: int = 1, capacity: int = 8, **kwargs) -> Pipeline:
    return Pipeline(produce, producers=producers, capacity=capacity, **kwargs)
