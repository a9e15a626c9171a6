"""Classification, regression and separation metrics.

BSS-Eval scores use the projection form without distortion filters: the
estimate is split into its projection on the true source, the rest of its
projection on the span of all references, and the residual. Complex
waveforms are scored as real vectors of interleaved I/Q.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateSignalError, ShapeError

logger = logging.getLogger(__name__)

DB_CAP = 300.0


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], num_classes: int | None = None) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ShapeError("truth and prediction lengths differ")
    c = num_classes or int(max(truth.max(initial=-1), pred.max(initial=-1)) + 1)
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() <= 0:
        raise ShapeError("confusion matrix must be square with a positive total")
    return cm


def overall_accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def kappa(cm) -> float:
    """Cohen's kappa; defined as 0 (with a warning) when chance agreement is 1."""
    cm = _check_cm(cm).astype(np.float64)
    total = cm.sum()
    p_o = np.trace(cm) / total
    p_e = float(np.dot(cm.sum(axis=1), cm.sum(axis=0)) / total**2)
    if p_e == 1.0:
        logger.warning("kappa undefined for chance agreement 1; reporting 0")
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def mae_metric(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError("pred and truth lengths differ")
    return float(np.mean(np.abs(pred - truth)))


def mse_metric(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("pred and truth lengths differ")
    return float(np.mean(np.abs(pred - truth) ** 2))


def to_db(power_ratio: float) -> float:
    if power_ratio <= 0:
        return -DB_CAP
    if math.isinf(power_ratio):
        return DB_CAP
    return float(np.clip(10.0 * math.log10(power_ratio), -DB_CAP, DB_CAP))


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return DB_CAP if num > 0 else 0.0
    return to_db(num / den)


def as_real(x) -> np.ndarray:
    """Complex vectors become interleaved I/Q real vectors."""
    x = np.asarray(x)
    if np.iscomplexobj(x):
        out = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
        out[..., 0::2] = x.real
        out[..., 1::2] = x.imag
        return out
    return x.astype(np.float64)


@dataclass(frozen=True)
class BssScore:
    sdr_db: float
    sir_db: float
    sar_db: float
    si_sdr_db: float
    mse: float

    @property
    def mse_db(self) -> float:
        return to_db(self.mse)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mse_db"] = self.mse_db
        return d


def bss_decompose(estimate, references, target: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthogonal split of ``estimate`` into (s_target, e_interf, e_artif)."""
    e = as_real(estimate)
    refs = np.atleast_2d(as_real(references))
    if refs.shape[1] != e.shape[0]:
        raise ShapeError("estimate and references differ in length")
    energies = np.einsum("ij,ij->i", refs, refs)
    if np.any(energies <= 0):
        raise DegenerateSignalError("zero-energy reference")
    s = refs[target]
    s_target = (np.dot(e, s) / energies[target]) * s
    coef, *_ = np.linalg.lstsq(refs.T, e, rcond=None)
    p_all = refs.T @ coef
    return s_target, p_all - s_target, e - p_all


def si_sdr(estimate, reference) -> float:
    e, r = as_real(estimate), as_real(reference)
    if e.shape != r.shape:
        raise ShapeError("estimate and reference differ in length")
    rr = float(np.dot(r, r))
    if rr <= 0:
        raise DegenerateSignalError("zero-energy reference")
    s_t = (np.dot(e, r) / rr) * r
    return _ratio_db(float(np.dot(s_t, s_t)), float(np.sum((e - s_t) ** 2)))


def bss_eval(estimate, references, target: int = 0) -> BssScore:
    """Score one estimate against reference ``target`` within a reference set."""
    s_t, e_i, e_a = bss_decompose(estimate, references, target)
    nt, ni, na = (float(np.dot(v, v)) for v in (s_t, e_i, e_a))
    ref = np.atleast_2d(as_real(references))[target]
    est = as_real(estimate)
    return BssScore(
        sdr_db=_ratio_db(nt, float(np.sum((e_i + e_a) ** 2))),
        sir_db=_ratio_db(nt, ni),
        sar_db=_ratio_db(float(np.sum((s_t + e_i) ** 2)), na),
        si_sdr_db=si_sdr(est, ref),
        mse=float(np.mean((est - ref) ** 2)),
    )


def bss_eval_sources(estimates, references) -> tuple[list[BssScore], tuple[int, ...]]:
    """Match estimates to references by the permutation with best mean SDR
    and score each pair. Zero-energy references are skipped."""
    est = list(estimates)
    refs = [r for r in references if np.any(np.asarray(r) != 0)]
    if not refs:
        raise DegenerateSignalError("all references are silent")
    best, best_perm = None, None
    for perm in itertools.permutations(range(len(est)), len(refs)):
        scores = [bss_eval(est[perm[k]], refs, k) for k in range(len(refs))]
        mean_sdr = float(np.mean([s.sdr_db for s in scores]))
        if best is None or mean_sdr > best[0]:
            best, best_perm = (mean_sdr, scores), perm
    return best[1], best_perm


def summarize(scores: Sequence[BssScore]) -> dict[str, float]:
    keys = ("sdr_db", "sir_db", "sar_db", "si_sdr_db", "mse", "mse_db")
    rows = [s.as_dict() for s in scores]
    return {k: float(np.median([r[k] for r in rows])) for k in keys}


def format_percent(x: float) -> str:
    """Accuracy-style formatting: percent with two decimals."""
    return f"{100.0 * x:.2f}"
