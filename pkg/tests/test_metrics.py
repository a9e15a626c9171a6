import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iqmae.errors import DegenerateSignalError, ShapeError
from iqmae.metrics import (
    DB_CAP,
    bss_decompose,
    bss_eval,
    bss_eval_sources,
    confusion_matrix,
    format_percent,
    kappa,
    mae_metric,
    mse_metric,
    overall_accuracy,
    si_sdr,
)


def test_accuracy_examples():
    assert overall_accuracy(np.diag([3, 4, 5])) == 1.0
    assert overall_accuracy([[1, 1], [1, 1]]) == 0.5
    assert format_percent(0.99871) == "99.87"
    with pytest.raises(ShapeError):
        overall_accuracy(np.zeros((2, 2)))


def test_kappa_examples():
    assert kappa(np.diag([2, 7])) == 1.0
    assert kappa([[1, 1], [1, 1]]) == 0.0
    assert kappa([[5]]) == 0.0  # chance agreement 1


@given(arrays(np.int64, (4, 4), elements=st.integers(0, 50)))
def test_kappa_brute_force(cm):
    if cm.sum() == 0:
        return
    n = cm.sum()
    po = sum(cm[i, i] for i in range(4)) / n
    pe = sum(sum(cm[i, :]) * sum(cm[:, i]) for i in range(4)) / n**2
    expected = 0.0 if pe == 1 else (po - pe) / (1 - pe)
    assert abs(kappa(cm) - expected) < 1e-12
    assert kappa(cm) <= overall_accuracy(cm) + 1e-12 or pe == 1


def test_confusion_matrix_rows_are_truth():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 1, 0]]
    assert cm.sum() == 4


def test_mae_mse():
    t = np.arange(5.0)
    assert mae_metric(t, t) == 0 and mse_metric(t, t) == 0
    assert mae_metric(t + 0.5, t) == 0.5 and mse_metric(t + 0.5, t) == 0.25
    with pytest.raises(ShapeError):
        mae_metric([1, 2], [1])


def test_si_sdr_examples():
    assert abs(si_sdr([1.0, 0.1], [1.0, 0.0]) - 20.0) < 1e-9
    r = np.random.default_rng(0).normal(size=32)
    assert si_sdr(10 * r, r) == DB_CAP
    with pytest.raises(DegenerateSignalError):
        si_sdr(r, np.zeros(32))


@given(st.integers(0, 10**6))
@settings(max_examples=50)
def test_si_sdr_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    e, r = rng.normal(size=64), rng.normal(size=64)
    base = si_sdr(e, r)
    for a in (0.1, 10.0):
        assert abs(si_sdr(a * e, r) - base) < 1e-6


def test_bss_eval_examples():
    r1 = np.array([1.0, 0, 0, 0])
    r2 = np.array([0, 1.0, 0, 0])
    s = bss_eval(r1, r1[None])
    assert s.sdr_db == s.sir_db == DB_CAP
    s = bss_eval(r1 + 0.1 * r2, np.stack([r1, r2]))
    assert abs(s.sir_db - 20) < 1e-9 and s.sar_db == DB_CAP
    with pytest.raises(DegenerateSignalError):
        bss_eval(r1, np.stack([r1, 0 * r2]))


def test_bss_eval_complex_is_interleaved():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 16)) + 1j * rng.normal(size=(2, 16))
    e = z[0] + 0.3 * z[1] + 0.05 * (rng.normal(size=16) + 1j * rng.normal(size=16))
    real = np.empty((2, 32))
    real[:, 0::2], real[:, 1::2] = z.real, z.imag
    er = np.empty(32)
    er[0::2], er[1::2] = e.real, e.imag
    assert bss_eval(e, z) == bss_eval(er, real)


@given(st.integers(0, 10**6), st.integers(1, 3))
@settings(max_examples=100)
def test_bss_energy_identity(seed, k):
    rng = np.random.default_rng(seed)
    refs = rng.normal(size=(k, 48))
    est = rng.normal(size=48) + refs[0]
    parts = bss_decompose(est, refs)
    energy = sum(float(p @ p) for p in parts)
    assert abs(energy - est @ est) <= 1e-8 * (est @ est)
    # independent oracle for the SDR definition
    s_t = (est @ refs[0]) / (refs[0] @ refs[0]) * refs[0]
    sdr = 10 * math.log10((s_t @ s_t) / np.sum((est - s_t) ** 2))
    assert abs(bss_eval(est, refs).sdr_db - sdr) < 1e-9


def test_bss_eval_sources_matches_permutation_and_skips_silent():
    rng = np.random.default_rng(2)
    refs = rng.normal(size=(2, 40))
    scores, perm = bss_eval_sources([refs[1], refs[0]], refs)
    assert perm == (1, 0) and all(s.sdr_db == DB_CAP for s in scores)
    scores, perm = bss_eval_sources([refs[1] * 0.01, refs[0]], [refs[0], np.zeros(40)])
    assert len(scores) == 1 and perm == (1,)


def test_mse_db_form():
    s = bss_eval([1.0, 0.1], np.array([[1.0, 0.0]]))
    assert s.mse == pytest.approx(0.005) and s.mse_db == pytest.approx(10 * math.log10(0.005))
