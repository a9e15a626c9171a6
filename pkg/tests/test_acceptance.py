"""The thirteen acceptance criteria, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the
terminal summary. The slow criteria (6, 7, 11, 12) share one toy pretraining
run: tiny preset, 2,000 steps of 4 packs x 512 tokens at lr 1e-3.
"""

import threading
import time
from collections import Counter

import numpy as np
import pytest
import torch

from iqmae import metrics, net, tasks
from iqmae import workflows as wf
from iqmae.masker import MASKED, plan_masks, plan_masks_reference
from iqmae.packer import pack_greedy, pack_records, token_count, utilization_report
from iqmae.sampler import PRETRAIN_WEIGHTS, Pipeline, SamplerState
from iqmae.synth import IQWaveform

D = torch.float64


def _random_packs(n_packs, seed, capacity=6000):
    rng = np.random.default_rng(seed)
    packs, rid = [], 0
    while len(packs) < n_packs:
        lengths = 8 * rng.integers(16, 513, size=200)
        new = pack_records(range(rid, rid + lengths.size), lengths, capacity)
        rid += lengths.size
        packs.extend(new[:-1])  # the last pack of each run may be short; skip it
    return packs[:n_packs]


# ---------------------------------------------------------------------------
# 1-3: packing and masking


def test_c01_packing_lossless_and_capacity(report):
    rng = np.random.default_rng(1)
    lengths = 8 * rng.integers(16, 513, size=10_000)
    t0 = time.perf_counter()
    packs = pack_greedy(((i, token_count(int(n))) for i, n in enumerate(lengths)), 6000)
    rep = utilization_report(packs)
    elapsed = time.perf_counter() - t0
    ids = Counter(r for p in packs for r in p.record_ids)
    ok = (
        ids == Counter(range(10_000))
        and max(p.total_tokens for p in packs) <= 6000
        and rep.mean_utilization > rep.pad_to_max_utilization
        and elapsed < 5
    )
    report(1, ok, f"{len(packs)} packs, utilization {rep.mean_utilization:.3f} vs pad-to-max "
                  f"{rep.pad_to_max_utilization:.3f}, {elapsed:.2f}s")
    assert ok


def test_c02_per_sample_mask_exactness(report):
    packs = _random_packs(1000, seed=2)
    t0 = time.perf_counter()
    bad = extreme = 0
    for s, p in enumerate(packs):
        plan = plan_masks(p, 0.75, s)
        masked = np.bincount(plan.blocks[plan.roles == MASKED], minlength=p.num_records)
        P = np.asarray(p.patch_counts)
        want = np.clip(np.floor(0.75 * P + 0.5), 1, P - 1)
        bad += int(np.sum(masked != want))
        extreme += int(np.sum((masked == 0) | (masked == P)))
    elapsed = time.perf_counter() - t0
    n_rec = sum(p.num_records for p in packs)
    ok = bad == 0 and extreme == 0 and elapsed < 5
    report(2, ok, f"{n_rec} records in 1000 packs, {bad} count mismatches, {extreme} fully masked/visible, {elapsed:.2f}s")
    assert ok


def test_c03_vectorized_masking_matches_reference(report):
    packs = _random_packs(1000, seed=3)
    mismatches = sum(not plan_masks(p, 0.75, 7 + s).same_as(plan_masks_reference(p, 0.75, 7 + s)) for s, p in enumerate(packs))
    report(3, mismatches == 0, f"{mismatches}/1000 plans differ from the per-record loop")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 4-5: the network


def test_c04_block_isolation(report):
    net.set_deterministic(0)
    model = net.IQMAE(net.preset("tiny"))
    model.eval()
    rng = np.random.default_rng(4)
    differing = 0
    for trial in range(100):
        la, lb = 8 * int(rng.integers(4, 64)), 8 * int(rng.integers(4, 64))
        z = lambda n: rng.normal(size=n) + 1j * rng.normal(size=n)  # noqa: E731
        a = IQWaveform(z(la), 1e6)
        b1, b2 = IQWaveform(z(lb), 1e6), IQWaveform(z(lb), 2e6)
        outs = []
        for b in (b1, b2):
            batch = wf.make_batch([a, b], 6000, mask_ratio=0.75, seed=trial, record_ids=["A", "B"])
            with torch.no_grad():
                lat = model.encode_all(batch)[0]
            outs.append(lat[batch.blocks[0] == 0])
        differing += not torch.equal(outs[0], outs[1])
    report(4, differing == 0, f"{differing}/100 packs where replacing B changed A's latents")
    assert differing == 0


def _grad_checks():
    torch.manual_seed(0)
    model = net.IQMAE(net.preset("tiny")).to(D)
    rng = np.random.default_rng(5)
    waves = [IQWaveform(rng.normal(size=64) + 1j * rng.normal(size=64), 1e6) for _ in range(4)]
    backbone = [(n, p) for n, p in model.named_parameters() if not n.startswith(("decoder", "mask_token", "head"))]
    mae_batch = wf.make_batch(waves, 600, mask_ratio=0.75, dtype=D)
    batch = wf.make_batch(waves, 600, dtype=D)
    y = [0, 1, 2, 1]
    targets = torch.rand(4, 4, dtype=D)
    joint = tasks.JointHead(32, 3).to(D)
    bott = tasks.BottleneckConfig((48, 40))
    sep = tasks.SeparationHead(32, 8, 8, bott, "query").to(D)
    mixes = torch.tensor(np.stack([wf._interleave(w.samples) for w in waves]), dtype=D)
    refs = torch.randn(4, 2, 128, dtype=D)

    def with_head(head):
        return backbone + [("head." + n, p) for n, p in head.named_parameters()]

    cases = {
        "mae": (lambda: net.per_record_loss(model, mae_batch)[0], None),
        "classify": (lambda: tasks.classify_loss(model.record_features(batch), y, joint.cls)[1], with_head(joint.cls)),
        "joint": (lambda: tasks.joint_loss(model.record_features(batch), y, targets, joint)[0], with_head(joint)),
        "pit+l2": (
            lambda: tasks.separation_loss(
                tasks.bss_forward(torch.stack(model.patch_latents(batch)), sep, mixes), refs, lam_z=1e-2
            )[0],
            with_head(sep),
        ),
    }
    return {name: net.grad_check(model, fn, probes=100, eps=1e-5, params=params)[0] for name, (fn, params) in cases.items()}


def test_c05_gradient_correctness(report):
    t0 = time.perf_counter()
    errs = _grad_checks()
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and elapsed < 120
    report(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" max rel err, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6-7: toy pretraining and transfer


@pytest.fixture(scope="session")
def pretrained():
    torch.set_num_threads(1)
    records = wf.pretrain_corpus(2400, seed=0)
    cfg = wf.PretrainConfig(preset="tiny", steps=2000, packs_per_step=4, capacity=512, lr=1e-3, seed=0)
    res = wf.pretrain(records, cfg)
    res.model.eval()
    return res, records


@pytest.mark.slow
def test_c06_toy_pretrain_convergence(report, pretrained):
    res, records = pretrained
    datasets = sorted({r.dataset_name for r in records})
    first, last = res.losses[0], float(np.mean(res.losses[-50:]))
    drop = 1 - last / first
    ok = len(records) >= 2000 and len(datasets) == 6 and len(res.losses) == 2000 and drop >= 0.5 and res.seconds < 600
    report(6, ok, f"loss {first:.4f} -> {last:.4f} (mean of last 50), drop {100 * drop:.1f}%, {res.seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_c07_pretraining_transfer(report, pretrained):
    model = pretrained[0].model
    train = wf.modulation_task(800, seed=11, snr_db=10.0)
    test = wf.modulation_task(800, seed=12, snr_db=10.0)
    gaps, rows = [], []
    for seed in range(3):
        torch.manual_seed(1000 + seed)
        random_init = net.IQMAE(net.preset("tiny"))
        random_init.eval()
        oa_pre, _ = wf.probe_accuracy(model, train, test, 4, seed=seed)
        oa_rnd, _ = wf.probe_accuracy(random_init, train, test, 4, seed=seed)
        gaps.append(100 * (oa_pre - oa_rnd))
        rows.append(f"{100 * oa_pre:.1f}/{100 * oa_rnd:.1f}")
    med = float(np.median(gaps))
    ok = med >= 10
    report(7, ok, f"probe OA pretrained/random per seed {', '.join(rows)}; median gap {med:.1f} points")
    assert ok


# ---------------------------------------------------------------------------
# 8-10: sampler, pipeline, separation losses


def test_c08_sampler_frequency_fidelity(report):
    s = SamplerState({f"d{i}": range(500) for i in range(14)}, PRETRAIN_WEIGHTS, seed=8)
    counts = Counter(name for name, _ in s.next_indices(100_000))
    w = np.asarray(PRETRAIN_WEIGHTS) / sum(PRETRAIN_WEIGHTS)
    dev = max(abs(counts[f"d{i}"] / 1e5 - w[i]) for i in range(14))
    eq = SamplerState({f"d{i}": range(10 * (i + 1)) for i in range(3)}, seed=9)
    draws = eq.next_indices(3000)
    coverage_ok = True
    for i in range(3):
        ids = [r for n, r in draws if n == f"d{i}"]
        size = 10 * (i + 1)
        for e in range(len(ids) // size):
            coverage_ok &= sorted(ids[e * size : (e + 1) * size]) == list(range(size))
    ok = dev < 0.01 and coverage_ok
    report(8, ok, f"max |fraction - weight| {dev:.2e}; equal-weight epochs cover every id once: {coverage_ok}")
    assert ok


def test_c09_pipeline_safety(report):
    rng = np.random.default_rng(9)
    lengths = 8 * rng.integers(16, 513, size=10_000)

    def produce(j):
        return pack_records([j], [int(lengths[j])], 6000)[0]

    result = {}

    def consume():
        pipe = Pipeline(produce, producers=4, capacity=8, total=10_000)
        result["got"] = [p.record_ids[0] for p in pipe]
        result["produced"] = sum(pipe.produced)
        result["occupancy"] = pipe.max_occupancy

    t = threading.Thread(target=consume, daemon=True)
    t0 = time.perf_counter()
    t.start()
    t.join(60)
    elapsed = time.perf_counter() - t0
    alive = t.is_alive()
    ok = not alive and Counter(result["got"]) == Counter(range(10_000)) and result["produced"] == 10_000
    ok = ok and result["occupancy"] <= 8
    report(9, ok, f"10000 packs through 4 producers / buffer 8 in {elapsed:.1f}s, deadlock: {alive}")
    assert ok


def test_c10_pit_and_si_sdr_properties(report):
    rng = np.random.default_rng(10)
    pit_ok = True
    for _ in range(100):
        e = torch.tensor(rng.normal(size=(2, 64)))
        r = torch.tensor(rng.normal(size=(2, 64)))
        pit_ok &= tasks.pit_loss(e, r)[0].item() == tasks.pit_loss(e, r.flip(0))[0].item()
    scale_err = 0.0
    energy_err = 0.0
    for _ in range(100):
        e, r = rng.normal(size=128), rng.normal(size=128)
        base = metrics.si_sdr(e, r)
        scale_err = max(scale_err, *(abs(metrics.si_sdr(a * e, r) - base) for a in (0.1, 10.0)))
        refs = rng.normal(size=(2, 128))
        est = refs[0] + 0.3 * refs[1] + 0.2 * rng.normal(size=128)
        parts = metrics.bss_decompose(est, refs)
        energy_err = max(energy_err, abs(sum(p @ p for p in parts) - est @ est) / (est @ est))
    ok = pit_ok and scale_err < 1e-6 and energy_err < 1e-8
    report(10, ok, f"PIT swap-exact {pit_ok}; SI-SDR scale drift {scale_err:.1e} dB; energy identity {energy_err:.1e} rel")
    assert ok


# ---------------------------------------------------------------------------
# 11-13: downstream tasks and metric oracles


def _separation_sdr(backbone, data, mode, seed, train_idx, test_idx):
    cfg = wf.SeparateConfig(steps=1000, lr=3e-3, freeze_backbone=(mode == "lp"), seed=seed)
    head, _ = wf.train_separator(backbone, data, cfg, train_idx)
    return metrics.summarize(wf.evaluate_separator(backbone, head, data, test_idx))["sdr_db"]


@pytest.mark.slow
def test_c11_bss_ordering(report, pretrained, tmp_path):
    ckpt = tmp_path / "pre.ckpt"
    net.save_checkpoint(ckpt, pretrained[0].model)
    data = wf.mixture_task(2200, seed=5, snr_db=12.0)
    train_idx, test_idx = list(range(2000)), list(range(2000, 2200))
    rows, ok = [], True
    for seed in range(3):
        sdr = {}
        for mode in ("ft", "lp", "scratch"):
            if mode == "scratch":
                torch.manual_seed(100 + seed)
                backbone = net.IQMAE(net.preset("tiny"))
            else:
                backbone = net.load_checkpoint(ckpt)[0]
            sdr[mode] = _separation_sdr(backbone, data, mode, seed, train_idx, test_idx)
        ok &= sdr["ft"] > sdr["lp"] and sdr["ft"] > sdr["scratch"]
        rows.append(f"seed {seed}: ft {sdr['ft']:.2f} / lp {sdr['lp']:.2f} / scratch {sdr['scratch']:.2f}")
    report(11, ok, "median SDR dB " + "; ".join(rows))
    assert ok


@pytest.mark.slow
def test_c12_joint_radar_task(report, pretrained, tmp_path):
    ckpt = tmp_path / "pre.ckpt"
    net.save_checkpoint(ckpt, pretrained[0].model)
    model = net.load_checkpoint(ckpt)[0]
    train, test = wf.radar_task(3000, seed=1, snr_db=10.0), wf.radar_task(600, seed=2, snr_db=10.0)
    ytr = np.array([r.infer_class for r in train])
    cfg = wf.FinetuneConfig(steps=2000, lr=3e-3, pool="cls+mean", batch_size=32, reg_hidden=128, lam=5.0)
    t0 = time.perf_counter()
    head, _ = wf.finetune_classifier(model, train, ytr, 3, cfg, targets=wf.radar_targets(train))
    pred, reg = wf.predict(model, head, test, pool="cls+mean")
    elapsed = time.perf_counter() - t0
    oa = metrics.overall_accuracy(metrics.confusion_matrix([r.infer_class for r in test], pred, 3))
    mae = tasks.denormalized_mae(reg, wf.radar_targets(test))
    ok = oa >= 0.95 and mae["t_pw"] < 1.0 and elapsed < 900
    report(12, ok, f"OA {100 * oa:.2f}%, t_pw MAE {mae['t_pw']:.3f} us, {elapsed:.0f}s")
    assert ok


def test_c13_metric_oracles(report):
    k = metrics.kappa([[1, 1], [1, 1]])
    oa = metrics.overall_accuracy(np.diag([5, 3, 2]))
    s = metrics.si_sdr([1.0, 0.1], [1.0, 0.0])
    # hand computations: p_o = p_e = 0.5; trace = total; target 1, residual 0.01
    ok = k == 0.0 and oa == 1.0 and abs(s - 10 * np.log10(1 / 0.01)) < 1e-9 and abs(s - 20) < 1e-9
    report(13, ok, f"kappa {k}, OA {oa}, SI-SDR {s:.12f} dB")
    assert ok
