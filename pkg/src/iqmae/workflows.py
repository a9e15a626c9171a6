"""Synthetic task corpora and the training loops shared by the CLI and the
acceptance suite: pretraining, classification / joint fine-tuning, linear
probing and AE-based separation.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics, net, tasks
from .corpus import IQRecord, minmax_normalize
from .errors import ConfigError, NumericError
from .masker import full_visible_plan, plan_masks
from .packer import pack_greedy, token_count
from .sampler import LossHistory, Pipeline, SamplerState, WeightPolicy, update_weights
from .synth import (
    MODULATIONS,
    RADAR_MIX_KINDS,
    IQWaveform,
    MixtureSpec,
    apply_awgn,
    mix_sources,
    random_radar_params,
    synth_linear_mod,
    synth_radar_pulse_train,
)

logger = logging.getLogger(__name__)

COMM_RATE_HZ = 1e6
RADCHAR_RATE_HZ = 3.2e6
MIX_RATE_HZ = 5e6


# ---------------------------------------------------------------------------
# synthetic corpora


def _rotate(w: IQWaveform, rng: np.random.Generator) -> IQWaveform:
    return w.with_samples(w.samples * np.exp(1j * rng.uniform(0, 2 * np.pi)))


def pretrain_corpus(
    n_records: int,
    seed: int = 0,
    snr_db: tuple[float, float] = (10.0, 20.0),
    lengths: Sequence[int] = (128, 256, 512, 1024),
) -> list[IQRecord]:
    """Six unlabeled-style datasets: four modulations and two radar waveforms."""
    rng = np.random.default_rng(seed)
    kinds = [("comm", m) for m in MODULATIONS] + [("radar", "rectangular"), ("radar", "lfm")]
    records = []
    for i in range(n_records):
        family, kind = kinds[i % len(kinds)]
        snr = float(rng.uniform(*snr_db))
        sub = int(rng.integers(2**31))
        if family == "comm":
            length = int(rng.choice(lengths))
            sps = int(rng.choice([8, 16, 32]))
            w = synth_linear_mod(kind, length // sps, sps, COMM_RATE_HZ, sub)
            extra = dict(modulation_type=kind)
        else:
            p = random_radar_params(kind, rng)
            w = synth_radar_pulse_train(p, RADCHAR_RATE_HZ, 512, sub)
            extra = dict(
                radar_waveform_type=kind, num_pulses=p.n_p, pulse_width_us=p.t_pw, pri_us=p.t_pri,
                pulse_time_delay_us=p.t_d,
            )
        w = apply_awgn(w, snr, sub + 1)
        records.append(IQRecord(w, dataset_name=f"{family}-{kind}", snr_db=snr, **extra))
    return records


def modulation_task(
    n_records: int, seed: int, snr_db: float | Sequence[float] = 10.0, length: int = 256, sps: int = 8,
    classes: Sequence[str] = MODULATIONS,
) -> list[IQRecord]:
    """Labelled modulation records with random carrier phase."""
    rng = np.random.default_rng(seed)
    snrs = np.atleast_1d(np.asarray(snr_db, dtype=float))
    out = []
    for i in range(n_records):
        c = i % len(classes)
        snr = float(snrs[(i // len(classes)) % snrs.size])
        sub = int(rng.integers(2**31))
        w = _rotate(synth_linear_mod(classes[c], length // sps, sps, COMM_RATE_HZ, sub), rng)
        w = apply_awgn(w, snr, sub + 1)
        out.append(IQRecord(w, "mod-task", infer_class=c, modulation_type=classes[c], snr_db=snr))
    return out


RADAR_TASK_KINDS = ("rectangular", "lfm", "barker")


def radar_task(
    n_records: int, seed: int, snr_db: float | tuple[float, float] = 10.0, length: int = 512,
    kinds: Sequence[str] = RADAR_TASK_KINDS,
) -> list[IQRecord]:
    """RadChar-style pulse trains with class labels and timing parameters."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_records):
        c = i % len(kinds)
        p = random_radar_params(kinds[c], rng)
        sub = int(rng.integers(2**31))
        snr = float(rng.uniform(*snr_db)) if isinstance(snr_db, tuple) else float(snr_db)
        w = apply_awgn(synth_radar_pulse_train(p, RADCHAR_RATE_HZ, length, sub), snr, sub + 1)
        out.append(
            IQRecord(
                w, "radar-task", infer_class=c, radar_waveform_type=kinds[c], snr_db=snr, num_pulses=p.n_p,
                pulse_width_us=p.t_pw, pri_us=p.t_pri, pulse_time_delay_us=p.t_d,
            )
        )
    return out


def radar_targets(records: Sequence[IQRecord]) -> np.ndarray:
    """(N, 4) min-max normalized (n_p, t_pw, t_pri, t_d)."""
    raw = np.array([[r.num_pulses, r.pulse_width_us, r.pri_us, r.pulse_time_delay_us] for r in records], dtype=float)
    return np.stack([minmax_normalize(raw[:, k], lo, hi) for k, (lo, hi) in enumerate(tasks.RADAR_RANGES)], axis=1)


@dataclass
class MixtureSet:
    mixtures: list[IQWaveform]
    references: np.ndarray  # (N, K, length) complex, zero rows for absent sources
    kinds: list[tuple]


def mixture_task(
    n_mixtures: int, seed: int, snr_db: float = 12.0, length: int = 1024, pair_fraction: float = 1.0,
    kinds: Sequence[str] = tuple(RADAR_MIX_KINDS),
) -> MixtureSet:
    """Radar mixtures in pairs (or singly) at a fixed SNR, 5 MHz sampling."""
    rng = np.random.default_rng(seed)
    mixes, refs, used = [], [], []
    t_scale = dict(n_p=(2, 6), t_pw=(5.0, 12.0), t_pri=(14.0, 30.0), t_d=(0.0, 20.0))
    for i in range(n_mixtures):
        count = 2 if rng.random() < pair_fraction else 1
        chosen = tuple(rng.choice(len(kinds), size=count, replace=False))
        sources = []
        for k in chosen:
            p = random_radar_params(kinds[k], rng, **t_scale)
            sources.append(synth_radar_pulse_train(p, MIX_RATE_HZ, length, int(rng.integers(2**31))))
        gains = tuple(float(g) for g in rng.uniform(0.5, 1.0, size=count))
        spec = MixtureSpec(count, tuple(kinds[k] for k in chosen), snr_db, gains)
        mix, rs = mix_sources(sources, spec, int(rng.integers(2**31)))
        r = np.zeros((2, length), dtype=np.complex128)
        for j, ref in enumerate(rs):
            r[j] = ref.samples
        mixes.append(mix)
        refs.append(r)
        used.append(spec.source_kinds)
    return MixtureSet(mixes, np.stack(refs), used)


# ---------------------------------------------------------------------------
# batching helpers


def make_batch(
    waveforms: Sequence[IQWaveform],
    capacity: int,
    patch_size: int = 8,
    mask_ratio: float | None = None,
    seed: int = 0,
    dtype=torch.float32,
    datasets: Sequence[str] | None = None,
    record_ids: Sequence[int] | None = None,
) -> net.Batch:
    """Pack waveforms in order and collate; ``mask_ratio=None`` keeps every patch visible."""
    ids = list(range(len(waveforms))) if record_ids is None else list(record_ids)
    packs = pack_greedy(((i, token_count(w.length, patch_size)) for i, w in zip(ids, waveforms)), capacity)
    items, plans, k = [], [], 0
    for p in packs:
        chunk = waveforms[k : k + p.num_records]
        ds = datasets[k : k + p.num_records] if datasets is not None else ()
        items.append(net.pack_data(p, chunk, patch_size, datasets=ds))
        plans.append(full_visible_plan(p) if mask_ratio is None else plan_masks(p, mask_ratio, seed))
        k += p.num_records
    return net.collate(items, plans, dtype=dtype)


def batched_features(model: net.IQMAE, waveforms, capacity=600, chunk=32, pool="cls") -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for k in range(0, len(waveforms), chunk):
            out.append(model.record_features(make_batch(waveforms[k : k + chunk], capacity), pool))
    return torch.cat(out)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    preset: str = "tiny"
    steps: int = 2000
    packs_per_step: int = 4
    capacity: int = 512
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    mask_ratio: float = 0.75
    seed: int = 0
    workers: int = 1
    buffer: int = 8
    deterministic: bool = True
    weights: dict | None = None
    policy: WeightPolicy = field(default_factory=WeightPolicy)
    eval_every: int = 50


class BatchSource:
    """Turns sampler draws into training batches.

    Record selection for batch j is sequential in j (held under a lock) so
    parallel producers see the same draws as a single-threaded run.
    """

    def __init__(self, records: Sequence[IQRecord], sampler: SamplerState, cfg: PretrainConfig, patch_size: int):
        self.records = records
        self.sampler = sampler
        self.cfg = cfg
        self.patch_size = patch_size
        self._lock = threading.Lock()
        self._drawn: dict[int, list[int]] = {}
        self._next_j = 0
        self._carry: int | None = None

    def _draw_one(self) -> int:
        if self._carry is not None:
            rid, self._carry = self._carry, None
            return rid
        return int(self.sampler.next_indices(1)[0][1])

    def _select(self, j: int) -> list[int]:
        with self._lock:
            while self._next_j <= j:
                ids, used, packs = [], 0, 1
                while True:
                    rid = self._draw_one()
                    n = token_count(self.records[rid].length, self.patch_size)
                    if used + n > self.cfg.capacity:
                        if packs == self.cfg.packs_per_step:
                            self._carry = rid
                            break
                        packs += 1
                        used = 0
                    ids.append(rid)
                    used += n
                self._drawn[self._next_j] = ids
                self._next_j += 1
            return self._drawn.pop(j)

    def __call__(self, j: int) -> net.Batch:
        ids = self._select(j)
        ws = [self.records[i].waveform for i in ids]
        ds = [self.records[i].dataset_name for i in ids]
        return make_batch(
            ws, self.cfg.capacity, self.patch_size, self.cfg.mask_ratio,
            seed=self.cfg.seed * 1_000_003 + j, datasets=ds, record_ids=ids,
        )


@dataclass
class PretrainResult:
    model: net.IQMAE
    losses: list
    dataset_losses: list
    weight_trace: list
    seconds: float


def pretrain(
    records: Sequence[IQRecord],
    cfg: PretrainConfig,
    model: net.IQMAE | None = None,
    log: Callable[[dict], None] | None = None,
) -> PretrainResult:
    torch.manual_seed(cfg.seed)
    if model is None:
        model = net.IQMAE(net.preset(cfg.preset, mask_ratio=cfg.mask_ratio))
    by_ds: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_ds.setdefault(r.dataset_name, []).append(i)
    names = list(by_ds)
    weights = [float((cfg.weights or {}).get(n, 1.0)) for n in names]
    sampler = SamplerState(by_ds, weights, seed=cfg.seed)
    source = BatchSource(records, sampler, cfg, model.config.patch_size)
    state = net.make_train_state(model.parameters(), cfg.lr, cfg.steps, cfg.warmup_fraction)
    histories = {n: LossHistory() for n in names}
    losses, ds_losses, weight_trace = [], [], []
    t0 = time.time()
    pipe = Pipeline(
        source, producers=cfg.workers, capacity=cfg.buffer, total=cfg.steps, deterministic=cfg.deterministic
    )
    for step, batch in enumerate(pipe):
        loss, per_ds = net.pretrain_step(model, batch, state)
        losses.append(loss)
        ds_losses.append(per_ds)
        for n, v in per_ds.items():
            histories[n].train.append(v)
        if cfg.policy.mode != "static" and (step + 1) % cfg.eval_every == 0:
            _record_validation(model, records, by_ds, histories, cfg, model.config.patch_size)
            try:
                new = update_weights(dict(zip(sampler.names, sampler.weights)), histories, cfg.policy)
                sampler.set_weights(new)
            except ConfigError:
                pass  # not enough history yet
        weight_trace.append(dict(zip(sampler.names, sampler.weights.tolist())))
        if log is not None:
            log(dict(step=step, loss=loss, lr=net.current_lr(state), datasets=per_ds, weights=weight_trace[-1]))
    return PretrainResult(model, losses, ds_losses, weight_trace, time.time() - t0)


def _record_validation(model, records, by_ds, histories, cfg, patch_size):
    model.eval()
    with torch.no_grad():
        for name, ids in by_ds.items():
            sub = ids[-8:]
            b = make_batch([records[i].waveform for i in sub], cfg.capacity, patch_size, cfg.mask_ratio, seed=12345)
            loss, _ = net.per_record_loss(model, b)
            histories[name].val.append(float(loss))
    model.train()


# ---------------------------------------------------------------------------
# fine-tuning: classification and joint radar task


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 32
    capacity: int = 600
    lr: float = 1e-3
    backbone_lr: float | None = None
    warmup_fraction: float = 0.1
    freeze_backbone: bool = False
    pool: str = "cls"
    lam: float = 1.0
    reg_hidden: int = 0
    seed: int = 0


def _param_groups(model, head, cfg: FinetuneConfig):
    groups = [{"params": list(head.parameters()), "lr": cfg.lr}]
    if not cfg.freeze_backbone:
        groups.append({"params": list(model.parameters()), "lr": cfg.backbone_lr or cfg.lr})
    else:
        for p in model.parameters():
            p.requires_grad_(False)
    return groups


def _optimizer(groups, cfg: FinetuneConfig):
    opt = torch.optim.AdamW(groups, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, net.warmup_cosine(cfg.steps, cfg.warmup_fraction))
    return opt, sched


def finetune_classifier(
    model: net.IQMAE, records: Sequence[IQRecord], labels, num_classes: int, cfg: FinetuneConfig,
    targets: np.ndarray | None = None,
) -> tuple[torch.nn.Module, list]:
    """Train a classification (or, with ``targets``, joint) head on top of the encoder."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    feat_dim = model.config.embed_dim * (2 if cfg.pool == "cls+mean" else 1)
    head = tasks.JointHead(feat_dim, num_classes, targets.shape[1], cfg.reg_hidden) if targets is not None else tasks.ClassifierHead(
        feat_dim, num_classes
    )
    opt, sched = _optimizer(_param_groups(model, head, cfg), cfg)
    labels = np.asarray(labels)
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
        model.train(not cfg.freeze_backbone)
        batch = make_batch([records[i].waveform for i in idx], cfg.capacity)
        feats = model.record_features(batch, cfg.pool)
        if cfg.freeze_backbone:
            feats = feats.detach()
        if targets is not None:
            loss, _ = tasks.joint_loss(feats, labels[idx], torch.as_tensor(targets[idx], dtype=feats.dtype), head, cfg.lam)
        else:
            _, loss = tasks.classify_loss(feats, labels[idx], head)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite fine-tune loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        trace.append(float(loss.detach()))
    return head, trace


def predict(model: net.IQMAE, head, records: Sequence[IQRecord], pool="cls", capacity=600):
    feats = batched_features(model, [r.waveform for r in records], capacity, pool=pool)
    with torch.no_grad():
        out = head(feats)
    if isinstance(out, tuple):
        return out[0].argmax(1).numpy(), out[1].numpy()
    return out.argmax(1).numpy(), None


def probe_accuracy(
    model: net.IQMAE, train: Sequence[IQRecord], test: Sequence[IQRecord], num_classes: int,
    pool: str = "cls", steps: int = 500, seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Linear probe on frozen features; returns (test OA, confusion matrix)."""
    ytr = np.array([r.infer_class for r in train])
    yte = np.array([r.infer_class for r in test])
    ftr = batched_features(model, [r.waveform for r in train], pool=pool)
    fte = batched_features(model, [r.waveform for r in test], pool=pool)
    res = tasks.linear_probe(ftr, ytr, num_classes, steps=steps, seed=seed)
    with torch.no_grad():
        pred = res.head(fte).argmax(1).numpy()
    cm = metrics.confusion_matrix(yte, pred, num_classes)
    return metrics.overall_accuracy(cm), cm


# ---------------------------------------------------------------------------
# separation


@dataclass
class SeparateConfig:
    steps: int = 300
    batch_size: int = 16
    capacity: int = 528
    lr: float = 1e-3
    backbone_lr: float | None = None
    warmup_fraction: float = 0.1
    freeze_backbone: bool = False
    lam_z: float = 1e-4
    mode: str = "separated"
    widths: tuple = (4096, 2048, 1536, 1024)
    width_ratio: float | None = None  # None -> embed_dim / 768
    expansion: str = "query"
    seed: int = 0


def _interleave(x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
    out[..., 0::2] = x.real
    out[..., 1::2] = x.imag
    return out


def _normalized_refs(data: MixtureSet, idx) -> tuple[list[IQWaveform], np.ndarray, np.ndarray]:
    """Scale each mixture (and its references) by the mixture's peak component."""
    ws, refs, mixes = [], [], []
    for i in idx:
        m = data.mixtures[i]
        peak = max(np.abs(m.samples.real).max(), np.abs(m.samples.imag).max())
        ws.append(m)
        refs.append(_interleave(data.references[i] / peak))
        mixes.append(_interleave(m.samples / peak))
    return ws, np.stack(refs), np.stack(mixes)


def separation_estimates(model, head, waveforms, mixtures, capacity, grad: bool) -> tasks.SeparationEstimate:
    batch = make_batch(waveforms, capacity)
    with torch.set_grad_enabled(grad):
        lat = torch.stack(model.patch_latents(batch))
        return tasks.bss_forward(lat, head, torch.as_tensor(mixtures, dtype=lat.dtype))


def train_separator(
    model: net.IQMAE, data: MixtureSet, cfg: SeparateConfig, train_idx: Sequence[int] | None = None,
    log: Callable[[dict], None] | None = None,
) -> tuple[tasks.SeparationHead, list]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    length = data.mixtures[0].length
    ratio = cfg.width_ratio if cfg.width_ratio is not None else model.config.embed_dim / 768
    bott = tasks.BottleneckConfig(tuple(cfg.widths), source_count=data.references.shape[1]).scaled(ratio)
    n_patch = length // model.config.patch_size
    head = tasks.SeparationHead(model.config.embed_dim, n_patch, model.config.patch_size, bott, cfg.expansion)
    opt, sched = _optimizer(_param_groups(model, head, cfg), cfg)
    pool = np.arange(len(data.mixtures)) if train_idx is None else np.asarray(train_idx)
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(pool, size=min(cfg.batch_size, pool.size), replace=False)
        ws, refs, mixes = _normalized_refs(data, idx)
        model.train(not cfg.freeze_backbone)
        est = separation_estimates(model, head, ws, mixes, cfg.capacity, grad=True)
        loss, _ = tasks.separation_loss(
            est, torch.as_tensor(refs, dtype=est.waveforms.dtype), cfg.lam_z, cfg.mode,
            torch.as_tensor(mixes, dtype=est.waveforms.dtype),
        )
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite separation loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        trace.append(float(loss.detach()))
        if log is not None:
            log(dict(step=step, loss=trace[-1]))
    return head, trace


def evaluate_separator(model, head, data: MixtureSet, idx: Sequence[int], capacity=528) -> list[metrics.BssScore]:
    """BSS-Eval scores of every present source, estimates matched by best SDR."""
    model.eval()
    scores = []
    for k in range(0, len(idx), 16):
        chunk = list(idx[k : k + 16])
        ws, refs, mixes = _normalized_refs(data, chunk)
        est = separation_estimates(model, head, ws, mixes, capacity, grad=False).waveforms.numpy()
        for e, r in zip(est, refs):
            present = [x for x in r if np.any(x != 0)]
            s, _ = metrics.bss_eval_sources(list(e), present)
            scores.extend(s)
    return scores


def separate_waveforms(model, head, data: MixtureSet, idx: Sequence[int], capacity=528) -> np.ndarray:
    """(len(idx), K, length) complex estimates at the mixtures' original scale."""
    model.eval()
    out = []
    for k in range(0, len(idx), 16):
        chunk = list(idx[k : k + 16])
        ws, _, mixes = _normalized_refs(data, chunk)
        est = separation_estimates(model, head, ws, mixes, capacity, grad=False).complex()
        peaks = [max(np.abs(w.samples.real).max(), np.abs(w.samples.imag).max()) for w in ws]
        out.append(est * np.asarray(peaks)[:, None, None])
    return np.concatenate(out)
