"""Command-line entry point.

Every command resolves a :class:`RunConfig`, writes it to
``<run_dir>/config.ini`` and puts its outputs under ``checkpoints/``,
``logs/``, ``metrics/`` and ``artifacts/``. Exit status: 0 success, 2
configuration, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, net, tasks
from . import workflows as wf
from .config import RunConfig, load_config
from .corpus import IQRecord, SplitSpec, few_shot_select, partition, read_manifest, read_records, write_records
from .errors import ConfigError, CorpusIOError, IQMAEError
from .packer import pack_greedy, token_count, utilization_report
from .synth import IQWaveform

logger = logging.getLogger("iqmae")

COMMANDS = ("synth", "pack-stats", "pretrain", "finetune", "probe", "fewshot", "separate", "eval")
SUBDIRS = ("checkpoints", "logs", "metrics", "artifacts")


class Run:
    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.root = cfg.run_path
        try:
            for d in SUBDIRS:
                (self.root / d).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CorpusIOError(f"cannot create run directory {self.root}: {exc}") from exc
        cfg.write_snapshot(self.root / "config.ini")
        handler = logging.FileHandler(self.root / "logs" / f"{command}.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def write_metrics(self, name: str, values: dict) -> Path:
        """Tab-delimited ``key<TAB>value`` lines."""
        p = self.path("metrics", name)
        with open(p, "w") as fh:
            for k, v in values.items():
                fh.write(f"{k}\t{v:.6g}\n" if isinstance(v, float) else f"{k}\t{v}\n")
        return p

    def close(self):
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()


# ---------------------------------------------------------------------------
# data sources


def _labelled(cfg: RunConfig, split: str) -> list[IQRecord]:
    path = cfg.train_path if split == "train" else cfg.test_path
    if path:
        return read_records(path)
    n = cfg.records if split == "train" else cfg.test_records
    seed = cfg.seed * 2 + (0 if split == "train" else 1)
    if cfg.task == "radar":
        return wf.radar_task(n, seed=seed, snr_db=cfg.snr_values[0])
    if cfg.task == "modulation":
        return wf.modulation_task(n, seed=seed, snr_db=cfg.snr_values)
    raise ConfigError(f"task {cfg.task!r} has no class labels")


def _pretrain_records(cfg: RunConfig) -> list[IQRecord]:
    return read_records(cfg.train_path) if cfg.train_path else wf.pretrain_corpus(cfg.records, seed=cfg.seed)


def _num_classes(records) -> int:
    labels = [r.infer_class for r in records]
    if any(y is None for y in labels):
        raise ConfigError("records without infer_class in a classification corpus")
    return int(max(labels)) + 1


def _backbone(cfg: RunConfig, from_scratch: bool) -> net.IQMAE:
    if from_scratch or not cfg.init:
        if not from_scratch:
            raise ConfigError("this command needs --init <checkpoint> or --from-scratch")
        torch.manual_seed(cfg.seed)
        return net.IQMAE(net.preset(cfg.preset, mask_ratio=cfg.mask_ratio))
    if not Path(cfg.init).exists():
        raise ConfigError(f"checkpoint {cfg.init} does not exist")
    model, _, _ = net.load_checkpoint(cfg.init)
    return model.float()


def _mixtures(cfg: RunConfig) -> wf.MixtureSet:
    if cfg.train_path:
        if not cfg.references_path:
            raise ConfigError("a mixture corpus needs references_path")
        mixes = read_records(cfg.train_path)
        refs = read_records(cfg.references_path)
        if len(refs) != 2 * len(mixes):
            raise ConfigError("references must hold two records per mixture")
        arr = np.stack([np.stack([refs[2 * i].waveform.samples, refs[2 * i + 1].waveform.samples]) for i in range(len(mixes))])
        return wf.MixtureSet([r.waveform for r in mixes], arr, [(r.dataset_name,) for r in mixes])
    return wf.mixture_task(cfg.records + cfg.test_records, seed=cfg.seed, snr_db=cfg.snr_values[0])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    out = {}
    if cfg.task == "pretrain":
        m = write_records(_pretrain_records(cfg), run.path("artifacts", "corpus.emr1"))
        out["records"] = m.record_count
    elif cfg.task == "mixture":
        data = wf.mixture_task(cfg.records, seed=cfg.seed, snr_db=cfg.snr_values[0])
        write_records(
            (IQRecord(w, "mixture", transmission_id=i, snr_db=cfg.snr_values[0]) for i, w in enumerate(data.mixtures)),
            run.path("artifacts", "mixtures.emr1"),
        )
        fs = data.mixtures[0].sample_rate_hz
        refs = (
            IQRecord(IQWaveform(data.references[i, k], fs), "reference", transmission_id=i, infer_class=k)
            for i in range(len(data.mixtures))
            for k in range(data.references.shape[1])
        )
        write_records(refs, run.path("artifacts", "references.emr1"))
        out["records"] = len(data.mixtures)
    else:
        m = write_records(_labelled(cfg, "train"), run.path("artifacts", "corpus.emr1"))
        t = write_records(_labelled(cfg, "test"), run.path("artifacts", "test.emr1"))
        out["records"] = m.record_count
        out["test_records"] = t.record_count
    run.write_metrics("synth.txt", out)


def cmd_pack_stats(run: Run, args) -> None:
    cfg = run.cfg
    if cfg.train_path:
        manifest = read_manifest(cfg.train_path)
        lengths = [int(n) for n in manifest.columns["length"]]
    else:
        lengths = [r.length for r in _pretrain_records(cfg)]
    packs = pack_greedy(((i, token_count(n)) for i, n in enumerate(lengths)), cfg.capacity)
    rep = utilization_report(packs)
    with open(run.path("artifacts", "packs.txt"), "w") as fh:
        for p in packs:
            fh.write(" ".join(str(r) for r in p.record_ids) + "\n")
    run.write_metrics("pack_stats.txt", dict(records=len(lengths), packs=len(packs), **rep._asdict()))


def cmd_pretrain(run: Run, args) -> None:
    cfg = run.cfg
    records = _pretrain_records(cfg)
    if cfg.deterministic:
        net.set_deterministic(cfg.seed)
    pc = wf.PretrainConfig(
        preset=cfg.preset, steps=cfg.steps, packs_per_step=cfg.batch_size, capacity=cfg.capacity, lr=cfg.lr,
        warmup_fraction=cfg.warmup_fraction, mask_ratio=cfg.mask_ratio, seed=cfg.seed, workers=cfg.workers,
        deterministic=cfg.deterministic, weights=cfg.weight_map or None, policy=cfg.policy(),
        eval_every=cfg.eval_every,
    )
    model = _backbone(cfg, from_scratch=not cfg.init)
    with open(run.path("logs", "train.tsv"), "w") as fh:
        fh.write("step\tloss\tlr\n")

        def log(row):
            fh.write(f"{row['step']}\t{row['loss']:.9g}\t{row['lr']:.6g}\n")

        res = wf.pretrain(records, pc, model=model, log=log)
    net.save_checkpoint(run.path("checkpoints", "final.ckpt"), res.model, extra=dict(steps=cfg.steps))
    counts = net.parameter_counts(res.model)
    tail = res.losses[-50:]
    run.write_metrics(
        "pretrain.txt",
        dict(
            steps=len(res.losses), first_loss=res.losses[0], final_loss=res.losses[-1],
            mean_last_50=float(np.mean(tail)), seconds=res.seconds, **{f"params_{k}": v for k, v in counts.items()},
        ),
    )
    with open(run.path("logs", "weights.tsv"), "w") as fh:
        names = list(res.weight_trace[0]) if res.weight_trace else []
        fh.write("step\t" + "\t".join(names) + "\n")
        for s, w in enumerate(res.weight_trace):
            fh.write(f"{s}\t" + "\t".join(f"{w[n]:.6g}" for n in names) + "\n")


def _write_confusion(run: Run, cm: np.ndarray) -> None:
    np.savetxt(run.path("metrics", "confusion.csv"), cm, fmt="%d", delimiter=",")


def _classification_metrics(cm) -> dict:
    return dict(oa=metrics.overall_accuracy(cm), kappa=metrics.kappa(cm))


def cmd_finetune(run: Run, args) -> None:
    cfg = run.cfg
    train, test = _labelled(cfg, "train"), _labelled(cfg, "test")
    num_classes = _num_classes(train)
    model = _backbone(cfg, args.from_scratch)
    ft = wf.FinetuneConfig(
        steps=cfg.steps, batch_size=cfg.batch_size, capacity=cfg.capacity, lr=cfg.lr,
        warmup_fraction=cfg.warmup_fraction, freeze_backbone=cfg.freeze_backbone, pool=cfg.pool, lam=cfg.lam,
        seed=cfg.seed,
    )
    targets = wf.radar_targets(train) if cfg.task == "radar" else None
    ytr = np.array([r.infer_class for r in train])
    head, trace = wf.finetune_classifier(model, train, ytr, num_classes, ft, targets=targets)
    pred, reg = wf.predict(model, head, test, pool=cfg.pool, capacity=cfg.capacity)
    cm = metrics.confusion_matrix([r.infer_class for r in test], pred, num_classes)
    out = dict(final_train_loss=trace[-1], **_classification_metrics(cm))
    if reg is not None:
        out.update({f"mae_{k}": v for k, v in tasks.denormalized_mae(reg, wf.radar_targets(test)).items()})
    _write_confusion(run, cm)
    run.write_metrics("finetune.txt", out)
    net.save_checkpoint(run.path("checkpoints", "finetuned.ckpt"), model, extra=dict(task=cfg.task))
    torch.save(head.state_dict(), run.path("checkpoints", "head.pt"))


def cmd_probe(run: Run, args) -> None:
    cfg = run.cfg
    train, test = _labelled(cfg, "train"), _labelled(cfg, "test")
    model = _backbone(cfg, args.from_scratch)
    before = net.state_hash(model)
    oa, cm = wf.probe_accuracy(model, train, test, _num_classes(train), pool=cfg.pool, steps=cfg.steps, seed=cfg.seed)
    if net.state_hash(model) != before:
        raise IQMAEError("backbone changed during probing")
    _write_confusion(run, cm)
    run.write_metrics("probe.txt", dict(backbone_hash=before, **_classification_metrics(cm)))


def cmd_fewshot(run: Run, args) -> None:
    cfg = run.cfg
    path = cfg.train_path
    if not path:
        path = run.path("artifacts", "corpus.emr1")
        write_records(_labelled(cfg, "train"), path)
    manifest = read_manifest(path)
    train_ids, val_ids = partition(
        manifest, SplitSpec(cfg.train_fraction, cfg.seed, cfg.min_snr, stratify_by="infer_class")
    )
    classes = [manifest.column("infer_class")[i] for i in train_ids]
    snrs = [manifest.column("snr_db")[i] for i in train_ids]
    support = few_shot_select(train_ids, cfg.k, classes, snrs, seed=cfg.seed)
    with open(run.path("artifacts", "support.txt"), "w") as fh:
        fh.write("\n".join(str(i) for i in support) + "\n")
    out = dict(k=cfg.k, support=len(support), cells=len(support) // cfg.k, validation=len(val_ids))
    if cfg.fewshot_probe:
        model = _backbone(cfg, args.from_scratch)
        train, test = read_records(path, support), read_records(path, val_ids)
        num_classes = int(max(classes)) + 1
        oa, cm = wf.probe_accuracy(model, train, test, num_classes, pool=cfg.pool, steps=cfg.steps, seed=cfg.seed)
        _write_confusion(run, cm)
        out.update(_classification_metrics(cm))
    run.write_metrics("fewshot.txt", out)


def cmd_separate(run: Run, args) -> None:
    cfg = run.cfg
    data = _mixtures(cfg)
    n = len(data.mixtures)
    n_test = min(cfg.test_records, n // 2) if not cfg.train_path else max(1, n // 10)
    train_idx, test_idx = list(range(n - n_test)), list(range(n - n_test, n))
    model = _backbone(cfg, args.from_scratch)
    sc = wf.SeparateConfig(
        steps=cfg.steps, batch_size=cfg.batch_size, capacity=cfg.capacity, lr=cfg.lr,
        warmup_fraction=cfg.warmup_fraction, freeze_backbone=cfg.freeze_backbone, lam_z=cfg.lam_z,
        mode=cfg.separation_mode, expansion=cfg.expansion, seed=cfg.seed,
    )
    with open(run.path("logs", "separate.tsv"), "w") as fh:
        fh.write("step\tloss\n")
        head, _ = wf.train_separator(model, data, sc, train_idx, log=lambda r: fh.write(f"{r['step']}\t{r['loss']:.9g}\n"))
    scores = wf.evaluate_separator(model, head, data, test_idx, capacity=cfg.capacity)
    with open(run.path("metrics", "separation_scores.tsv"), "w") as fh:
        keys = list(scores[0].as_dict())
        fh.write("\t".join(keys) + "\n")
        for s in scores:
            fh.write("\t".join(f"{v:.6g}" for v in s.as_dict().values()) + "\n")
    summary = metrics.summarize(scores)
    init = "scratch" if args.from_scratch else cfg.init
    run.write_metrics("separation.txt", dict(init=init, frozen=cfg.freeze_backbone, sources=len(scores), **summary))
    est = wf.separate_waveforms(model, head, data, test_idx, capacity=cfg.capacity)
    fs = data.mixtures[0].sample_rate_hz
    write_records(
        (
            IQRecord(IQWaveform(est[j, k], fs), "separated", transmission_id=i, infer_class=k)
            for j, i in enumerate(test_idx)
            for k in range(est.shape[1])
        ),
        run.path("artifacts", "separated.emr1"),
    )


def cmd_eval(run: Run, args) -> None:
    """Masked-reconstruction loss of a checkpoint on a corpus, per dataset."""
    cfg = run.cfg
    model = _backbone(cfg, args.from_scratch)
    records = _pretrain_records(cfg)
    by_ds: dict[str, list[float]] = {}
    model.eval()
    with torch.no_grad():
        for k in range(0, len(records), 32):
            chunk = records[k : k + 32]
            batch = wf.make_batch(
                [r.waveform for r in chunk], cfg.capacity, model.config.patch_size, cfg.mask_ratio, seed=cfg.seed + k
            )
            _, per_rec = net.per_record_loss(model, batch)
            for r, v in per_rec.items():
                by_ds.setdefault(chunk[r].dataset_name, []).append(v)
    out = {f"loss_{n}": float(np.mean(v)) for n, v in sorted(by_ds.items())}
    out["loss_mean"] = float(np.mean([v for vs in by_ds.values() for v in vs]))
    run.write_metrics("eval.txt", out)


HANDLERS = {
    "synth": cmd_synth,
    "pack-stats": cmd_pack_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "separate": cmd_separate,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iqmae", description="IQ masked-autoencoder pretrain / fine-tune pipeline")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="INI run configuration")
    ap.add_argument("--run-dir")
    ap.add_argument("--preset")
    ap.add_argument("--task")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--deterministic", action="store_true", default=None)
    ap.add_argument("--k", type=int)
    ap.add_argument("--init", help="backbone checkpoint")
    ap.add_argument("--from-scratch", action="store_true", help="random-init backbone instead of a checkpoint")
    ap.add_argument("--freeze", action="store_true", default=None, help="freeze the backbone (linear-probe style)")
    ap.add_argument("--train", dest="train_path")
    ap.add_argument("--test", dest="test_path")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in ("run_dir", "preset", "task", "steps", "seed", "workers", "deterministic", "k", "init", "train_path", "test_path"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.freeze:
        overrides["freeze_backbone"] = True
    if args.init and args.from_scratch:
        raise ConfigError("--init and --from-scratch are mutually exclusive")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = None
    try:
        cfg = resolve(args)
        if cfg.deterministic:
            net.set_deterministic(cfg.seed)
        run = Run(cfg, args.command)
        HANDLERS[args.command](run, args)
    except IQMAEError as exc:
        print(f"iqmae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"iqmae {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"iqmae {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4
    finally:
        if run is not None:
            run.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
