"""IQ tokenizer and masked-autoencoder transformer over packed sequences.

A batch holds several packs padded to a common token count. Inside each pack
attention is restricted to tokens of the same record (block mask); padding
slots form their own block and never mix with real tokens.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import normalize_iq
from .errors import ConfigError, CorpusIOError, NumericError, ShapeError
from .masker import CLS, MASKED, SR, VISIBLE, MaskPlan, token_positions
from .packer import SPECIAL_TOKENS, PackedSequence
from .synth import IQWaveform

logger = logging.getLogger(__name__)

PAD = -1


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 768
    decoder_dim: int = 512
    encoder_layers: int = 12
    decoder_layers: int = 8
    heads: int = 12
    decoder_heads: int = 16
    mlp_ratio: float = 4.0
    max_tokens: int = 6000
    mask_ratio: float = 0.75
    pos_scale: float = 1024.0
    rate_offset: float = 6.0  # log10(Hz) centring for the sampling-rate token

    def validate(self) -> None:
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ConfigError("embedding widths must be divisible by their head counts")
        if self.embed_dim % 2 or self.decoder_dim % 2:
            raise ConfigError("embedding widths must be even for sinusoidal positions")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.patch_size < 1 or self.max_tokens < 3:
            raise ConfigError("invalid patch_size or max_tokens")

    @property
    def patch_dim(self) -> int:
        return 2 * self.patch_size


PRESETS = {
    "tiny": ModelConfig(embed_dim=32, decoder_dim=32, encoder_layers=2, decoder_layers=2, heads=4, decoder_heads=4),
    "small": ModelConfig(embed_dim=64, decoder_dim=64, encoder_layers=4, decoder_layers=2, heads=4, decoder_heads=4),
    "full": ModelConfig(),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = replace(PRESETS[name], **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# batching


@dataclass
class PackData:
    pack: PackedSequence
    patches: np.ndarray  # (T, 2 * patch_size), zero rows at special tokens
    log_rates: np.ndarray  # (R,)
    datasets: tuple = ()


def pack_data(
    pack: PackedSequence,
    waveforms: Sequence[IQWaveform],
    patch_size: int = 8,
    normalize: bool = True,
    datasets: Sequence[str] = (),
) -> PackData:
    """Cut each record into patches of ``patch_size`` complex samples (16 reals at size 8)."""
    if len(waveforms) != pack.num_records:
        raise ShapeError("one waveform per packed record")
    rows = []
    for (a, b), w in zip(pack.boundaries, waveforms):
        p = b - a - SPECIAL_TOKENS
        if w.length != p * patch_size:
            raise ShapeError(f"record of length {w.length} does not fill {p} patches of {patch_size}")
        x = normalize_iq(w).samples if normalize else w.samples
        rows.append(np.zeros((SPECIAL_TOKENS, 2 * patch_size)))
        rows.append(np.stack([x.real, x.imag], axis=1).reshape(p, 2 * patch_size))
    log_rates = np.log10([w.sample_rate_hz for w in waveforms])
    return PackData(pack, np.concatenate(rows), log_rates, tuple(datasets))


@dataclass
class Batch:
    patches: torch.Tensor  # (B, T, patch_dim)
    kind: torch.Tensor  # (B, T) SR / CLS / VISIBLE(=patch) / PAD
    log_rate: torch.Tensor  # (B, T) record log10 rate broadcast over its tokens
    pos: torch.Tensor  # (B, T) normalized coordinates
    blocks: torch.Tensor  # (B, T) record index inside the pack, PAD for padding
    record: torch.Tensor  # (B, T) global record index inside the batch, PAD for padding
    roles: torch.Tensor  # (B, T) from the mask plans
    vis_idx: torch.Tensor  # (B, V) token slot of each visible token; padding points at slot T
    vis_valid: torch.Tensor  # (B, V)
    num_records: int
    record_datasets: tuple

    @property
    def masked(self) -> torch.Tensor:
        return self.roles == MASKED


def collate(items: Sequence[PackData], plans: Sequence[MaskPlan], dtype=torch.float32) -> Batch:
    if len(items) != len(plans):
        raise ShapeError("one mask plan per pack")
    B = len(items)
    T = max(it.pack.total_tokens for it in items)
    pd = items[0].patches.shape[1]
    patches = np.zeros((B, T, pd))
    kind = np.full((B, T), PAD, dtype=np.int64)
    log_rate = np.zeros((B, T))
    pos = np.zeros((B, T))
    blocks = np.full((B, T), PAD, dtype=np.int64)
    record = np.full((B, T), PAD, dtype=np.int64)
    roles = np.full((B, T), PAD, dtype=np.int64)
    vis = []
    offset = 0
    datasets: list = []
    for b, (it, plan) in enumerate(zip(items, plans)):
        n = it.pack.total_tokens
        if plan.total_tokens != n:
            raise ShapeError("mask plan does not match its pack")
        counts = it.pack.token_counts
        blk = np.repeat(np.arange(len(counts)), counts)
        patches[b, :n] = it.patches
        starts = np.repeat([a for a, _ in it.pack.boundaries], counts)
        local = np.arange(n) - starts
        kind[b, :n] = np.select([local == 0, local == 1], [SR, CLS], VISIBLE)
        log_rate[b, :n] = it.log_rates[blk]
        pos[b, :n] = token_positions(it.pack)
        blocks[b, :n] = blk
        record[b, :n] = blk + offset
        roles[b, :n] = plan.roles
        vis.append(plan.visible_index)
        offset += len(counts)
        datasets.extend(it.datasets or [None] * len(counts))
    V = max(v.size for v in vis)
    vis_idx = np.full((B, V), T, dtype=np.int64)
    vis_valid = np.zeros((B, V), dtype=bool)
    for b, v in enumerate(vis):
        vis_idx[b, : v.size] = v
        vis_valid[b, : v.size] = True
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    i = lambda a: torch.as_tensor(a, dtype=torch.long)  # noqa: E731
    return Batch(
        patches=t(patches),
        kind=i(kind),
        log_rate=t(log_rate),
        pos=t(pos),
        blocks=i(blocks),
        record=i(record),
        roles=i(roles),
        vis_idx=i(vis_idx),
        vis_valid=torch.as_tensor(vis_valid),
        num_records=offset,
        record_datasets=tuple(datasets),
    )


# ---------------------------------------------------------------------------
# model


def sinusoid(pos: torch.Tensor, dim: int, scale: float) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=pos.dtype) / half)
    args = (pos * scale)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Attention(nn.Module):
    """Plain softmax attention; ``allowed`` is a (B, T, T) boolean mask.

    Keys carry no bias: softmax is invariant to it, so it would be a
    parameter with an identically zero gradient.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        q, k, v = F.linear(x, self.qkv.weight, bias).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(D // self.heads)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, allowed):
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.mlp(self.norm2(x))


def same_block(blocks: torch.Tensor) -> torch.Tensor:
    return blocks[:, :, None] == blocks[:, None, :]


@dataclass
class TokenStream:
    content: torch.Tensor  # (B, T, D) embeddings before positions
    pos_embed: torch.Tensor  # (B, T, D)
    batch: Batch

    @property
    def embeddings(self) -> torch.Tensor:
        return self.content + self.pos_embed


class IQMAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        D, Dd = config.embed_dim, config.decoder_dim
        self.patch_embed = nn.Linear(config.patch_dim, D)
        self.rate_embed = nn.Linear(1, D)
        self.cls_token = nn.Parameter(torch.zeros(D))
        self.encoder = nn.ModuleList(Block(D, config.heads, config.mlp_ratio) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(D)
        self.decoder_embed = nn.Linear(D, Dd)
        self.mask_token = nn.Parameter(torch.zeros(Dd))
        self.decoder = nn.ModuleList(
            Block(Dd, config.decoder_heads, config.mlp_ratio) for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(Dd)
        self.head = nn.Linear(Dd, config.patch_dim)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    # -- tokenizer ---------------------------------------------------------
    def tokenize(self, batch: Batch) -> TokenStream:
        cfg = self.config
        patch = self.patch_embed(batch.patches)
        rate = self.rate_embed((batch.log_rate - cfg.rate_offset)[..., None])
        kind = batch.kind[..., None]
        cls = self.cls_token.expand_as(patch)
        content = torch.where(kind == SR, rate, torch.where(kind == CLS, cls, patch))
        content = content.masked_fill(kind == PAD, 0.0)
        pos = sinusoid(batch.pos, cfg.embed_dim, cfg.pos_scale)
        return TokenStream(content, pos, batch)

    # -- encoder -----------------------------------------------------------
    def encode(self, stream: TokenStream) -> torch.Tensor:
        """Latents for the visible tokens, shape (B, V, D) aligned with ``batch.vis_idx``."""
        batch = stream.batch
        x = stream.embeddings
        x = torch.cat([x, x.new_zeros(x.shape[0], 1, x.shape[2])], dim=1)  # slot T for padding
        idx = batch.vis_idx
        xv = torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[2]))
        blocks = torch.cat([batch.blocks, batch.blocks.new_full((idx.shape[0], 1), PAD)], dim=1)
        bv = torch.gather(blocks, 1, idx).masked_fill(~batch.vis_valid, PAD)
        allowed = same_block(bv)
        for blk in self.encoder:
            xv = blk(xv, allowed)
        return self.encoder_norm(xv)

    # -- decoder -----------------------------------------------------------
    def decode(self, latents: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Predicted patches (N_masked, patch_dim) in row-major order of masked slots."""
        cfg = self.config
        B, T = batch.kind.shape
        y = self.decoder_embed(latents)
        full = self.mask_token.expand(B, T + 1, cfg.decoder_dim)
        full = full.scatter(1, batch.vis_idx[..., None].expand(-1, -1, cfg.decoder_dim), y)[:, :T]
        full = full + sinusoid(batch.pos, cfg.decoder_dim, cfg.pos_scale)
        allowed = same_block(batch.blocks)
        for blk in self.decoder:
            full = blk(full, allowed)
        full = self.decoder_norm(full)
        return self.head(full[batch.masked])

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.decode(self.encode(self.tokenize(batch)), batch)

    def targets(self, batch: Batch) -> torch.Tensor:
        return batch.patches[batch.masked]

    # -- downstream access ---------------------------------------------------
    def encode_all(self, batch: Batch) -> torch.Tensor:
        """Latents scattered back to every token slot, (B, T, D); masked slots are zero."""
        lat = self.encode(self.tokenize(batch))
        B, T = batch.kind.shape
        out = lat.new_zeros(B, T + 1, lat.shape[2])
        out = out.scatter(1, batch.vis_idx[..., None].expand(-1, -1, lat.shape[2]), lat)
        return out[:, :T]

    def record_features(self, batch: Batch, pool: str = "cls") -> torch.Tensor:
        """One feature row per record: the classification-token latent,
        optionally concatenated with the mean of visible patch latents."""
        lat = self.encode_all(batch)
        cls = lat[batch.kind == CLS]  # row-major == record order
        if pool == "cls":
            return cls
        if pool != "cls+mean":
            raise ConfigError(f"unknown pooling {pool!r}")
        sel = (batch.roles == VISIBLE)
        rec = batch.record[sel]
        sums = lat.new_zeros(batch.num_records, lat.shape[2]).index_add(0, rec, lat[sel])
        cnt = torch.bincount(rec, minlength=batch.num_records).clamp(min=1).to(lat.dtype)
        return torch.cat([cls, sums / cnt[:, None]], dim=1)

    def patch_latents(self, batch: Batch) -> list[torch.Tensor]:
        """Per-record (num_patch, D) latents; requires a fully visible plan."""
        lat = self.encode_all(batch)
        sel = batch.kind == VISIBLE
        rec = batch.record[sel]
        flat = lat[sel]
        return [flat[rec == r] for r in range(batch.num_records)]


def parameter_counts(model: nn.Module) -> dict[str, int]:
    groups = {"tokenizer": 0, "encoder": 0, "decoder": 0}
    for name, p in model.named_parameters():
        if name.startswith(("patch_embed", "rate_embed", "cls_token")):
            groups["tokenizer"] += p.numel()
        elif name.startswith("encoder"):
            groups["encoder"] += p.numel()
        else:
            groups["decoder"] += p.numel()
    groups["total"] = sum(groups.values())
    return groups


def config_parameter_counts(config: ModelConfig) -> dict[str, int]:
    """Parameter accounting without allocating weights."""
    with torch.device("meta"):
        return parameter_counts(IQMAE(config))


# ---------------------------------------------------------------------------
# objective and verification


def mae_loss(pred: torch.Tensor, target: torch.Tensor, record: torch.Tensor) -> torch.Tensor:
    """Masked-patch MSE averaged per record, then over records."""
    if pred.shape != target.shape:
        raise ShapeError("predictions and targets differ in shape")
    if pred.shape[0] == 0:
        raise ShapeError("no masked patches to score")
    per_patch = ((pred - target) ** 2).mean(dim=1)
    uniq, inv = torch.unique(record, return_inverse=True)
    sums = per_patch.new_zeros(uniq.numel()).index_add(0, inv, per_patch)
    counts = torch.bincount(inv, minlength=uniq.numel()).to(per_patch.dtype)
    return (sums / counts).mean()


def per_record_loss(model: IQMAE, batch: Batch) -> tuple[torch.Tensor, dict[int, float]]:
    pred = model(batch)
    target = model.targets(batch)
    rec = batch.record[batch.masked]
    loss = mae_loss(pred, target, rec)
    with torch.no_grad():
        per_patch = ((pred - target) ** 2).mean(dim=1)
        by_rec = {int(r): float(per_patch[rec == r].mean()) for r in torch.unique(rec)}
    return loss, by_rec


def grad_check(
    model: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    probes: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
    params: Sequence[tuple[str, nn.Parameter]] | None = None,
) -> tuple[float, list[dict]]:
    """Compare autograd gradients with central differences at random entries.

    Probes cycle over parameter tensors (so every tensor is visited) and pick
    a random element in each. Returns the maximum of
    |g_a - g_fd| / max(1e-12, |g_a| + |g_fd|) and per-probe details.
    """
    params = list(model.named_parameters() if params is None else params)
    params = [(n, p) for n, p in params if p.requires_grad]
    model.zero_grad(set_to_none=True)
    for _, p in params:  # may include head parameters outside ``model``
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(params))
    details = []
    worst = 0.0
    with torch.no_grad():
        for k in range(probes):
            name, p = params[order[k % len(params)]]
            flat = p.view(-1)
            j = int(rng.integers(flat.numel()))
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {name}[{j}]")
            fd = (up - down) / (2 * eps)
            ga = grads[name].view(-1)[j].item()
            rel = abs(ga - fd) / max(1e-12, abs(ga) + abs(fd))
            worst = max(worst, rel)
            details.append(dict(param=name, index=j, analytic=ga, numeric=fd, rel=rel))
    model.zero_grad(set_to_none=True)
    for _, p in params:
        p.grad = None
    return worst, details


# ---------------------------------------------------------------------------
# optimisation


def warmup_cosine(total_steps: int, warmup_fraction: float = 0.1) -> Callable[[int], float]:
    """Multiplier on the base rate: t/W during warmup, cosine to zero afterwards."""
    warm = max(1, int(round(total_steps * warmup_fraction)))

    def factor(t: int) -> float:
        if t < warm:
            return t / warm
        frac = (t - warm) / max(1, total_steps - warm)
        return 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))

    return factor


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    step: int = 0


def make_train_state(
    params, lr: float = 1e-4, total_steps: int = 1000, warmup_fraction: float = 0.1, weight_decay: float = 0.05
) -> TrainState:
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, betas=(0.9, 0.95))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(total_steps, warmup_fraction))
    return TrainState(opt, sched)


def current_lr(state: TrainState) -> float:
    return state.optimizer.param_groups[0]["lr"]


def pretrain_step(model: IQMAE, batch: Batch, state: TrainState) -> tuple[float, dict[str, float]]:
    """One AdamW update on the masked-reconstruction loss.

    Returns the loss and its per-dataset breakdown for sampler feedback.
    """
    model.train()
    loss, by_rec = per_record_loss(model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}: {loss.item()}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    per_ds: dict[str, list[float]] = {}
    for r, v in by_rec.items():
        per_ds.setdefault(str(batch.record_datasets[r]), []).append(v)
    return float(loss.item()), {k: float(np.mean(v)) for k, v in per_ds.items()}


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"IQCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIIQ")


def save_checkpoint(path, model: IQMAE, extra: dict | None = None, optimizer: torch.optim.Optimizer | None = None):
    """Versioned container: magic, version, crc32 and length of a torch payload."""
    buf = io.BytesIO()
    torch.save(
        {
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "extra": json.dumps(extra or {}),
        },
        buf,
    )
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, zlib.crc32(payload), len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> tuple[IQMAE, dict, dict | None]:
    try:
        with open(path, "rb") as fh:
            head = fh.read(_CKPT_HEAD.size)
            payload = fh.read()
    except OSError as exc:
        raise CorpusIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(head) != _CKPT_HEAD.size:
        raise CorpusIOError("truncated checkpoint")
    magic, version, crc, n = _CKPT_HEAD.unpack(head)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CorpusIOError(f"not an IQCK v{CKPT_VERSION} checkpoint: {path}")
    if len(payload) != n or zlib.crc32(payload) != crc:
        raise CorpusIOError("checkpoint checksum mismatch")
    blob = torch.load(io.BytesIO(payload), weights_only=False)
    model = IQMAE(ModelConfig(**blob["config"]))
    if next(iter(blob["state_dict"].values())).dtype == torch.float64:
        model.double()
    model.load_state_dict(blob["state_dict"])
    return model, json.loads(blob["extra"]), blob["optimizer"]


def state_hash(model: nn.Module) -> str:
    h = zlib.crc32(b"")
    for name, t in sorted(model.state_dict().items()):
        h = zlib.crc32(name.encode(), h)
        h = zlib.crc32(t.detach().cpu().contiguous().numpy().tobytes(), h)
    return f"{h:08x}"
