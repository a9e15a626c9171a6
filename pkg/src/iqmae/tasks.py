"""Downstream heads and losses on top of the encoder."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import minmax_denormalize
from .errors import ConfigError, ShapeError
from .synth import from_components

# RadChar-style parameter ranges used for min-max normalization (n_p, t_pw, t_pri, t_d)
RADAR_RANGES = ((2.0, 6.0), (10.0, 16.0), (17.0, 23.0), (1.0, 10.0))
RADAR_PARAM_NAMES = ("n_p", "t_pw", "t_pri", "t_d")


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, features):
        return self.fc(features)


def classify_loss(features: torch.Tensor, labels, head: ClassifierHead) -> tuple[torch.Tensor, torch.Tensor]:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ConfigError(f"label outside [0, {head.num_classes})")
    logits = head(features)
    return logits, F.cross_entropy(logits, labels)


class JointHead(nn.Module):
    """Class logits plus a regression vector of normalized radar parameters.

    The regression branch is linear when ``reg_hidden`` is 0, otherwise one
    GELU hidden layer.
    """

    def __init__(self, in_dim: int, num_classes: int, num_targets: int = 4, reg_hidden: int = 0):
        super().__init__()
        self.cls = ClassifierHead(in_dim, num_classes)
        if reg_hidden:
            self.reg = nn.Sequential(nn.Linear(in_dim, reg_hidden), nn.GELU(), nn.Linear(reg_hidden, num_targets))
        else:
            self.reg = nn.Linear(in_dim, num_targets)

    def forward(self, features):
        return self.cls(features), self.reg(features)


def joint_loss(
    features: torch.Tensor, labels, reg_targets: torch.Tensor, head: JointHead, lam: float = 1.0
) -> tuple[torch.Tensor, dict]:
    """Cross-entropy plus ``lam`` times the mean absolute regression error."""
    logits, ce = classify_loss(features, labels, head.cls)
    reg = head.reg(features)
    if reg.shape != reg_targets.shape:
        raise ShapeError("regression outputs and targets differ in shape")
    mae = (reg - reg_targets).abs().mean()
    return ce + lam * mae, dict(logits=logits, regression=reg, ce=ce, mae=mae)


def denormalized_mae(pred_norm, target_norm, ranges=RADAR_RANGES) -> dict[str, float]:
    """Per-parameter MAE in physical units (microseconds for times)."""
    pred_norm, target_norm = np.asarray(pred_norm), np.asarray(target_norm)
    out = {}
    for k, ((lo, hi), name) in enumerate(zip(ranges, RADAR_PARAM_NAMES)):
        p = minmax_denormalize(pred_norm[:, k], lo, hi)
        t = minmax_denormalize(target_norm[:, k], lo, hi)
        out[name] = float(np.mean(np.abs(p - t)))
    return out


# ---------------------------------------------------------------------------
# separation / denoising


@dataclass(frozen=True)
class BottleneckConfig:
    widths: tuple = (4096, 2048, 1536, 1024)
    source_count: int = 2
    latent_width: int = 16

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"bottleneck widths must strictly decrease: {self.widths}")
        if self.source_count < 1:
            raise ConfigError("source_count must be >= 1")

    @property
    def latent_size(self) -> int:
        return self.latent_width * self.source_count

    def scaled(self, ratio: float) -> "BottleneckConfig":
        """Shrink widths by ``ratio`` (e.g. desk embed dim / 768), keeping them strictly decreasing."""
        widths = []
        for w in self.widths:
            v = max(int(round(w * ratio)), self.latent_size + len(self.widths))
            if widths and v >= widths[-1]:
                v = widths[-1] - 1
            widths.append(v)
        return BottleneckConfig(tuple(widths), self.source_count, self.latent_width)


class SeparationHead(nn.Module):
    """Patch latents -> decreasing widths -> 16*K latent -> K waveforms.

    The flattened (num_patch * D) encoder output is compressed to one 16-wide
    latent per source. Expansion back to a full-length waveform:

    ``"linear"``
        one linear map per source from its 16 numbers to the interleaved
        waveform;
    ``"query"``
        the source latent is projected to a query that scores every patch
        latent, giving a per-sample gate in (0, 1) that multiplies the
        mixture. The source's identity still passes through 16 numbers, while
        timing comes from the encoder's patch features.
    """

    def __init__(
        self, embed_dim: int, num_patch: int, patch_size: int, config: BottleneckConfig, expansion: str = "query",
        query_rank: int = 16,
    ):
        super().__init__()
        if expansion not in ("linear", "query"):
            raise ConfigError(f"unknown expansion {expansion!r}")
        self.config = config
        self.embed_dim = embed_dim
        self.num_patch = num_patch
        self.patch_size = patch_size
        self.length = num_patch * patch_size
        self.expansion = expansion
        self.query_rank = query_rank
        dims = (num_patch * embed_dim,) + tuple(config.widths)
        layers: list[nn.Module] = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers.append(nn.Linear(dims[-1], config.latent_size))
        self.compress = nn.Sequential(*layers)
        w = config.latent_width
        if expansion == "linear":
            self.expand = nn.ModuleList(nn.Linear(w, 2 * self.length) for _ in range(config.source_count))
        else:
            self.query = nn.ModuleList(nn.Linear(w, query_rank) for _ in range(config.source_count))
            self.keys = nn.Linear(embed_dim, patch_size * query_rank)
            self.gate_bias = nn.Parameter(torch.zeros(config.source_count))

    @property
    def in_dim(self) -> int:
        return self.num_patch * self.embed_dim

    def forward(self, patch_latents: torch.Tensor, mixture: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """``patch_latents`` is (N, num_patch, D); ``mixture`` is (N, 2 * length)
        interleaved I/Q and only used by the query expansion."""
        if patch_latents.shape[-2:] != (self.num_patch, self.embed_dim):
            raise ShapeError(
                f"expected ({self.num_patch}, {self.embed_dim}) patch latents, got {tuple(patch_latents.shape[-2:])}"
            )
        n = patch_latents.shape[0]
        z = self.compress(patch_latents.reshape(n, -1))
        w = self.config.latent_width
        slices = [z[..., k * w : (k + 1) * w] for k in range(self.config.source_count)]
        if self.expansion == "linear":
            return torch.stack([exp(s) for exp, s in zip(self.expand, slices)], dim=-2), z
        if mixture is None or mixture.shape != (n, 2 * self.length):
            raise ShapeError(f"query expansion needs an ({n}, {2 * self.length}) mixture")
        keys = self.keys(patch_latents).reshape(n, self.length, self.query_rank)
        q = torch.stack([proj(s) for proj, s in zip(self.query, slices)], dim=1)  # (N, K, r)
        logits = torch.einsum("nkr,ntr->nkt", q, keys) / math.sqrt(self.query_rank) + self.gate_bias[:, None]
        gate = torch.sigmoid(logits).repeat_interleave(2, dim=-1)
        return gate * mixture.unsqueeze(1), z


@dataclass
class SeparationEstimate:
    waveforms: torch.Tensor  # (N, K, 2 * length) interleaved I/Q
    latent: torch.Tensor  # (N, 16 * K)

    def complex(self) -> np.ndarray:
        x = self.waveforms.detach().cpu().numpy()
        return from_components(x[..., 0::2], x[..., 1::2])


def bss_forward(
    patch_latents: torch.Tensor, head: SeparationHead, mixture: torch.Tensor | None = None
) -> SeparationEstimate:
    """``patch_latents`` is (N, num_patch, D) from a fully visible encoding."""
    if patch_latents.dim() == 2:
        patch_latents = patch_latents[None]
        if mixture is not None and mixture.dim() == 1:
            mixture = mixture[None]
    est, z = head(patch_latents, mixture)
    return SeparationEstimate(est, z)


def pit_loss(estimates: torch.Tensor, references: torch.Tensor) -> tuple[torch.Tensor, list[tuple[int, ...]]]:
    """Minimum over source assignments of the mean per-source MSE.

    Inputs are (K, n) or (N, K, n); returns the batch mean and each item's
    assignment, where ``perm[k]`` is the reference matched to estimate k.
    """
    estimates = torch.as_tensor(estimates)
    references = torch.as_tensor(references, dtype=estimates.dtype)
    if estimates.shape != references.shape:
        raise ShapeError("estimates and references differ in shape")
    single = estimates.dim() == 2
    if single:
        estimates, references = estimates[None], references[None]
    K = estimates.shape[1]
    if K > 6:
        raise ConfigError(f"PIT over {K} sources needs {K}! permutations; limit is 6")
    perms = list(itertools.permutations(range(K)))
    # pairwise[n, i, j] = MSE(estimate i, reference j)
    pairwise = ((estimates[:, :, None, :] - references[:, None, :, :]) ** 2).mean(dim=-1)
    idx = torch.arange(K)
    costs = torch.stack([pairwise[:, idx, list(p)].mean(dim=1) for p in perms], dim=1)
    best, arg = costs.min(dim=1)
    return best.mean(), [perms[int(a)] for a in arg]


def latent_reg(z: torch.Tensor, lam_z: float) -> torch.Tensor:
    if lam_z < 0:
        raise ConfigError("lam_z must be >= 0")
    return lam_z * (z**2).mean()


def separation_loss(
    est: SeparationEstimate,
    references: torch.Tensor,
    lam_z: float = 1e-4,
    mode: str = "separated",
    mixture: torch.Tensor | None = None,
) -> tuple[torch.Tensor, list]:
    """PIT reconstruction of the separated channels, or reconstruction of the
    whole mixture from the channel sum (``mode="mixture"``), plus the latent penalty."""
    if mode == "separated":
        rec, perms = pit_loss(est.waveforms, references)
    elif mode == "mixture":
        if mixture is None:
            raise ConfigError("mixture mode needs the mixture target")
        rec = ((est.waveforms.sum(dim=1) - mixture) ** 2).mean()
        perms = []
    else:
        raise ConfigError(f"unknown separation loss mode {mode!r}")
    return rec + latent_reg(est.latent, lam_z), perms


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    head: ClassifierHead
    train_accuracy: float
    losses: list = field(default_factory=list)


def linear_probe(
    features: torch.Tensor,
    labels,
    num_classes: int,
    steps: int = 500,
    lr: float = 1e-2,
    weight_decay: float = 0.0,
    seed: int = 0,
    standardize: bool = True,
) -> ProbeResult:
    """Fit a linear classifier on frozen features (full-batch AdamW).

    Features are detached, so no gradient reaches the backbone.
    """
    g = torch.Generator().manual_seed(seed)
    x = features.detach()
    y = torch.as_tensor(labels, dtype=torch.long)
    head = ClassifierHead(x.shape[1], num_classes).to(x.dtype)
    with torch.no_grad():
        head.fc.weight.normal_(0, 0.01, generator=g)
        head.fc.bias.zero_()
    if standardize:
        mu, sd = x.mean(0), x.std(0).clamp(min=1e-6)
        head = _StandardizedHead(head, mu, sd)
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        _, loss = classify_loss(x, y, head)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    with torch.no_grad():
        acc = float((head(x).argmax(1) == y).double().mean())
    return ProbeResult(head, acc, losses)


class _StandardizedHead(ClassifierHead):
    def __init__(self, inner: ClassifierHead, mu, sd):
        nn.Module.__init__(self)
        self.inner = inner
        self.num_classes = inner.num_classes
        self.register_buffer("mu", mu)
        self.register_buffer("sd", sd)

    def forward(self, features):
        return self.inner((features - self.mu) / self.sd)
