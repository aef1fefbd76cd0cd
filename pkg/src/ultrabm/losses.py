"""Training objectives: luminance prior, illumination smoothness, L1 reconstruction, perceptual."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NATURAL_MEAN = (0.485, 0.456, 0.406)
NATURAL_STD = (0.229, 0.224, 0.225)
PERCEPTUAL_STAGE_WEIGHTS = (0.1, 0.1, 1.0, 1.0, 1.0)
EXTRACTOR_WIDTHS = (8, 16, 32, 32, 32)
EXTRACTOR_SEED = 1


@dataclass(frozen=True)
class NaturalStats:
    mu: tuple = NATURAL_MEAN
    sigma: tuple = NATURAL_STD


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 1.0
    l4: float = 1.2

    def __post_init__(self):
        for v in (self.l1, self.l2, self.l3, self.l4):
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weights must be finite and non-negative, got {v}")

    def as_tuple(self):
        return (self.l1, self.l2, self.l3, self.l4)


def luminance_loss(v: torch.Tensor, stats: NaturalStats = NaturalStats(), band: bool = False) -> torch.Tensor:
    """Mean over RGB of ``exp(|mean_c(v) - mu_c - sigma_c|) - 1``.

    ``band=True`` switches to ``exp(relu(|mean_c(v) - mu_c| - sigma_c)) - 1``,
    which is zero anywhere within one sigma of the natural mean.
    """
    if v.dim() != 4 or v.shape[1] != 3:
        raise ShapeError(f"luminance_loss needs (B, 3, H, W), got {tuple(v.shape)}")
    means = v.mean(dim=(0, 2, 3))
    mu = torch.tensor(stats.mu, dtype=v.dtype, device=v.device)
    sigma = torch.tensor(stats.sigma, dtype=v.dtype, device=v.device)
    if band:
        gap = F.relu((means - mu).abs() - sigma)
    else:
        gap = (means - mu - sigma).abs()
    return (torch.exp(gap) - 1).mean()


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax <= 1, 0.5 * x * x, ax - 0.5)


def illum_smooth_loss(u: torch.Tensor, gray: torch.Tensor) -> torch.Tensor:
    if u.dim() != 4 or gray.dim() != 4 or u.shape[-2:] != gray.shape[-2:] or u.shape[0] != gray.shape[0]:
        raise ShapeError(f"illum_smooth_loss shape mismatch {tuple(u.shape)} vs {tuple(gray.shape)}")
    if gray.shape[1] not in (1, u.shape[1]):
        raise ShapeError(f"gray must have 1 or {u.shape[1]} channels")
    return smooth_l1(u - gray).mean()


def recon_loss(y: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if y.shape != ref.shape:
        raise ShapeError(f"recon_loss shape mismatch {tuple(y.shape)} vs {tuple(ref.shape)}")
    return (y - ref).abs().mean()


class ConvStageExtractor(nn.Module):
    """Frozen VGG-style feature extractor with a configurable number of stages.

    Stage ``j`` is a run of 3x3 conv + ReLU layers; a 2x2 max-pool precedes
    every stage after the first (ceil mode, so tiny inputs bottom out at
    1x1 instead of vanishing). Inputs are standardised with the natural
    image statistics first, as VGG expects.

    The default instance has one conv per stage with seeded He-normal
    weights. ``from_file`` loads an ``.npz`` with arrays named
    ``stage{j}.conv{i}.weight`` / ``stage{j}.conv{i}.bias`` (j from 1,
    i from 1); VGG-19 maps onto stages of 2, 2, 4, 4, 4 convs, with each
    stage read after the ReLU of its last conv (conv1_2, conv2_2, conv3_4,
    conv4_4, conv5_4).
    """

    def __init__(self, stage_convs=None, normalize: bool = True):
        super().__init__()
        if stage_convs is None:
            stage_convs = _seeded_stages(EXTRACTOR_WIDTHS, EXTRACTOR_SEED)
        self.stages = nn.ModuleList(nn.ModuleList(convs) for convs in stage_convs)
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(NATURAL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(NATURAL_STD).view(1, 3, 1, 1), persistent=False)
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    @property
    def num_stages(self):
        return len(self.stages)

    @classmethod
    def from_file(cls, path, normalize: bool = True):
        path = Path(path)
        with np.load(path) as data:
            stages = []
            j = 1
            while f"stage{j}.conv1.weight" in data:
                convs = []
                i = 1
                while f"stage{j}.conv{i}.weight" in data:
                    w = torch.from_numpy(np.array(data[f"stage{j}.conv{i}.weight"], dtype=np.float32))
                    b = data.get(f"stage{j}.conv{i}.bias")
                    if w.dim() != 4:
                        raise ConfigError(f"{path}: stage{j}.conv{i}.weight must be rank 4")
                    conv = nn.Conv2d(w.shape[1], w.shape[0], w.shape[2], padding=w.shape[2] // 2)
                    with torch.no_grad():
                        conv.weight.copy_(w)
                        conv.bias.copy_(torch.zeros(w.shape[0]) if b is None else torch.from_numpy(np.array(b, dtype=np.float32)))
                    convs.append(conv)
                    i += 1
                stages.append(convs)
                j += 1
        if not stages:
            raise ConfigError(f"{path}: no stage weights found")
        return cls(stages, normalize=normalize)

    def forward(self, x):
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for j, convs in enumerate(self.stages):
            if j:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            for conv in convs:
                x = F.relu(conv(x))
            feats.append(x)
        return feats


def _seeded_stages(widths, seed):
    gen = torch.Generator().manual_seed(seed)
    stages, prev = [], 3
    for w in widths:
        conv = nn.Conv2d(prev, w, 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (prev * 9)))
            conv.bias.zero_()
        stages.append([conv])
        prev = w
    return stages


def perceptual_loss(y, ref, extractor, stage_weights=PERCEPTUAL_STAGE_WEIGHTS) -> torch.Tensor:
    """Sum over stages of ``w_j * mean|phi_j(y) - phi_j(ref)|``."""
    if y.shape != ref.shape:
        raise ShapeError(f"perceptual_loss shape mismatch {tuple(y.shape)} vs {tuple(ref.shape)}")
    fy, fr = extractor(y), extractor(ref)
    if len(fy) != len(stage_weights):
        raise ConfigError(f"extractor has {len(fy)} stages, weights cover {len(stage_weights)}")
    total = y.new_zeros(())
    for w, a, b in zip(stage_weights, fy, fr):
        total = total + w * (a - b).abs().mean()
    return total


def total_loss(components, weights: LossWeights = LossWeights()):
    """Weighted sum of (L_SL, L_IS, L_R, L_P); components may be floats or tensors."""
    if len(components) != 4:
        raise ValueError(f"need 4 loss components, got {len(components)}")
    total = 0.0
    for lam, value in zip(weights.as_tuple(), components):
        if lam:
            total = total + lam * value
    return total
