"""Multi-substrate up-sampling head.

A stage builds features at 1x, 2x and 4x with parallel pixel-shuffle
substrates, exchanges information across the three scales (FSI), and merges
them at 2x. Two chained stages give 4x. When the head is given the image its
features came from, the bicubic upsample of that image is a global residual
in logit space, so a zero output conv reproduces plain bicubic upsampling.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

SCALES = (1, 2, 4)
SKFF_REDUCTION = 8
SKFF_MIN_CHANNELS = 4
RESIDUAL_EPS = 1e-3


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2 = {r * r}")
    out = x.reshape(b, c // (r * r), r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return out.reshape(b, c // (r * r), h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {r}")
    out = x.reshape(b, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4)
    return out.reshape(b, c * r * r, h // r, w // r)


def resample_rule(i: int, j: int) -> str:
    """Which resampling maps scale-``i`` features to output level ``j``."""
    if i == j:
        return "identity"
    if j > i:
        return "bilinear_up"
    return "strided_down"


def check_bundle(bundle) -> None:
    if len(bundle) != 3:
        raise ShapeError(f"bundle needs 3 members, got {len(bundle)}")
    b, c, h, w = bundle[0].shape
    for s, u in zip(SCALES, bundle):
        if tuple(u.shape) != (b, c, s * h, s * w):
            raise ShapeError(f"bundle member at {s}x has shape {tuple(u.shape)}, expected {(b, c, s * h, s * w)}")


class SKFF(nn.Module):
    """Selective kernel fusion: softmax over branches per channel."""

    def __init__(self, channels: int, branches: int = 3, reduction: int = SKFF_REDUCTION):
        super().__init__()
        hidden = max(channels // reduction, SKFF_MIN_CHANNELS)
        self.branches = branches
        self.squeeze = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.GELU())
        self.select = nn.ModuleList(nn.Conv2d(hidden, channels, 1) for _ in range(branches))

    def weights(self, feats):
        if len(feats) != self.branches:
            raise ShapeError(f"expected {self.branches} branches, got {len(feats)}")
        shape = feats[0].shape
        if any(f.shape != shape for f in feats):
            raise ShapeError("SKFF branches must share one shape")
        pooled = sum(feats).mean(dim=(2, 3), keepdim=True)
        z = self.squeeze(pooled)
        logits = torch.stack([sel(z) for sel in self.select], dim=1)
        return logits.softmax(dim=1)  # (B, branches, C, 1, 1)

    def forward(self, feats):
        w = self.weights(feats)
        return (torch.stack(feats, dim=1) * w).sum(dim=1)


def skff_fuse(branches, module: SKFF):
    return module(branches)


class Downsample(nn.Sequential):
    """Chain of stride-2 3x3 convs reducing resolution by ``factor``."""

    def __init__(self, channels: int, factor: int):
        layers = []
        while factor > 1:
            layers += [nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.GELU()]
            factor //= 2
        super().__init__(*layers)


class FSI(nn.Module):
    """Cross-scale exchange: each output level fuses all three inputs resampled to it."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = nn.ModuleDict()
        for i in SCALES:
            for j in SCALES:
                if resample_rule(i, j) == "strided_down":
                    self.down[f"{i}to{j}"] = Downsample(channels, i // j)
        self.fuse = nn.ModuleDict({str(j): SKFF(channels) for j in SCALES})

    def resample(self, u, i: int, j: int):
        rule = resample_rule(i, j)
        if rule == "identity":
            return u
        if rule == "bilinear_up":
            return F.interpolate(u, scale_factor=j // i, mode="bilinear", align_corners=False)
        return self.down[f"{i}to{j}"](u)

    def forward(self, bundle):
        check_bundle(bundle)
        return [self.fuse[str(j)]([self.resample(u, i, j) for i, u in zip(SCALES, bundle)])
                for j in SCALES]


def fsi_forward(bundle, module: FSI):
    return module(bundle)


class RSMUStage(nn.Module):
    """One 2x stage: substrates -> (FSI) -> merge at 2x."""

    def __init__(self, channels: int, fsi: bool = True):
        super().__init__()
        if channels % 16:
            raise ConfigError(f"RSMU needs channels divisible by 16, got {channels}")
        self.substrates = nn.ModuleList(nn.Conv2d(channels, channels * s * s, 3, padding=1) for s in SCALES)
        self.fsi = FSI(channels) if fsi else None
        self.down = Downsample(channels, 2)
        self.merge = SKFF(channels)

    def bundle(self, x):
        return [pixel_shuffle(conv(x), s) for s, conv in zip(SCALES, self.substrates)]

    def forward(self, x):
        u = self.bundle(x)
        if self.fsi is not None:
            u = self.fsi(u)
        up = F.interpolate(u[0], scale_factor=2, mode="bilinear", align_corners=False)
        return F.gelu(self.merge([up, u[1], self.down(u[2])]))


def bicubic_logit(image: torch.Tensor, scale: int) -> torch.Tensor:
    """Logit of the clamped bicubic upsample of ``image``."""
    up = F.interpolate(image, scale_factor=scale, mode="bicubic", align_corners=False)
    return torch.logit(up.clamp(RESIDUAL_EPS, 1 - RESIDUAL_EPS))


class RSMU(nn.Module):
    def __init__(self, channels: int, scale: int, fsi: bool = True):
        super().__init__()
        if scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {scale}")
        self.scale = scale
        self.stages = nn.ModuleList(RSMUStage(channels, fsi) for _ in range(scale // 2))
        self.out = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, x, image=None):
        feat = x
        for stage in self.stages:
            feat = stage(feat)
        logits = self.out(feat)
        if image is not None:
            if image.shape[0] != x.shape[0] or image.shape[-2:] != x.shape[-2:] or image.shape[1] != 3:
                raise ShapeError(f"residual image {tuple(image.shape)} does not match features {tuple(x.shape)}")
            logits = logits + bicubic_logit(image, self.scale)
        return torch.sigmoid(logits)


class BilinearHead(nn.Module):
    """Plain bilinear up-sampler used when RSMU is ablated."""

    def __init__(self, channels: int, scale: int):
        super().__init__()
        if scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {scale}")
        self.scale = scale
        self.out = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, x, image=None):
        # no substrates here, so the image residual is ignored by design
        up = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(up))


def rsmu_forward(x, target_scale: int, module: RSMU, image=None):
    if target_scale != module.scale:
        raise ConfigError(f"head built for {module.scale}x, asked for {target_scale}x")
    return module(x, image)
