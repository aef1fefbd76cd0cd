"""Illumination stream: local-contrast guidance, illumination U-Net, Retinex division."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

ILLUM_FLOOR = 1e-4
LEVELS = 5


class DecompositionResult(NamedTuple):
    u_ig: torch.Tensor
    u_nl: torch.Tensor
    v_nl: torch.Tensor


def neighborhood_diff(x: torch.Tensor) -> torch.Tensor:
    """``clamp(x + (x - mean3x3(x)), 0, 1)`` with reflect padding."""
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    if min(x.shape[-2:]) < 2:
        raise ShapeError("reflect padding needs H, W >= 2")
    local_mean = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, stride=1)
    return (2 * x - local_mean).clamp(0, 1)


def retinex_divide(x: torch.Tensor, u: torch.Tensor, floor: float = ILLUM_FLOOR) -> torch.Tensor:
    if x.shape != u.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(u.shape)}")
    return (x / u).clamp(0, 1 / floor)


def widths_for(base: int) -> list[int]:
    return [base * 2 ** k for k in range(LEVELS)]


class ContextUnit(nn.Module):
    """Conv3x3 -> GELU -> Conv3x3 -> GELU with an additive skip."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GELU(),
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.body(x) + self.skip(x)


class UNet(nn.Module):
    """Five-level U-Net of Context Units (max-pool down, bilinear up).

    ``forward`` returns the full-resolution decoder output and the list of
    decoder features ordered level 1 (full resolution) to level 5
    (bottleneck). ``modulate(k, feat)`` is applied to each decoder feature
    before it is passed on to the next (finer) decoding step; the returned
    list holds the modulated features.
    """

    def __init__(self, in_ch: int, widths: Sequence[int]):
        super().__init__()
        if len(widths) != LEVELS:
            raise ValueError(f"need {LEVELS} widths, got {len(widths)}")
        self.widths = list(widths)
        self.encoders = nn.ModuleList()
        prev = in_ch
        for w in widths:
            self.encoders.append(ContextUnit(prev, w))
            prev = w
        self.fuse = nn.ModuleList(
            nn.Conv2d(widths[k + 1] + widths[k], widths[k], 1) for k in range(LEVELS - 1)
        )
        self.decoders = nn.ModuleList(ContextUnit(widths[k], widths[k]) for k in range(LEVELS - 1))

    def forward(self, x, modulate: Callable[[int, torch.Tensor], torch.Tensor] | None = None):
        h, w = x.shape[-2:]
        step = 2 ** (LEVELS - 1)
        if h % step or w % step:
            raise ShapeError(f"spatial size {h}x{w} must be divisible by {step}")
        skips = []
        feat = x
        for k, enc in enumerate(self.encoders):
            if k:
                feat = F.max_pool2d(feat, 2)
            feat = enc(feat)
            skips.append(feat)

        feats = [None] * LEVELS
        cur = skips[-1]
        if modulate is not None:
            cur = modulate(LEVELS, cur)
        feats[-1] = cur
        for k in range(LEVELS - 2, -1, -1):
            up = F.interpolate(cur, scale_factor=2, mode="bilinear", align_corners=False)
            cur = self.decoders[k](self.fuse[k](torch.cat([up, skips[k]], dim=1)))
            if modulate is not None:
                cur = modulate(k + 1, cur)
            feats[k] = cur
        return cur, feats


class IlluminationNet(nn.Module):
    """Maps ``u_ig`` to an illumination map in ``[floor, 1]``."""

    def __init__(self, base: int = 16, floor: float = ILLUM_FLOOR):
        super().__init__()
        self.floor = floor
        self.unet = UNet(3, widths_for(base))
        self.head = nn.Conv2d(base, 3, 3, padding=1)

    def forward(self, u_ig):
        out, feats = self.unet(u_ig)
        u_nl = self.floor + (1 - self.floor) * torch.sigmoid(self.head(out))
        return u_nl, feats


class RetinexStage(nn.Module):
    def __init__(self, base: int = 16, floor: float = ILLUM_FLOOR):
        super().__init__()
        self.floor = floor
        self.illum = IlluminationNet(base, floor)

    def forward(self, x):
        """Returns ``(DecompositionResult, illumination decoder features)``."""
        u_ig = neighborhood_diff(x)
        u_nl, feats = self.illum(u_ig)
        v_nl = retinex_divide(x, u_nl, self.floor)
        return DecompositionResult(u_ig, u_nl, v_nl), feats


def illum_unet_forward(u_ig: torch.Tensor, net: IlluminationNet):
    return net(u_ig)
