"""Illumination-semantic dual modulation of reflection decoder features.

Each decoder level runs two modulation units in sequence: the illumination
unit (IMU) re-weights reflection channels with a channel-attention map built
against illumination features, then the semantic unit (SMU) does the same
against features from a frozen semantic encoder.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .retinex import LEVELS

FFN_EXPANSION = 2.66
SEMANTIC_WIDTHS = (16, 32, 64, 64, 64)
SEMANTIC_SEED = 0


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map, per pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelAttention(nn.Module):
    """C x C attention map between two feature maps of equal shape.

    Both inputs go through LayerNorm and a depth-wise 3x3 conv, are
    flattened to (B, C, HW), and the map is
    ``softmax_rows(q @ k^T / sqrt(HW))``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm_q = ChannelLayerNorm(channels)
        self.norm_k = ChannelLayerNorm(channels)
        self.dw_q = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.dw_k = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"attention inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        bsz, c, h, w = a.shape
        q = self.dw_q(self.norm_q(a)).reshape(bsz, c, h * w)
        k = self.dw_k(self.norm_k(b)).reshape(bsz, c, h * w)
        logits = q @ k.transpose(1, 2) / math.sqrt(h * w)
        return logits.softmax(dim=-1)


class GatedFFN(nn.Module):
    """Gated depth-wise-conv feed-forward block; output projection starts at zero."""

    def __init__(self, channels: int, expansion: float = FFN_EXPANSION):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden * 2, 1)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.project_out.weight)
        nn.init.zeros_(self.project_out.bias)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class ModulationUnit(nn.Module):
    """``r + FFN(sigmoid(A @ value(r)))`` with ``A = attention(modulator, r)``."""

    def __init__(self, channels: int):
        super().__init__()
        self.attention = ChannelAttention(channels)
        self.value = nn.Conv2d(channels, channels, 1)
        self.ffn = GatedFFN(channels)

    def forward(self, modulator, r):
        if modulator.shape != r.shape:
            raise ShapeError(f"modulator {tuple(modulator.shape)} does not match features {tuple(r.shape)}")
        bsz, c, h, w = r.shape
        attn = self.attention(modulator, r)
        mixed = attn @ self.value(r).reshape(bsz, c, h * w)
        return r + self.ffn(torch.sigmoid(mixed.reshape(bsz, c, h, w)))


class ISDMLevel(nn.Module):
    """IMU then SMU at one decoder level; a disabled unit is the identity."""

    def __init__(self, channels: int, semantic_channels: int, imu: bool = True, smu: bool = True):
        super().__init__()
        self.imu = ModulationUnit(channels) if imu else None
        self.smu = ModulationUnit(channels) if smu else None
        self.semantic_proj = nn.Conv2d(semantic_channels, channels, 1) if smu else None

    def forward(self, i_f, r_f, s_f):
        out = r_f
        if self.imu is not None:
            out = self.imu(i_f, out)
        if self.smu is not None:
            out = self.smu(self.semantic_proj(s_f), out)
        return out


def imu_forward(i_f, r_f, unit: ModulationUnit):
    return unit(i_f, r_f)


def smu_forward(s_f, r_tilde, unit: ModulationUnit):
    return unit(s_f, r_tilde)


def channel_attention(a, b, module: ChannelAttention):
    return module(a, b)


# ---------------------------------------------------------------------------
# semantic features


class SemanticEncoder(nn.Module):
    """Small frozen CNN pyramid; level k sits at 1/2**(k-1) of input resolution.

    Weights are drawn from a private generator (seed 0 by default), so the
    encoder is identical across models regardless of the model seed.
    """

    def __init__(self, widths=SEMANTIC_WIDTHS, seed: int = SEMANTIC_SEED):
        super().__init__()
        self.widths = tuple(widths)
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = 3
        for k, w in enumerate(self.widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if k == 0 else 2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            self.stages.append(conv)
            prev = w
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        # always inference mode; nothing here is trainable
        return super().train(False)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


class PrecomputedSemantics:
    """Semantic pyramid read from an ``.npz`` file holding arrays ``s1``..``s5``.

    Each array is (B, C_k, H_k, W_k) or (C_k, H_k, W_k). Calling the object
    with the image returns the stored pyramid after checking it against the
    image's spatial size and the expected channel widths.
    """

    def __init__(self, path, widths=SEMANTIC_WIDTHS):
        self.path = Path(path)
        self.widths = tuple(widths)
        with np.load(self.path) as data:
            missing = [f"s{k}" for k in range(1, LEVELS + 1) if f"s{k}" not in data]
            if missing:
                raise ConfigError(f"{self.path}: missing arrays {missing}")
            levels = []
            for k in range(1, LEVELS + 1):
                arr = data[f"s{k}"]
                if arr.ndim == 3:
                    arr = arr[None]
                if arr.ndim != 4:
                    raise ConfigError(f"{self.path}: s{k} must be rank 3 or 4, got {arr.ndim}")
                levels.append(torch.from_numpy(np.array(arr, dtype=np.float32)))
        self.levels = levels

    def __call__(self, x):
        return check_pyramid(self.levels, x, self.widths)


def check_pyramid(levels, x, widths=SEMANTIC_WIDTHS):
    if len(levels) != LEVELS:
        raise ConfigError(f"semantic pyramid needs {LEVELS} levels, got {len(levels)}")
    bsz, _, h, w = x.shape
    for k, (feat, width) in enumerate(zip(levels, widths)):
        want = (bsz, width, h // 2 ** k, w // 2 ** k)
        if tuple(feat.shape) != want:
            raise ConfigError(f"semantic level s{k + 1} has shape {tuple(feat.shape)}, expected {want}")
    return [f.to(x.dtype) for f in levels]


def semantic_features(x, encoder) -> list[torch.Tensor]:
    with torch.no_grad():
        return encoder(x)


def save_semantic_features(levels, path) -> None:
    arrays = {f"s{k + 1}": f.detach().cpu().numpy() for k, f in enumerate(levels)}
    np.savez(path, **arrays)
