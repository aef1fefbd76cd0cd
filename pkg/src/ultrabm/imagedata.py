"""Image I/O, colour conversion, pair manifests and synthetic dark/bright pairs.

Images travel through the package as float32 torch tensors shaped
``(B, C, H, W)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .errors import ImageFormatError, ManifestError, ShapeError

BT601 = (0.299, 0.587, 0.114)
SYNTHETIC_NOISE_SIGMA = 0.01


def check_image(x: torch.Tensor, name: str = "image", unit_range: bool = True) -> None:
    if x.dim() != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be (B, C, H, W) with positive sizes, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if unit_range and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"{name} leaves the [0, 1] range")


# ---------------------------------------------------------------------------
# PNG I/O


def load_image(path, *, with_depth: bool = False):
    """Read an 8- or 16-bit RGB PNG into a ``(1, 3, H, W)`` tensor in [0, 1].

    With ``with_depth=True`` returns ``(tensor, bit_depth)``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"cannot decode {path} as PNG")
    if raw.ndim != 3 or raw.shape[2] != 3:
        channels = 1 if raw.ndim == 2 else raw.shape[2]
        raise ImageFormatError(f"{path}: expected RGB, got {channels} channel(s)")
    if raw.dtype == np.uint8:
        depth, peak = 8, 255.0
    elif raw.dtype == np.uint16:
        depth, peak = 16, 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    rgb = raw[:, :, ::-1].astype(np.float64) / peak
    tensor = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))).float()[None]
    if with_depth:
        return tensor, depth
    return tensor


def save_image(x: torch.Tensor, path, bit_depth: int = 8) -> None:
    """Write a single ``(1, 3, H, W)`` or ``(3, H, W)`` tensor as PNG."""
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ShapeError("save_image takes one image at a time")
        x = x[0]
    if x.dim() != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected a 3-channel image, got {tuple(x.shape)}")
    if bit_depth == 8:
        dtype, peak = np.uint8, 255.0
    elif bit_depth == 16:
        dtype, peak = np.uint16, 65535.0
    else:
        raise ImageFormatError(f"bit depth must be 8 or 16, got {bit_depth}")
    arr = x.detach().double().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    arr = np.rint(arr * peak).astype(dtype)[:, :, ::-1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr)):
        raise OSError(f"failed to write {path}")


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"rgb_to_gray needs (B, 3, H, W), got {tuple(x.shape)}")
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return BT601[0] * r + BT601[1] * g + BT601[2] * b


# ---------------------------------------------------------------------------
# synthetic pairs


def bicubic_downsample(x: torch.Tensor, scale: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % scale or w % scale:
        raise ShapeError(f"size {h}x{w} not divisible by scale {scale}")
    return F.interpolate(x, size=(h // scale, w // scale), mode="bicubic",
                         align_corners=False, antialias=True)


def _procedural_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, d = rng.uniform(-0.5, 0.5, size=3)
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[c] = 0.5 + a * xx + b * yy + 0.2 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase) + d * xx * yy

    # textured rectangles: stripes or checkers
    for _ in range(int(rng.integers(3, 7))):
        ph, pw = int(rng.integers(h // 8, h // 2 + 1)), int(rng.integers(w // 8, w // 2 + 1))
        top, left = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        py, px = np.mgrid[0:ph, 0:pw].astype(np.float64)
        period = rng.uniform(2.0, 8.0)
        if rng.random() < 0.5:
            angle = rng.uniform(0, np.pi)
            tex = 0.5 + 0.5 * np.sin(2 * np.pi * (px * np.cos(angle) + py * np.sin(angle)) / period)
        else:
            tex = ((np.floor(px / period) + np.floor(py / period)) % 2).astype(np.float64)
        colour = rng.uniform(0, 1, size=3)
        alpha = rng.uniform(0.4, 0.9)
        for c in range(3):
            patch = img[c, top:top + ph, left:left + pw]
            img[c, top:top + ph, left:left + pw] = (1 - alpha) * patch + alpha * colour[c] * tex

    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-12)


def make_synthetic_pair(seed: int, ev: float, scale: int, size: tuple[int, int],
                        noise_sigma: float = SYNTHETIC_NOISE_SIGMA):
    """Seeded (low, ref) pair; ``size`` is the low-resolution (H, W).

    ``ref`` is ``(1, 3, scale*H, scale*W)``; ``low`` is the bicubic
    downsample of ``ref`` darkened by ``2**ev`` plus Gaussian noise, clamped.
    """
    if not -5.0 <= ev <= 0.0:
        raise ValueError(f"ev must lie in [-5, 0], got {ev}")
    if scale not in (2, 4):
        raise ValueError(f"scale must be 2 or 4, got {scale}")
    h, w = size
    if h % (8 * scale) or w % (8 * scale) or h < 1 or w < 1:
        raise ShapeError(f"size {h}x{w} must be divisible by {8 * scale}")
    rng = np.random.default_rng(seed)
    ref_np = _procedural_image(rng, scale * h, scale * w)
    # round ref to its stored precision first so low is an exact function of it
    ref = torch.from_numpy(ref_np)[None].float().double()
    down = bicubic_downsample(ref, scale)
    low = down * (2.0 ** ev)
    if noise_sigma > 0:
        low = low + torch.from_numpy(rng.normal(0.0, noise_sigma, size=tuple(low.shape)))
    return low.clamp(0, 1).float(), ref.float()


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class PairEntry:
    low: Path
    ref: Path
    scale: int
    ev: float


@dataclass
class PairManifest:
    entries: list[PairEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def scale(self) -> int | None:
        return self.entries[0].scale if self.entries else None


_FIELDS = {"low": str, "ref": str, "scale": int, "ev": (int, float)}


def load_manifest(path) -> PairManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: top level must be a JSON array of pair objects")

    root = path.resolve().parent
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ManifestError(f"{path}: entry {i} is not an object")
        for key, kind in _FIELDS.items():
            if key not in item:
                raise ManifestError(f"{path}: entry {i} is missing field '{key}'")
            value = item[key]
            if isinstance(value, bool) or not isinstance(value, kind):
                raise ManifestError(f"{path}: entry {i} field '{key}' has wrong type {type(value).__name__}")
        if item["scale"] not in (1, 2, 4):
            raise ManifestError(f"{path}: entry {i} field 'scale' must be 1, 2 or 4")
        low, ref = root / item["low"], root / item["ref"]
        for p in (low, ref):
            if not p.is_file():
                raise ManifestError(f"{path}: entry {i} references missing file {p}")
        entries.append(PairEntry(low, ref, int(item["scale"]), float(item["ev"])))

    scales = {e.scale for e in entries}
    if len(scales) > 1:
        raise ManifestError(f"{path}: mixed scales {sorted(scales)} in one manifest")
    return PairManifest(entries, root)


def save_manifest(manifest: PairManifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent
    rows = [{"low": os.path.relpath(e.low, base), "ref": os.path.relpath(e.ref, base),
             "scale": e.scale, "ev": e.ev} for e in manifest.entries]
    path.write_text(json.dumps(rows, indent=2) + "\n")


def load_pairs(manifest: PairManifest) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(load_image(e.low), load_image(e.ref)) for e in manifest]
