"""Image quality metrics: PSNR, SSIM, RMSE, LPIPS, NIQE, LOE, plus report I/O.

Full-reference scores are computed in float64 on [0, 1] data. LPIPS runs on
a pluggable backbone; without calibrated weights it is flagged
"uncalibrated" in reports and is only comparable within one setup.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from .errors import ConfigError, ShapeError
from .imagedata import BT601
from .kernels import order_mismatch_count

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LOE_GRID = 50
LOE_SCALE = 1000.0
METRIC_COLUMNS = ("psnr", "ssim", "rmse", "lpips", "niqe", "loe")


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) or (C, H, W), got shape {x.shape}")
    return x


def _pair(y, ref):
    y, ref = _as_array(y), _as_array(ref)
    if y.shape != ref.shape:
        raise ShapeError(f"shape mismatch {y.shape} vs {ref.shape}")
    return y, ref


def mse(y, ref) -> float:
    y, ref = _pair(y, ref)
    return float(np.mean((y - ref) ** 2))


def psnr(y, ref) -> float:
    err = mse(y, ref)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def rmse(y, ref) -> float:
    return math.sqrt(mse(y, ref))


def _gray(x: np.ndarray) -> np.ndarray:
    if x.shape[1] == 1:
        return x[:, 0]
    if x.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {x.shape[1]}")
    return BT601[0] * x[:, 0] + BT601[1] * x[:, 1] + BT601[2] * x[:, 2]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(y, ref) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the luma images."""
    y, ref = _pair(y, ref)
    if min(y.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {y.shape[-2:]}")
    a = torch.from_numpy(_gray(y))[:, None]
    b = torch.from_numpy(_gray(ref))[:, None]
    win = torch.from_numpy(gaussian_window())[None, None]
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    def filt(t):
        return F.conv2d(t, win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# LPIPS


def lpips(y, ref, backbone=None, channel_weights=None) -> float:
    """Sum over backbone stages of the spatial mean of channel-weighted
    squared differences between unit-normalised features.

    ``channel_weights`` is a list with one non-negative vector per stage;
    all ones when omitted.
    """
    if backbone is None:
        backbone = default_backbone()
    y, ref = _pair(y, ref)
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        fy = [f.double() for f in backbone(torch.from_numpy(y).to(dtype))]
        fr = [f.double() for f in backbone(torch.from_numpy(ref).to(dtype))]
    if channel_weights is not None and len(channel_weights) != len(fy):
        raise ConfigError(f"{len(channel_weights)} weight vectors for {len(fy)} stages")
    total = 0.0
    for j, (a, b) in enumerate(zip(fy, fr)):
        a = a / (a.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        b = b / (b.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        d = (a - b) ** 2
        if channel_weights is not None:
            w = torch.as_tensor(np.asarray(channel_weights[j], dtype=np.float64)).view(1, -1, 1, 1)
            d = d * w
        total += float(d.sum(dim=1).mean())
    return total


def load_lpips_weights(path) -> list[np.ndarray]:
    """Per-stage channel weights from an ``.npz`` with arrays ``lin1``..``linN``."""
    with np.load(path) as data:
        out, j = [], 1
        while f"lin{j}" in data:
            w = np.asarray(data[f"lin{j}"], dtype=np.float64).reshape(-1)
            if (w < 0).any():
                raise ConfigError(f"{path}: lin{j} has negative weights")
            out.append(w)
            j += 1
    if not out:
        raise ConfigError(f"{path}: no lin weights found")
    return out


_DEFAULT_BACKBONE = None


def default_backbone():
    global _DEFAULT_BACKBONE
    if _DEFAULT_BACKBONE is None:
        from .losses import ConvStageExtractor
        _DEFAULT_BACKBONE = ConvStageExtractor().double()
    return _DEFAULT_BACKBONE


# ---------------------------------------------------------------------------
# NIQE

_ALPHAS = np.arange(0.2, 10.0, 0.001)
_GGD_RHO = gamma_fn(1 / _ALPHAS) * gamma_fn(3 / _ALPHAS) / gamma_fn(2 / _ALPHAS) ** 2
_NIQE_SIGMA = 7 / 6
_NIQE_TRUNCATE = 3 / _NIQE_SIGMA  # 7x7 window


@dataclass(frozen=True)
class NIQEModel:
    mu: np.ndarray
    cov: np.ndarray
    patch_size: int

    @classmethod
    def load(cls, path) -> "NIQEModel":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"NIQE model file not found: {path}")
        try:
            with np.load(path) as data:
                mu = np.asarray(data["mu"], dtype=np.float64).reshape(-1)
                cov = np.asarray(data["cov"], dtype=np.float64)
                patch = int(np.asarray(data["patch_size"]).item())
        except (KeyError, ValueError, OSError) as exc:
            raise ConfigError(f"invalid NIQE model {path}: {exc}") from exc
        if cov.shape != (mu.size, mu.size) or patch < 4 or patch % 2:
            raise ConfigError(f"invalid NIQE model {path}: mu {mu.shape}, cov {cov.shape}, patch {patch}")
        return cls(mu, cov, patch)

    def save(self, path) -> None:
        np.savez(path, mu=self.mu, cov=self.cov, patch_size=np.int64(self.patch_size))


def bundled_niqe_model_path() -> Path:
    return Path(str(resources.files("ultrabm") / "data" / "niqe_synthetic.npz"))


def _mscn(img: np.ndarray) -> np.ndarray:
    mu = ndimage.gaussian_filter(img, _NIQE_SIGMA, truncate=_NIQE_TRUNCATE, mode="nearest")
    var = ndimage.gaussian_filter(img * img, _NIQE_SIGMA, truncate=_NIQE_TRUNCATE, mode="nearest") - mu * mu
    return (img - mu) / (np.sqrt(np.abs(var)) + 1.0)


def _fit_ggd(x: np.ndarray):
    sigma_sq = np.mean(x * x)
    e_abs = np.mean(np.abs(x))
    rho = sigma_sq / max(e_abs ** 2, 1e-12)
    alpha = _ALPHAS[np.argmin(np.abs(rho - _GGD_RHO))]
    return alpha, sigma_sq


def _fit_aggd(x: np.ndarray):
    left, right = x[x < 0], x[x > 0]
    sl = math.sqrt(np.mean(left ** 2)) if left.size else 1e-6
    sr = math.sqrt(np.mean(right ** 2)) if right.size else 1e-6
    gamma_hat = sl / sr
    r_hat = np.mean(np.abs(x)) ** 2 / max(np.mean(x * x), 1e-12)
    rhat_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    alpha = _ALPHAS[np.argmin(np.abs(1 / _GGD_RHO - rhat_norm))]
    const = math.sqrt(gamma_fn(1 / alpha) / gamma_fn(3 / alpha))
    mean = (sr - sl) * (gamma_fn(2 / alpha) / gamma_fn(1 / alpha)) * const
    return alpha, mean, sl * sl, sr * sr


def _patch_features(patch: np.ndarray) -> list[float]:
    alpha, var = _fit_ggd(patch)
    feats = [alpha, var]
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        shifted = np.roll(patch, shift=(-dy, -dx), axis=(0, 1))
        feats.extend(_fit_aggd((patch * shifted).ravel()))
    return feats


def _downsample2(img: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(img)[None, None]
    h, w = img.shape
    return F.interpolate(t, size=(h // 2, w // 2), mode="bicubic", align_corners=False,
                         antialias=True)[0, 0].numpy()


def niqe_features(img, patch_size: int) -> np.ndarray:
    """Per-patch natural-scene-statistics features, shape (n_patches, 36)."""
    arr = _as_array(img)
    if arr.shape[0] != 1:
        raise ShapeError("NIQE scores one image at a time")
    gray = _gray(arr)[0] * 255.0
    h, w = gray.shape
    ph = h // patch_size
    pw = w // patch_size
    if ph * pw < 2:
        raise ValueError(f"image {h}x{w} yields fewer than 2 patches of size {patch_size}")
    gray = gray[:ph * patch_size, :pw * patch_size]
    scales = [(gray, patch_size), (_downsample2(gray), patch_size // 2)]
    per_scale = []
    for im, ps in scales:
        m = _mscn(im)
        rows = []
        for i in range(ph):
            for j in range(pw):
                rows.append(_patch_features(m[i * ps:(i + 1) * ps, j * ps:(j + 1) * ps]))
        per_scale.append(np.asarray(rows))
    return np.hstack(per_scale)


def niqe(y, model=None) -> float:
    """Distance between the image's patch-feature Gaussian and the pristine model."""
    if model is None:
        model = bundled_niqe_model_path()
    if not isinstance(model, NIQEModel):
        model = NIQEModel.load(model)
    feats = niqe_features(y, model.patch_size)
    if feats.shape[1] != model.mu.size:
        raise ConfigError(f"model has {model.mu.size} features, image gives {feats.shape[1]}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    d = model.mu - mu
    pooled = np.linalg.pinv((model.cov + cov) / 2)
    return float(math.sqrt(max(float(d @ pooled @ d), 0.0)))


# ---------------------------------------------------------------------------
# LOE


def lightness(x: np.ndarray) -> np.ndarray:
    return x.max(axis=1)


def _grid_index(n: int, g: int) -> np.ndarray:
    return np.floor((np.arange(g) + 0.5) * n / g).astype(np.int64)


def loe(y, x, grid: int = LOE_GRID) -> float:
    """Lightness order error of enhanced ``y`` against original ``x``, x1000.

    Both lightness maps (per-pixel RGB max) are point-sampled onto a common
    grid of at most ``grid`` x ``grid``; images may differ in resolution.
    """
    y, x = _as_array(y), _as_array(x)
    if y.shape[0] != 1 or x.shape[0] != 1:
        raise ShapeError("LOE scores one image at a time")
    ly, lx = lightness(y)[0], lightness(x)[0]
    gh = min(grid, lx.shape[0], ly.shape[0])
    gw = min(grid, lx.shape[1], ly.shape[1])

    def sample(lmap):
        return lmap[np.ix_(_grid_index(lmap.shape[0], gh), _grid_index(lmap.shape[1], gw))].ravel()

    sx, sy = sample(lx), sample(ly)
    n = sx.size
    return LOE_SCALE * order_mismatch_count(sx, sy) / (n * n)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    scale: int | None = None
    lpips_calibrated: bool = False

    def aggregates(self) -> dict:
        if not self.records:
            return {k: float("nan") for k in METRIC_COLUMNS}
        return {k: float(np.mean([r[k] for r in self.records])) for k in METRIC_COLUMNS}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("name",) + METRIC_COLUMNS)
            for r in self.records:
                writer.writerow([r["name"]] + [repr(float(r[k])) for k in METRIC_COLUMNS])

    def to_json(self, path) -> None:
        doc = {
            "scale": self.scale,
            "count": len(self.records),
            "lpips": "calibrated" if self.lpips_calibrated else "uncalibrated",
            "mean": self.aggregates(),
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return [{"name": row["name"], **{k: float(row[k]) for k in METRIC_COLUMNS}}
                    for row in csv.DictReader(fh)]


def score_image(y, ref, x, name: str = "", backbone=None, lpips_weights=None, niqe_model=None) -> dict:
    try:
        niqe_score = niqe(y, niqe_model)
    except ValueError:
        # too small for two NIQE patches
        niqe_score = float("nan")
    return {
        "name": name,
        "psnr": psnr(y, ref),
        "ssim": ssim(y, ref),
        "rmse": rmse(y, ref),
        "lpips": lpips(y, ref, backbone, lpips_weights),
        "niqe": niqe_score,
        "loe": loe(y, x),
    }
