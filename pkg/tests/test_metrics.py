import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ultrabm import _kernels_py, kernels
from ultrabm.errors import ConfigError, ShapeError
from ultrabm.imagedata import load_image
from ultrabm.losses import ConvStageExtractor
from ultrabm.metrics import (METRIC_COLUMNS, PSNR_CAP, MetricReport, NIQEModel, bundled_niqe_model_path,
                             gaussian_window, load_lpips_weights, loe, lpips, niqe, niqe_features, psnr,
                             rmse, score_image, ssim)

PROBE = Path(__file__).parent / "data" / "niqe_probe.png"


def _rand(seed, shape=(1, 3, 16, 16)):
    return np.random.default_rng(seed).random(shape)


# --- PSNR / RMSE -------------------------------------------------------------

def test_psnr_cap_and_uniform_error():
    ref = _rand(0) * 0.8
    assert psnr(ref, ref) == PSNR_CAP == 100.0
    assert abs(psnr(ref + 0.1, ref) - 20.0) <= 1e-6
    assert psnr(ref + 1e-9, ref) == PSNR_CAP
    with pytest.raises(ShapeError):
        psnr(ref, ref[..., :3])


def test_psnr_rmse_match_loop_oracle():
    y, ref = _rand(1), _rand(2)
    sq = [(a - b) ** 2 for a, b in zip(y.ravel(), ref.ravel())]
    m = sum(sq) / len(sq)
    assert abs(psnr(y, ref) - 10 * math.log10(1 / m)) <= 1e-6
    assert abs(rmse(y, ref) - math.sqrt(m)) <= 1e-7
    assert psnr(y, ref) == psnr(ref, y)


def test_rmse_examples():
    ref = _rand(3) * 0.5
    assert rmse(ref, ref) == 0.0
    assert abs(rmse(ref + 0.1, ref) - 0.1) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_psnr_rmse_identity(seed):
    y, ref = _rand(seed), _rand(seed + 1)
    assert abs(psnr(y, ref) - 20 * math.log10(1 / rmse(y, ref))) <= 1e-6


def test_torch_and_numpy_inputs_agree():
    y, ref = _rand(4), _rand(5)
    assert psnr(torch.from_numpy(y).float(), torch.from_numpy(ref).float()) == pytest.approx(psnr(y, ref), abs=1e-4)


# --- SSIM --------------------------------------------------------------------

def _ssim_oracle(a, b):
    """Direct sliding-window SSIM on 2-D arrays (valid windows only)."""
    win = gaussian_window()
    k = win.shape[0]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            pa, pb = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_self_and_inverse():
    ref = _rand(6)
    assert ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)
    assert ssim(1 - ref, ref) < 1.0
    with pytest.raises(ValueError):
        ssim(_rand(0, (1, 3, 10, 10)), _rand(1, (1, 3, 10, 10)))


def test_ssim_checkerboard_oracle():
    yy, xx = np.mgrid[:16, :16]
    checker = ((yy + xx) % 2).astype(np.float64)
    flat = np.full((16, 16), 0.5)
    got = ssim(checker[None, None], flat[None, None])
    assert abs(got - _ssim_oracle(checker, flat)) <= 1e-5
    a, b = _rand(7, (14, 15)), _rand(8, (14, 15))
    assert abs(ssim(a[None, None], b[None, None]) - _ssim_oracle(a, b)) <= 1e-5
    assert ssim(a[None, None], b[None, None]) == pytest.approx(ssim(b[None, None], a[None, None]), abs=1e-12)


# --- LPIPS -------------------------------------------------------------------

def test_lpips_zero_symmetric_and_oracle():
    backbone = ConvStageExtractor().double()
    y, ref = _rand(9), _rand(10)
    assert lpips(ref, ref, backbone) == 0.0
    assert lpips(y, ref, backbone) == pytest.approx(lpips(ref, y, backbone), abs=1e-12)
    weights = [np.random.default_rng(j).random(c) for j, c in enumerate((8, 16, 32, 32, 32))]
    with torch.no_grad():
        fy = backbone(torch.from_numpy(y))
        fr = backbone(torch.from_numpy(ref))
    expect = 0.0
    for w, a, b in zip(weights, fy, fr):
        a, b = a[0].numpy(), b[0].numpy()
        a = a / (np.sqrt((a ** 2).sum(axis=0, keepdims=True)) + 1e-10)
        b = b / (np.sqrt((b ** 2).sum(axis=0, keepdims=True)) + 1e-10)
        expect += float(((a - b) ** 2 * w[:, None, None]).sum(axis=0).mean())
    assert lpips(y, ref, backbone, weights) == pytest.approx(expect, abs=1e-5)
    with pytest.raises(ConfigError):
        lpips(y, ref, backbone, weights[:2])


def test_lpips_weight_file(tmp_path):
    np.savez(tmp_path / "w.npz", lin1=np.ones(3), lin2=np.ones(4))
    assert [w.size for w in load_lpips_weights(tmp_path / "w.npz")] == [3, 4]
    np.savez(tmp_path / "neg.npz", lin1=-np.ones(3))
    with pytest.raises(ConfigError):
        load_lpips_weights(tmp_path / "neg.npz")
    np.savez(tmp_path / "none.npz", x=np.ones(3))
    with pytest.raises(ConfigError):
        load_lpips_weights(tmp_path / "none.npz")


# --- NIQE --------------------------------------------------------------------

def test_bundled_niqe_model_loads():
    model = NIQEModel.load(bundled_niqe_model_path())
    assert model.mu.shape == (36,)
    assert model.cov.shape == (36, 36)
    assert model.patch_size == 32


def test_niqe_deterministic_and_nonnegative():
    x = load_image(PROBE)
    assert niqe(x) == niqe(x)
    assert niqe(x) >= 0
    assert niqe_features(x, 32).shape == (16, 36)


def test_niqe_noise_increases_score():
    x = load_image(PROBE).double()
    gen = torch.Generator().manual_seed(0)
    noisy = (x + 0.1 * torch.randn(x.shape, generator=gen, dtype=torch.float64)).clamp(0, 1)
    assert niqe(noisy) > niqe(x)


def test_niqe_bad_model(tmp_path):
    x = load_image(PROBE)
    with pytest.raises(ConfigError):
        niqe(x, tmp_path / "missing.npz")
    np.savez(tmp_path / "bad.npz", mu=np.zeros(36))
    with pytest.raises(ConfigError):
        niqe(x, tmp_path / "bad.npz")
    NIQEModel(np.zeros(4), np.eye(4), 32).save(tmp_path / "small.npz")
    with pytest.raises(ConfigError):
        niqe(x, tmp_path / "small.npz")
    with pytest.raises(ValueError):
        niqe(_rand(0, (1, 3, 32, 32)))


# --- LOE ---------------------------------------------------------------------

def _loe_oracle(y, x):
    ly, lx = y.max(axis=0).ravel(), x.max(axis=0).ravel()
    n = lx.size
    bad = sum((lx[p] >= lx[q]) != (ly[p] >= ly[q]) for p in range(n) for q in range(n))
    return 1000.0 * bad / (n * n)


def test_loe_identity_and_gamma():
    x = _rand(11, (1, 3, 20, 20))
    assert loe(x, x) == 0.0
    assert loe(x ** 0.4, x) == 0.0
    assert loe(x ** 2.2, x) == 0.0


def test_loe_inversion_matches_pair_oracle():
    x = np.repeat(_rand(12, (1, 1, 12, 12)), 3, axis=1)  # gray, so max-RGB lightness flips too
    y = 1 - x
    expect = _loe_oracle(y[0], x[0])
    assert loe(y, x) == pytest.approx(expect, abs=1e-9)
    # without ties every off-diagonal pair flips, so only the diagonal agrees
    n = 144
    assert expect == pytest.approx(1000.0 * (n * n - n) / (n * n))


def test_loe_grid_resampling():
    # 100 -> 50 point sampling picks the odd rows and columns
    x = _rand(13, (1, 3, 100, 100))
    y = np.clip(x * 1.5, 0, 1)
    sub = x[:, :, 1::2, 1::2]
    assert loe(y, x) == loe(np.clip(sub * 1.5, 0, 1), sub)
    assert loe(_rand(14, (1, 3, 40, 40)), _rand(15, (1, 3, 20, 20))) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2 ** 31 - 1))
def test_kernel_backends_agree(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 5, n).astype(np.float64)
    b = rng.random(n)
    brute = sum((a[p] >= a[q]) != (b[p] >= b[q]) for p in range(n) for q in range(n))
    assert _kernels_py.order_mismatch_count(a, b) == brute
    assert kernels.order_mismatch_count(a, b) == brute


def test_kernel_rejects_bad_shapes():
    with pytest.raises(ValueError):
        kernels.order_mismatch_count(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        _kernels_py.order_mismatch_count(np.zeros(3), np.zeros(4))


# --- reports -----------------------------------------------------------------

def test_report_roundtrip(tmp_path):
    x = _rand(16, (1, 3, 32, 32)) * 0.3
    refs = [_rand(17 + k, (1, 3, 64, 64)) for k in range(2)]
    ys = [np.clip(r + 0.05, 0, 1) for r in refs]
    report = MetricReport(scale=2)
    report.records = [score_image(y, r, x, name=f"img{k}") for k, (y, r) in enumerate(zip(ys, refs))]
    for rec in report.records:
        assert set(METRIC_COLUMNS) <= set(rec)
    report.to_csv(tmp_path / "m.csv")
    report.to_json(tmp_path / "m.json")
    rows = MetricReport.read_csv(tmp_path / "m.csv")
    assert [r["name"] for r in rows] == ["img0", "img1"]
    for row, rec in zip(rows, report.records):
        for k in METRIC_COLUMNS:
            assert row[k] == rec[k] or (math.isnan(row[k]) and math.isnan(rec[k]))
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["lpips"] == "uncalibrated"
    assert doc["scale"] == 2 and doc["count"] == 2
    for k in METRIC_COLUMNS:
        mean = float(np.mean([r[k] for r in report.records]))
        assert doc["mean"][k] == pytest.approx(mean, abs=1e-12) or math.isnan(mean)


def test_small_image_records_nan_niqe():
    x = _rand(20, (1, 3, 16, 16))
    rec = score_image(x, x, x)
    assert math.isnan(rec["niqe"])
    assert rec["psnr"] == 100.0
