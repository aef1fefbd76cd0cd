"""Full network assembly, training loop, checkpoints and evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .errors import ConfigError, ManifestError, ShapeError, TrainingError
from .imagedata import PairManifest, load_pairs, rgb_to_gray
from .isdm import ISDMLevel, SemanticEncoder, check_pyramid
from .losses import (ConvStageExtractor, LossWeights, illum_smooth_loss, luminance_loss,
                     perceptual_loss, recon_loss, total_loss)
from .retinex import LEVELS, RetinexStage, UNet, widths_for
from .rsmu import RSMU, BilinearHead

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
SIZE_MULTIPLE = 2 ** (LEVELS - 1)
ABLATIONS = ("isdm", "imu", "smu", "rsmu", "fsi", "l_sl", "l_p")
LOG_COLUMNS = ("iter", "l_sl", "l_is", "l_r", "l_p", "total", "lr", "stage")


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    base_channels: int = 16
    levels: int = LEVELS
    isdm: bool = True
    imu: bool = True
    smu: bool = True
    rsmu: bool = True
    fsi: bool = True
    l_sl: bool = True
    l_p: bool = True
    lum_band: bool = False
    perceptual_weights: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ConfigError(f"levels is fixed at {LEVELS}, got {self.levels}")
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.base_channels < 1 or (self.rsmu and self.base_channels % 16):
            raise ConfigError(f"base_channels must be a positive multiple of 16, got {self.base_channels}")
        if not self.isdm and (self.imu or self.smu):
            raise ConfigError("imu/smu require isdm; ablate isdm together with both units")

    def ablate(self, *names: str) -> "ModelConfig":
        """Copy with the named components switched off (``isdm`` also drops IMU/SMU)."""
        changes = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
            changes[name] = False
            if name == "isdm":
                changes.update(imu=False, smu=False)
        cfg = replace(self, **changes)
        if not cfg.imu and not cfg.smu and cfg.isdm:
            cfg = replace(cfg, isdm=False)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class ModelOutput(NamedTuple):
    u_ig: torch.Tensor
    u_nl: torch.Tensor
    v_nl: torch.Tensor
    y: torch.Tensor


class UltraBM(nn.Module):
    """Retinex stage -> reflection U-Net with ISDM on every decoder level -> up-sampling head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        base = config.base_channels
        widths = widths_for(base)
        self.retinex = RetinexStage(base)
        self.refine = UNet(3, widths)
        self.semantic = SemanticEncoder() if config.smu else None
        if config.isdm:
            sem = self.semantic.widths if self.semantic is not None else (1,) * LEVELS
            self.isdm = nn.ModuleList(ISDMLevel(w, s, config.imu, config.smu) for w, s in zip(widths, sem))
        else:
            self.isdm = None
        self.head = RSMU(base, config.scale, config.fsi) if config.rsmu else BilinearHead(base, config.scale)

    def forward(self, x, semantics=None) -> ModelOutput:
        """``semantics`` optionally overrides the semantic pyramid (list of 5 maps)."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ShapeError(f"H and W must be divisible by {SIZE_MULTIPLE}, got {h}x{w}")
        decomposition, illum_feats = self.retinex(x)

        modulate = None
        if self.isdm is not None:
            sem = [None] * LEVELS
            if self.semantic is not None:
                if semantics is None:
                    with torch.no_grad():
                        sem = self.semantic(x)
                else:
                    sem = check_pyramid(semantics, x, self.semantic.widths)

            def modulate(k, r):
                return self.isdm[k - 1](illum_feats[k - 1], r, sem[k - 1])

        feat, _ = self.refine(decomposition.v_nl, modulate)
        # the head refines a bicubic upsample of the enhanced image, so the
        # reconstruction losses also reach the decomposition through this skip
        return ModelOutput(*decomposition, self.head(feat, decomposition.v_nl))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


# output projections that start at zero: FFN outputs (identity modulation),
# the illumination head (u = 0.5) and the image head (y = bicubic residual)
_ZERO_INIT = ("ffn.project_out", "retinex.illum.head", "head.out")
RESIDUAL_INIT_SCALE = 0.1


def _init_weights(model: UltraBM, seed: int) -> None:
    """He fan-in normal for convs, zero biases, zero output projections.

    The last conv of every Context Unit body is scaled down so stacked
    residual units do not blow up activations at initialisation.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in model.named_modules():
            if not isinstance(module, nn.Conv2d) or not module.weight.requires_grad:
                continue
            if name.endswith(_ZERO_INIT):
                nn.init.zeros_(module.weight)
            else:
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu",
                                        generator=gen)
                if name.endswith("body.2"):
                    module.weight.mul_(RESIDUAL_INIT_SCALE)
            if module.bias is not None:
                nn.init.zeros_(module.bias)


def build_model(config: ModelConfig) -> UltraBM:
    model = UltraBM(config)
    _init_weights(model, config.seed)
    log.info("built UltraBM with %d trainable parameters", count_parameters(model))
    return model


def predict(model: UltraBM, x: torch.Tensor) -> torch.Tensor:
    """Forward on arbitrary H, W: pad to a multiple of 16, crop the output back."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % SIZE_MULTIPLE, (-w) % SIZE_MULTIPLE
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    with torch.no_grad():
        y = model(x).y
    s = model.config.scale
    return y[..., : s * h, : s * w]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Stage:
    batch: int
    patch: int
    iters: int


FULL_BATCHES = (8, 5, 4, 2, 1, 1)
FULL_PATCHES = (32, 48, 64, 96, 128, 128)
FULL_ITERATIONS = 150_000


def full_schedule() -> list[Stage]:
    per = FULL_ITERATIONS // len(FULL_BATCHES)
    return [Stage(b, p, per) for b, p in zip(FULL_BATCHES, FULL_PATCHES)]


def desk_schedule(iters: int = 2000) -> list[Stage]:
    half = iters // 2
    return [Stage(4, 32, half), Stage(2, 32, iters - half)]


def schedule_stage(schedule, iteration: int) -> int:
    """Index of the stage that step ``iteration`` (0-based) belongs to."""
    edge = 0
    for idx, st in enumerate(schedule):
        edge += st.iters
        if iteration < edge:
            return idx
    return len(schedule) - 1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    min_lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4

    def lr_at(self, iteration: int, total: int) -> float:
        floor = min(self.min_lr, self.lr)
        if total <= 1:
            return self.lr
        t = min(iteration, total - 1) / (total - 1)
        return floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * t))


@dataclass
class TrainState:
    model: UltraBM
    optimizer: torch.optim.Optimizer
    schedule: list
    optim: OptimConfig = field(default_factory=OptimConfig)
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    extractor: nn.Module = field(default_factory=ConvStageExtractor)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def total_iters(self) -> int:
        return sum(st.iters for st in self.schedule)

    @property
    def stage(self) -> int:
        return schedule_stage(self.schedule, self.iteration)

    def loss_weights(self) -> LossWeights:
        cfg = self.config
        base = LossWeights()
        return replace(base, l1=base.l1 if cfg.l_sl else 0.0, l4=base.l4 if cfg.l_p else 0.0)


def make_extractor(config: ModelConfig) -> nn.Module:
    if config.perceptual_weights:
        return ConvStageExtractor.from_file(config.perceptual_weights)
    return ConvStageExtractor()


def init_state(config: ModelConfig, schedule=None, optim: OptimConfig | None = None) -> TrainState:
    model = build_model(config)
    optim = optim or OptimConfig()
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=optim.lr, betas=tuple(optim.betas),
                            weight_decay=optim.weight_decay, fused=True)
    return TrainState(model, opt, list(schedule or desk_schedule()), optim,
                      rng=np.random.default_rng(config.seed), extractor=make_extractor(config))


def compute_losses(state: TrainState, low, ref):
    out = state.model(low)
    comps = (
        luminance_loss(out.v_nl, band=state.config.lum_band),
        illum_smooth_loss(out.u_nl, rgb_to_gray(low)),
        recon_loss(out.y, ref),
        perceptual_loss(out.y, ref, state.extractor),
    )
    return comps, total_loss(comps, state.loss_weights()), out


def train_step(state: TrainState, batch):
    """One AdamW step on ``batch = (low, ref)``; returns the loss record."""
    low, ref = batch
    stage = state.stage
    lr = state.optim.lr_at(state.iteration, state.total_iters)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    comps, total, _ = compute_losses(state, low, ref)
    values = [float(c.detach()) for c in comps]
    record = dict(zip(("l_sl", "l_is", "l_r", "l_p"), values))
    if not torch.isfinite(torch.as_tensor(total)):
        raise TrainingError(f"non-finite loss at iteration {state.iteration + 1}: {record}", record)
    total.backward()
    state.optimizer.step()
    state.iteration += 1
    return {"iter": state.iteration, **record, "total": float(total.detach()), "lr": lr, "stage": stage}


def sample_batch(rng: np.random.Generator, pairs, batch: int, patch: int, scale: int):
    """Random crops (aligned across low/ref) with random flips."""
    lows, refs = [], []
    for _ in range(batch):
        low, ref = pairs[int(rng.integers(len(pairs)))]
        h, w = low.shape[-2:]
        ph = min(patch, h) // SIZE_MULTIPLE * SIZE_MULTIPLE
        pw = min(patch, w) // SIZE_MULTIPLE * SIZE_MULTIPLE
        if ph == 0 or pw == 0:
            raise ShapeError(f"training image {h}x{w} smaller than {SIZE_MULTIPLE}")
        top = int(rng.integers(h - ph + 1))
        left = int(rng.integers(w - pw + 1))
        lo = low[..., top:top + ph, left:left + pw]
        hi = ref[..., scale * top:scale * (top + ph), scale * left:scale * (left + pw)]
        if rng.random() < 0.5:
            lo, hi = lo.flip(-1), hi.flip(-1)
        if rng.random() < 0.5:
            lo, hi = lo.flip(-2), hi.flip(-2)
        lows.append(lo)
        refs.append(hi)
    return torch.cat(lows), torch.cat(refs)


def _as_pairs(data, scale):
    if isinstance(data, PairManifest):
        if len(data) == 0:
            raise ManifestError("manifest has no pairs")
        if data.scale != scale:
            raise ManifestError(f"manifest scale {data.scale} does not match model scale {scale}")
        return load_pairs(data)
    pairs = list(data)
    if not pairs:
        raise ManifestError("no training pairs")
    return pairs


def train(config: ModelConfig | None, schedule, data, *, state: TrainState | None = None,
          optim: OptimConfig | None = None, out_dir=None, checkpoint_every: int = 0,
          until: int | None = None):
    """Run the progressive schedule; resumes from ``state`` when given.

    ``data`` is a PairManifest or a sequence of (low, ref) tensor pairs.
    Returns ``(state, records)``. With ``out_dir`` the loss log is written to
    ``loss_log.csv`` and checkpoints to ``ckpt_<iter>.pt`` plus ``final.pt``.
    """
    if state is None:
        state = init_state(config, schedule, optim)
    pairs = _as_pairs(data, state.config.scale)
    stop = state.total_iters if until is None else min(until, state.total_iters)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        fresh = state.iteration == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    records = []
    try:
        while state.iteration < stop:
            st = state.schedule[state.stage]
            batch = sample_batch(state.rng, pairs, st.batch, st.patch, state.config.scale)
            rec = train_step(state, batch)
            records.append(rec)
            if writer is not None:
                writer.writerow([rec[k] if k in ("iter", "stage") else repr(rec[k]) for k in LOG_COLUMNS])
            if out is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{state.iteration:06d}.pt")
            if state.iteration % 100 == 0:
                log.info("iter %d total %.5f", state.iteration, rec["total"])
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "final.pt")
    return state, records


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    """Single-file checkpoint: versioned header plus parameter/moment tensors."""
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config_hash": state.config.digest(),
        "iter": state.iteration,
        "config": state.config.to_dict(),
        "schedule": [asdict(st) for st in state.schedule],
        "optim": asdict(state.optim),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": state.rng.bit_generator.state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {version}")
    config = ModelConfig.from_dict(payload["config"])
    if config.digest() != payload["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    optim = OptimConfig(**{**payload["optim"], "betas": tuple(payload["optim"]["betas"])})
    state = init_state(config, [Stage(**st) for st in payload["schedule"]], optim)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng"]
    state.iteration = int(payload["iter"])
    return state


def load_model(path) -> UltraBM:
    model = load_checkpoint(path).model
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: UltraBM, data, names=None, niqe_model=None, backbone=None, lpips_weights=None):
    """Run the model over ``data`` (manifest or (low, ref) pairs) and score every output."""
    scale = model.config.scale
    if isinstance(data, PairManifest):
        if data.scale is not None and data.scale != scale:
            raise ManifestError(f"manifest scale {data.scale} does not match model scale {scale}")
        names = names or [e.low.stem for e in data]
        pairs = load_pairs(data)
    else:
        pairs = list(data)
    names = names or [f"pair{i:04d}" for i in range(len(pairs))]
    model.eval()
    outputs = []
    for low, ref in pairs:
        y = predict(model, low)
        if y.shape != ref.shape:
            raise ManifestError(f"output {tuple(y.shape)} does not match reference {tuple(ref.shape)}")
        outputs.append(y)
    report = score_outputs(outputs, [r for _, r in pairs], [lo for lo, _ in pairs], names,
                           niqe_model=niqe_model, backbone=backbone, lpips_weights=lpips_weights)
    report.scale = scale
    return report, outputs


def score_outputs(outputs, refs, inputs, names=None, niqe_model=None, backbone=None, lpips_weights=None):
    names = names or [f"pair{i:04d}" for i in range(len(outputs))]
    records = [metrics.score_image(y, ref, x, name, backbone, lpips_weights, niqe_model)
               for y, ref, x, name in zip(outputs, refs, inputs, names)]
    return metrics.MetricReport(records, lpips_calibrated=lpips_weights is not None)
