"""Command line entry point: ``ultrabm {gen-data,train,eval,infer,ablate}``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
Every command writes ``resolved_config.json`` into its output directory
before doing any work.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .errors import ConfigError, ImageFormatError, ManifestError, ShapeError, TrainingError
from .imagedata import (PairEntry, PairManifest, load_image, load_manifest, load_pairs, make_synthetic_pair,
                        save_image, save_manifest)
from .metrics import NIQEModel, bundled_niqe_model_path, load_lpips_weights
from .pipeline import (ABLATIONS, ModelConfig, OptimConfig, Stage, desk_schedule, evaluate, load_checkpoint,
                       load_model, full_schedule, predict, train)

log = logging.getLogger("ultrabm")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
ABLATION_VARIANTS = ("isdm", "rsmu", "l_sl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ablation_list(text: str) -> list[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ablation {', '.join(bad)}; valid names: {', '.join(ABLATIONS)}")
    return names


def _ev_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO..HI, got {text!r}") from None
    lo, hi = min(lo, hi), max(lo, hi)
    if lo < -5 or hi > 0:
        raise argparse.ArgumentTypeError("ev range must lie within -5..0")
    return lo, hi


def _write_resolved(out_dir: Path, doc: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    lo, hi = args.ev
    _write_resolved(out, {"command": "gen-data", "count": args.count, "scale": args.scale, "size": args.size,
                          "ev": [lo, hi], "seed": args.seed, "noise_sigma": args.noise})
    rng = np.random.default_rng(args.seed)
    (out / "low").mkdir(exist_ok=True)
    (out / "ref").mkdir(exist_ok=True)
    entries = []
    for i in range(args.count):
        ev = float(np.round(rng.uniform(lo, hi), 4))
        seed = int(rng.integers(2 ** 31))
        low, ref = make_synthetic_pair(seed, ev, args.scale, (args.size, args.size), noise_sigma=args.noise)
        name = f"pair{i:04d}.png"
        save_image(low, out / "low" / name)
        save_image(ref, out / "ref" / name)
        entries.append(PairEntry(out / "low" / name, out / "ref" / name, args.scale, ev))
    save_manifest(PairManifest(entries), out / "manifest.json")
    print(f"wrote {len(entries)} pairs to {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _resolve_training(args) -> dict:
    """defaults < --config file < flags."""
    doc = {"model": {}, "optim": {}, "profile": "desk", "iters": 2000, "schedule": None}
    sources = ["defaults"]
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        unknown = set(raw) - set(doc)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        for key in ("model", "optim"):
            doc[key].update(raw.get(key, {}))
        for key in ("profile", "iters", "schedule"):
            if key in raw:
                doc[key] = raw[key]
        sources.append(str(args.config))
    flags = {}
    for key in ("profile", "iters"):
        if getattr(args, key) is not None:
            doc[key] = flags[key] = getattr(args, key)
    for key in ("scale", "seed"):
        if getattr(args, key) is not None:
            doc["model"][key] = flags[key] = getattr(args, key)
    if args.lr is not None:
        doc["optim"]["lr"] = flags["lr"] = args.lr
    sources.append({"flags": flags})

    config = ModelConfig.from_dict(doc["model"])
    if args.ablate:
        config = config.ablate(*args.ablate)
    optim_raw = dict(doc["optim"])
    if "betas" in optim_raw:
        optim_raw["betas"] = tuple(optim_raw["betas"])
    try:
        optim = OptimConfig(**optim_raw)
    except TypeError as exc:
        raise ConfigError(f"bad optim config: {exc}") from exc
    if doc["schedule"]:
        schedule = [Stage(**st) for st in doc["schedule"]]
    elif doc["profile"] == "paper":
        schedule = full_schedule()
    elif doc["profile"] == "desk":
        schedule = desk_schedule(int(doc["iters"]))
    else:
        raise ConfigError(f"unknown profile {doc['profile']!r}")
    return {"config": config, "optim": optim, "schedule": schedule, "sources": sources}


def cmd_train(args) -> int:
    out = Path(args.out_dir)
    manifest = load_manifest(args.data)
    if args.resume:
        state = load_checkpoint(args.resume)
        resolved = {"config": state.config, "optim": state.optim, "schedule": state.schedule,
                    "sources": [f"resume:{args.resume}"]}
    else:
        state = None
        resolved = _resolve_training(args)
    _write_resolved(out, {
        "command": "train",
        "data": str(args.data),
        "model": resolved["config"].to_dict(),
        "optim": asdict(resolved["optim"]),
        "schedule": [asdict(st) for st in resolved["schedule"]],
        "resume": str(args.resume) if args.resume else None,
        "resume_iter": state.iteration if state is not None else 0,
        "resolution_order": resolved["sources"],
    })
    state, records = train(resolved["config"], resolved["schedule"], manifest, state=state,
                           optim=resolved["optim"], out_dir=out, checkpoint_every=args.checkpoint_every)
    last = records[-1]["total"] if records else float("nan")
    print(f"finished at iteration {state.iteration}; last total loss {last:.5f}; checkpoint {out / 'final.pt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / infer


def _mosaic(low: torch.Tensor, y: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    up = F.interpolate(low, size=ref.shape[-2:], mode="nearest")
    return torch.cat([up, y, ref], dim=-1).clamp(0, 1)


def cmd_eval(args) -> int:
    out = Path(args.out_dir)
    model = load_model(args.checkpoint)
    manifest = load_manifest(args.data)
    niqe_model = NIQEModel.load(args.niqe_model or bundled_niqe_model_path())
    lpips_weights = load_lpips_weights(args.lpips_weights) if args.lpips_weights else None
    _write_resolved(out, {"command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
                          "model": model.config.to_dict(), "grid": args.grid,
                          "niqe_model": str(args.niqe_model or bundled_niqe_model_path()),
                          "lpips_weights": str(args.lpips_weights) if args.lpips_weights else None})
    report, outputs = evaluate(model, manifest, niqe_model=niqe_model, lpips_weights=lpips_weights)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    if args.grid:
        grid_dir = out / "grid"
        grid_dir.mkdir(exist_ok=True)
        for entry, y, (low, ref) in zip(manifest, outputs, load_pairs(manifest)):
            save_image(_mosaic(low, y, ref), grid_dir / f"{entry.low.stem}.png")
    means = report.aggregates()
    print("  ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    if args.scale is not None and args.scale != model.config.scale:
        raise ConfigError(f"checkpoint is {model.config.scale}x, requested {args.scale}x")
    output = Path(args.output)
    _write_resolved(output.parent, {"command": "infer", "checkpoint": str(args.checkpoint),
                                    "input": str(args.input), "output": str(output),
                                    "model": model.config.to_dict()})
    x = load_image(args.input)
    y = predict(model, x)
    save_image(y, output, bit_depth=args.bit_depth)
    print(f"wrote {output} ({y.shape[-2]}x{y.shape[-1]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def run_ablation(manifest, iters: int, seed: int, scale: int, out_dir: Path | None = None,
                 variants=ABLATION_VARIANTS, lr: float | None = None) -> dict:
    """Train the full model and each single-component ablation on ``manifest``;
    return training-set PSNR per variant and the full-minus-variant gaps."""
    base = ModelConfig(scale=scale, seed=seed)
    optim = OptimConfig() if lr is None else OptimConfig(lr=lr)
    psnrs = {}
    for name in ("full",) + tuple(variants):
        config = base if name == "full" else base.ablate(name)
        run_dir = out_dir / name if out_dir is not None else None
        state, _ = train(config, desk_schedule(iters), manifest, optim=optim, out_dir=run_dir)
        report, _ = evaluate(state.model, manifest)
        psnrs[name] = report.aggregates()["psnr"]
        log.info("variant %s psnr %.4f", name, psnrs[name])
    gaps = {name: psnrs["full"] - psnrs[name] for name in variants}
    return {"psnr": psnrs, "gaps": gaps}


def cmd_ablate(args) -> int:
    out = Path(args.out_dir)
    manifest = load_manifest(args.data)
    scale = args.scale or manifest.scale
    _write_resolved(out, {"command": "ablate", "data": str(args.data), "iters": args.iters, "seed": args.seed,
                          "scale": scale, "variants": list(args.variants), "lr": args.lr})
    result = run_ablation(manifest, args.iters, args.seed, scale, out, args.variants, args.lr)
    (out / "ablation.json").write_text(json.dumps(result, indent=2) + "\n")
    for name, value in result["psnr"].items():
        gap = "" if name == "full" else f"  gap {result['gaps'][name]:+.4f} dB"
        print(f"{name:6s} psnr {value:.4f}{gap}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ultrabm", description="Low-light enhancement + super-resolution toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic low/ref PNG pairs and a manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--scale", type=int, choices=(2, 4), default=2)
    p.add_argument("--size", type=int, default=64, help="low-resolution side length")
    p.add_argument("--ev", type=_ev_range, default=(-5.0, -2.5), help="exposure range LO..HI in stops")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file with model/optim/profile/iters/schedule keys")
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--iters", type=int, help="total iterations of the desk profile")
    p.add_argument("--ablate", type=_ablation_list, default=[], metavar="NAMES",
                   help=f"comma-separated subset of {','.join(ABLATIONS)}")
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--grid", action="store_true", help="also write input/output/reference mosaics")
    p.add_argument("--niqe-model")
    p.add_argument("--lpips-weights")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="enhance a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train the full model and single-component ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--lr", type=float)
    p.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v], default=list(ABLATION_VARIANTS))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "variants", None):
        bad = [v for v in args.variants if v not in ABLATIONS]
        if bad:
            print(f"ultrabm: error: unknown variant {', '.join(bad)}; valid names: {', '.join(ABLATIONS)}",
                  file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ShapeError, ImageFormatError, FileNotFoundError) as exc:
        print(f"ultrabm: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError) as exc:
        print(f"ultrabm: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
