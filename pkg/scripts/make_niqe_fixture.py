"""Fit the small NIQE pristine model shipped with the package.

Provenance: features are pooled over the references produced by the
synthetic pair generator (seeds 0..N-1, 128x128 at scale 2 of a 64x64 low
image, no darkening involved). The result is only meant for tests and
relative comparisons; it is not a substitute for a model fitted on real
pristine photographs.

Also writes ``tests/data/niqe_probe.png``, a held-out reference (seed 9999)
used by the noise-monotonicity test.

    python3 scripts/make_niqe_fixture.py [--count 48]
"""
import argparse
from pathlib import Path

import numpy as np

from ultrabm.imagedata import make_synthetic_pair, save_image
from ultrabm.metrics import NIQEModel, niqe_features

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=48)
    parser.add_argument("--patch", type=int, default=32)
    parser.add_argument("--out", type=Path, default=ROOT / "src" / "ultrabm" / "data" / "niqe_synthetic.npz")
    args = parser.parse_args()

    feats = []
    for seed in range(args.count):
        _, ref = make_synthetic_pair(seed, 0.0, 2, (64, 64), noise_sigma=0.0)
        feats.append(niqe_features(ref, args.patch))
    feats = np.vstack(feats)
    model = NIQEModel(feats.mean(axis=0), np.cov(feats, rowvar=False), args.patch)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"wrote {args.out} from {feats.shape[0]} patches")

    _, probe = make_synthetic_pair(9999, 0.0, 2, (64, 64), noise_sigma=0.0)
    save_image(probe, ROOT / "tests" / "data" / "niqe_probe.png")


if __name__ == "__main__":
    main()
