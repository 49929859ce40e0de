"""Holdout latent error of the F2W mapper as training proceeds (toy stack).

Writes progression.csv and a strip of holdout reconstructions per logged step.

    python scripts/f2w_progression.py --out runs/f2w
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

import torch

from sketch2face.extractors import default_registry
from sketch2face.f2w import F2WConfig, build_pair_dataset, train_mapper
from sketch2face.generator import make_toy_generator
from sketch2face.imaging import SIGNED, save_png

STEPS = (0, 20, 50, 100, 200, 500, 1000)


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/f2w")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    gen = make_toy_generator()
    ds = build_pair_dataset(gen, default_registry().get("toy"), args.n, args.seed)
    train, holdout = ds.split(0.05)
    final = train_mapper(train, F2WConfig(epochs=STEPS[-1], max_steps=STEPS[-1], seed=args.seed),
                         holdout, eval_steps=STEPS)
    with open(out / "progression.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "holdout_latent_mse"])
        for step in STEPS:
            w.writerow([step, repr(final.holdout_curve[step])])
            print(f"step {step:5d}  holdout latent MSE {final.holdout_curve[step]:.4f}")

    # a seeded run stopped at step N follows the same trajectory as the full run
    models = [train_mapper(train, F2WConfig(epochs=s, max_steps=s, seed=args.seed)) for s in STEPS[1:-1]]
    with torch.no_grad():
        rows = [gen.synthesize(holdout.latents[:6])]
        rows += [gen.synthesize(m(holdout.features[:6])) for m in [*models, final]]
    strip = torch.cat([torch.cat(list(r), dim=2) for r in rows], dim=1)
    save_png(out / "progression.png", strip, SIGNED)
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
