"""Loss-combination grid (columns d..j) on the toy stack.

Three toy extractors with different seeds play the three appearance
recognizers; the grid is written as ablation.csv plus one run directory per cell.

    python scripts/ablation_demo.py --out runs/ablation
"""
from __future__ import annotations

import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

import torch

from sketch2face.extractors import Extractor, default_registry, init_toy_extractor
from sketch2face.f2w import F2WConfig, build_pair_dataset, train_mapper
from sketch2face.generator import make_toy_generator, sample_noise
from sketch2face.imaging import SIGNED, UNIT, convert_range
from sketch2face.inversion import Bundle, InversionConfig
from sketch2face.manifold import HOGFDConfig, build_faceness_dataset, train_hogfd
from sketch2face.pipeline import loss_combos, run_ablation


def toy_bundle() -> Bundle:
    gen = make_toy_generator()
    reg = default_registry()
    base = reg.spec("toy")
    for eid, seed in (("toy_b", 11), ("toy_c", 12)):
        reg.add(Extractor(replace(base, extractor_id=eid), init_toy_extractor(seed)))
    train, _ = build_pair_dataset(gen, reg.get("toy"), 1000, 0).split(0.05)
    mapper = train_mapper(train, F2WConfig(epochs=1000, max_steps=1000))
    faces = build_faceness_dataset(gen, 256, 10**6, "smoothness")
    hogfd = train_hogfd(faces, HOGFDConfig(input_resolution=32, epochs=40, batch_size=32, lr=3e-3,
                                           oracle="smoothness"))
    return Bundle(gen, reg, mapper, hogfd)


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--n-sketches", type=int, default=3)
    ap.add_argument("--max-iterations", type=int, default=200)
    ap.add_argument("--rows", choices=["joint_18", "shared_1"], default="shared_1")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    bundle = toy_bundle()
    gen = bundle.generator
    sketches = []
    for i in range(args.n_sketches):
        with torch.no_grad():
            img = gen.synthesize(gen.map_noise(sample_noise(800_000 + i)))
        sketches.append((f"s{i}", convert_range(img, SIGNED, UNIT).mean(0, keepdim=True)))

    cfg = InversionConfig(max_iterations=args.max_iterations, optimize_rows=args.rows)
    report = run_ablation(sketches, bundle, loss_combos("toy", "toy_b", "toy_c"), cfg)
    report.write(args.out)
    with open(Path(args.out) / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'sketch':8} " + " ".join(f"{c:>9}" for c in report.combos))
    for name, _ in sketches:
        vals = {r["combo"]: r["final_total"] for r in rows if r["sketch"] == name}
        print(f"{name:8} " + " ".join(f"{float(vals[c]):9.4f}" for c in report.combos))
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
