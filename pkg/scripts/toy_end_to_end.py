"""Run the whole toy pipeline: assets, mapper, faceness model, inversion, evaluation.

    python scripts/toy_end_to_end.py --out runs/toy --n-sketches 6
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import torch

from sketch2face.cli import main as cli
from sketch2face.generator import load_generator, sample_noise
from sketch2face.imaging import SIGNED, save_png, tensor_to_hwc, to_gray


def write_toy_sketches(assets: Path, out: Path, n: int, seed: int) -> None:
    """Grayscale renders of held-out latents stand in for viewed sketches."""
    gen = load_generator(assets / "generator.safetensors", "toy")
    for i in range(n):
        with torch.no_grad():
            img = gen.synthesize(gen.map_noise(sample_noise(seed + i)))
        save_png(out / "sketches" / f"id{i:03d}.png", to_gray(tensor_to_hwc(img, SIGNED)))
        save_png(out / "photos" / f"id{i:03d}.png", tensor_to_hwc(img, SIGNED))


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--n-sketches", type=int, default=6)
    ap.add_argument("--sketch-seed", type=int, default=900_000)
    ap.add_argument("--max-iterations", type=int, default=300)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    assets, corpus = out / "assets", out / "corpus"
    if cli(["make-toy-assets", "--out", str(assets), "--with-models"]):
        return 1
    write_toy_sketches(assets, corpus, args.n_sketches, args.sketch_seed)
    cfg = ["--config", str(assets / "config.yaml")]

    synth = out / "synth"
    synth.mkdir(parents=True, exist_ok=True)
    for sketch in sorted((corpus / "sketches").glob("*.png")):
        run_dir = out / "inversions" / sketch.stem
        code = cli(["invert", *cfg, "--sketch", str(sketch), "--out", str(run_dir),
                    "--max-iterations", str(args.max_iterations)])
        if code:
            return code
        (synth / sketch.name).write_bytes((run_dir / "final.png").read_bytes())

    code = cli(["evaluate", *cfg, "--reference-dir", str(corpus / "photos"), "--synth-dir", str(synth),
                "--out", str(out / "eval"), "--recognizers", "toy", "--method", "toy inversion"])
    print(json.dumps(json.loads((out / "eval" / "summary.json").read_text()), indent=2))
    return code


if __name__ == "__main__":
    raise SystemExit(run())
