"""Full-scale reproduction run (needs user-supplied assets; not runnable at desk scale).

Expects a config whose ``paths`` point at a pretrained generator, an extractor
manifest with recognizer weights, a trained mapper and a trained faceness model,
plus a paired corpus (photos/<id>.png, sketches/<id>.png).

    python scripts/full_scale_eval.py --config full.yaml --corpus data/cufs --out runs/full
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from sketch2face.cli import main as cli
from sketch2face.pipeline import load_corpus, split_corpus


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--n-train", type=int, default=40)
    ap.add_argument("--split-seed", type=int, default=0)
    ap.add_argument("--ssim-target", type=float, default=0.655)
    ap.add_argument("--rank1-target", type=float, default=0.975)
    ap.add_argument("--tolerance", type=float, default=0.05)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    corpus = split_corpus(load_corpus(args.corpus), args.n_train, args.split_seed)
    synth, refs = out / "synth", out / "reference"
    synth.mkdir(parents=True, exist_ok=True)
    refs.mkdir(parents=True, exist_ok=True)
    times = []
    for rec in corpus.test:
        run_dir = out / "inversions" / rec.identity
        start = time.perf_counter()
        code = cli(["invert", "--config", args.config, "--sketch", str(rec.sketch), "--out", str(run_dir)])
        times.append(time.perf_counter() - start)
        if code:
            logging.error("inversion of %s failed with exit %d", rec.identity, code)
            continue
        (synth / f"{rec.identity}.png").write_bytes((run_dir / "final.png").read_bytes())
        (refs / f"{rec.identity}.png").write_bytes(rec.photo.read_bytes())

    code = cli(["evaluate", "--config", args.config, "--reference-dir", str(refs), "--synth-dir", str(synth),
                "--out", str(out / "eval")])
    if code:
        return code
    summary = json.loads((out / "eval" / "summary.json").read_text())
    ssim_mean, rank1 = summary["iqa_means"]["ssim"], summary["rank1"].get("vggface")
    ssim_ok = ssim_mean is not None and abs(ssim_mean - args.ssim_target) <= args.tolerance
    rank_ok = rank1 is not None and abs(rank1 - args.rank1_target) <= args.tolerance
    print(f"SSIM mean {ssim_mean} vs {args.ssim_target} +/- {args.tolerance}: {'PASS' if ssim_ok else 'FAIL'}")
    print(f"VGGFace rank-1 {rank1} vs {args.rank1_target} +/- {args.tolerance}: {'PASS' if rank_ok else 'FAIL'}")
    if times:
        print(f"per-image inversion wall time: mean {sum(times) / len(times) / 60:.1f} min")
    return 0 if ssim_ok and rank_ok else 4


if __name__ == "__main__":
    raise SystemExit(run())
