"""Command-line entry point: ``sketch2face <subcommand> ...``.

Exit status: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .config import Config, apply_overrides, load_config
from .errors import ConfigError, DatasetError, Sketch2FaceError, WeightsMissingError
from .extractors import TOY_EXTRACTOR_SEED, default_registry, registry_from_manifest, save_toy_extractor
from .f2w import MapperModel, PairDataset, build_pair_dataset, evaluate_mapper, train_mapper
from .generator import TOY_SEED, load_generator, save_toy_generator
from .imaging import load_image_tensor
from .inversion import Bundle, LossTermSpec, invert_sketch
from .manifold import HOGFDModel, ScoredImageDataset, build_faceness_dataset, train_hogfd
from .metrics import IQAReport, rank1_accuracy
from .pipeline import RunManifest, load_corpus, loss_combos, run_ablation, split_corpus

log = logging.getLogger("sketch2face")

SUBCOMMANDS = ("prepare-f2w-data", "train-f2w", "prepare-faceness-data", "train-hogfd",
               "invert", "ablate", "evaluate", "make-toy-assets")


class UsageError(Exception):
    pass


_argv: list[str] = []


def _manifest(*args, **kwargs) -> RunManifest:
    return RunManifest(*args, argv=list(_argv), **kwargs)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- loading helpers ----------------------------------------------------------

def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _require(cfg: Config, key: str, override: str | None = None) -> Path:
    p = Path(override) if override else cfg.resolve(getattr(cfg.paths, key))
    if p is None:
        raise ConfigError(f"paths.{key} is not configured")
    return p


def _generator(cfg: Config):
    return load_generator(_require(cfg, "generator"), cfg.paths.generator_kind)


def _registry(cfg: Config):
    manifest = cfg.resolve(cfg.paths.extractor_manifest)
    return registry_from_manifest(manifest) if manifest else default_registry()


def _bundle(cfg: Config, mapper: str | None = None, hogfd: str | None = None,
            need_hogfd: bool = True) -> Bundle:
    hog = None
    if need_hogfd:
        hog = HOGFDModel.load(_require(cfg, "hogfd", hogfd))
    return Bundle(
        generator=_generator(cfg),
        extractors=_registry(cfg),
        mapper=MapperModel.load(_require(cfg, "mapper", mapper)),
        hogfd=hog,
    )


def _needs_manifold(terms) -> bool:
    return any(t.kind == "manifold" and t.weight != 0 for t in terms)


def _inversion_cfg(cfg: Config, args):
    inv = cfg.inversion
    if getattr(args, "terms", None):
        inv = replace(inv, terms=[LossTermSpec.parse(t) for t in args.terms])
    if getattr(args, "max_iterations", None):
        inv = replace(inv, max_iterations=args.max_iterations)
    if getattr(args, "seed", None) is not None:
        inv = replace(inv, seed=args.seed)
    inv.validate()
    return inv


def _load_sketch(path: str) -> torch.Tensor:
    if not Path(path).exists():
        raise DatasetError(f"sketch not found: {path}")
    return load_image_tensor(path)


# -- subcommands --------------------------------------------------------------

def cmd_make_toy_assets(args) -> RunManifest:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_toy_generator(out / "generator.safetensors", args.seed)
    save_toy_extractor(out / "toy_extractor.safetensors", TOY_EXTRACTOR_SEED)
    (out / "extractors.yaml").write_text("toy:\n  weights: toy_extractor.safetensors\n")
    cfg = Config()
    cfg.paths = replace(cfg.paths, generator="generator.safetensors", generator_kind="toy",
                        extractor_manifest="extractors.yaml", init_extractor="toy",
                        mapper="f2w.safetensors", hogfd="hogfd.safetensors")
    cfg.f2w = replace(cfg.f2w, dataset_size=1000, epochs=1000, max_steps=1000, hidden=128)
    cfg.hogfd = replace(cfg.hogfd, input_resolution=32, dataset_size=256, epochs=40, batch_size=32,
                        lr=3e-3, oracle="smoothness")
    cfg.inversion = replace(cfg.inversion, terms=[LossTermSpec.parse("app:toy"), LossTermSpec.parse("manifold")],
                            optimize_rows="shared_1", max_iterations=300, snapshot_every=50)
    cfg.dump(out / "config.yaml")
    manifest = _manifest("make-toy-assets", cfg.to_dict(), seeds={"generator": args.seed,
                                                                     "extractor": TOY_EXTRACTOR_SEED})
    if args.with_models:
        cfg = load_config(out / "config.yaml")
        gen, reg = _generator(cfg), _registry(cfg)
        ds = build_pair_dataset(gen, reg.get("toy"), cfg.f2w.dataset_size, cfg.f2w.seed)
        train, _ = ds.split(cfg.f2w.holdout_fraction)
        train_mapper(train, cfg.f2w).save(out / "f2w.safetensors")
        scored = build_faceness_dataset(gen, cfg.hogfd.dataset_size, cfg.hogfd.seed + 10**6, "smoothness")
        train_hogfd(scored, cfg.hogfd).save(out / "hogfd.safetensors")
    manifest.checkpoints = {"generator": f"toy-seed{args.seed}"}
    manifest.write(out / "run_manifest.json")
    return manifest


def cmd_prepare_f2w_data(args):
    cfg = _config(args)
    gen, reg = _generator(cfg), _registry(cfg)
    extractor_id = args.extractor or cfg.paths.init_extractor
    n = args.n or cfg.f2w.dataset_size
    seed = cfg.f2w.seed if args.seed is None else args.seed
    ds = build_pair_dataset(gen, reg.get(extractor_id), n, seed)
    ds.save(args.out)
    m = _manifest("prepare-f2w-data", cfg.to_dict(), {"generator": gen.checkpoint_id}, {"dataset": seed})
    m.write(Path(args.out) / "run_manifest.json")


def cmd_train_f2w(args):
    cfg = _config(args)
    hyper = cfg.f2w
    if args.epochs is not None:
        hyper = replace(hyper, epochs=args.epochs)
    if args.max_steps is not None:
        hyper = replace(hyper, max_steps=args.max_steps)
    ds = PairDataset.load(args.data)
    train, holdout = ds.split(hyper.holdout_fraction)
    model = train_mapper(train, hyper)
    out = _require(cfg, "mapper", args.out)
    model.save(out)
    report = evaluate_mapper(model, holdout) if len(holdout) else {}
    out.with_name(out.name + ".eval.json").write_text(json.dumps(report, indent=2))
    m = _manifest("train-f2w", cfg.to_dict(), {"dataset_generator": ds.checkpoint_id},
                    {"dataset": ds.seed, "training": hyper.seed})
    m.write(out.with_name(out.name + ".run.json"))


def cmd_prepare_faceness_data(args):
    cfg = _config(args)
    gen = _generator(cfg)
    n = args.n or cfg.hogfd.dataset_size
    seed = cfg.hogfd.seed + 10**6 if args.seed is None else args.seed
    ds = build_faceness_dataset(gen, n, seed, args.oracle or cfg.hogfd.oracle)
    ds.save(args.out)
    _manifest("prepare-faceness-data", cfg.to_dict(), {"generator": gen.checkpoint_id},
                {"dataset": seed}).write(Path(args.out) / "run_manifest.json")


def cmd_train_hogfd(args):
    cfg = _config(args)
    hyper = cfg.hogfd if args.epochs is None else replace(cfg.hogfd, epochs=args.epochs)
    ds = ScoredImageDataset.load(args.data)
    model = train_hogfd(ds, hyper)
    out = _require(cfg, "hogfd", args.out)
    model.save(out)
    report = {"final_mse": model.final_mse, "target_variance": model.target_variance,
              "max_score": model.max_score, "max_target": model.max_target}
    out.with_name(out.name + ".eval.json").write_text(json.dumps(report, indent=2))
    _manifest("train-hogfd", cfg.to_dict(), {"dataset_generator": ds.checkpoint_id},
                {"dataset": ds.seed, "training": hyper.seed}).write(out.with_name(out.name + ".run.json"))


def cmd_invert(args):
    cfg = _config(args)
    inv = _inversion_cfg(cfg, args)
    bundle = _bundle(cfg, args.mapper, args.hogfd, need_hogfd=_needs_manifold(inv.terms))
    sketch = _load_sketch(args.sketch)
    image, run = invert_sketch(sketch, bundle, inv)
    out = Path(args.out)
    run.export(out)
    manifest = _manifest("invert", {**cfg.to_dict(), "inversion": inv.to_dict()},
                           {"generator": bundle.generator.checkpoint_id,
                            "mapper": str(_require(cfg, "mapper", args.mapper)),
                            "hogfd": str(_require(cfg, "hogfd", args.hogfd)) if bundle.hogfd else None},
                           {"inversion": inv.seed})
    manifest.status = run.stop_reason
    manifest.write(out / "run_manifest.json")
    if run.stop_reason == "divergence":
        log.error("inversion diverged after %d iterations", run.iterations)
        return 3
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    inv = _inversion_cfg(cfg, args)
    combos = loss_combos(args.l1, args.l2, args.l3)
    if args.combos:
        combos = {k: combos[k] for k in args.combos}
    need_hog = any(_needs_manifold(t) for t in combos.values())
    bundle = _bundle(cfg, args.mapper, args.hogfd, need_hogfd=need_hog)
    sketches = [(Path(p).stem, _load_sketch(p)) for p in args.sketch or []]
    seeds = {"inversion": inv.seed}
    if args.corpus:
        corpus = load_corpus(args.corpus)
        records = corpus.records
        if args.n_train:
            corpus = split_corpus(corpus, args.n_train, args.split_seed)
            records = corpus.test
            seeds["split"] = args.split_seed
        sketches += [(r.identity, load_image_tensor(r.sketch)) for r in records]
    if args.limit:
        sketches = sketches[: args.limit]
    if not sketches:
        raise DatasetError("no sketches given (use --sketch or --corpus)")
    report = run_ablation(sketches, bundle, combos, inv)
    report.write(args.out)
    _manifest("ablate", cfg.to_dict(), {"generator": bundle.generator.checkpoint_id}, seeds).write(
        Path(args.out) / "run_manifest.json")
    return 0 if all(c.status == "ok" for c in report.cells) else 2


TABLE2_RECOGNIZERS = ("facenet", "vggface", "vggface2")


def cmd_evaluate(args):
    cfg = _config(args)
    ref_dir, syn_dir, out = Path(args.reference_dir), Path(args.synth_dir), Path(args.out)
    refs = {p.stem: p for p in sorted(ref_dir.glob("*.png"))}
    syns = {p.stem: p for p in sorted(syn_dir.glob("*.png"))}
    names = sorted(refs.keys() & syns.keys())
    if not names:
        raise DatasetError(f"no matching file names between {ref_dir} and {syn_dir}")
    out.mkdir(parents=True, exist_ok=True)
    iqa = IQAReport()
    ref_imgs, syn_imgs = {}, {}
    for n in names:
        ref_imgs[n] = load_image_tensor(refs[n])
        syn_imgs[n] = load_image_tensor(syns[n])
        if ref_imgs[n].shape[1:] != syn_imgs[n].shape[1:]:
            syn_imgs[n] = torch.nn.functional.interpolate(
                syn_imgs[n][None], size=tuple(ref_imgs[n].shape[1:]), mode="bilinear",
                align_corners=False)[0].clamp(0, 1)
        iqa.add(n, ref_imgs[n].permute(1, 2, 0).numpy(), syn_imgs[n].permute(1, 2, 0).numpy())
    iqa.write_csv(out / "iqa.csv")
    reg = _registry(cfg)
    recognizers = args.recognizers.split(",") if args.recognizers else list(TABLE2_RECOGNIZERS)
    rank1 = {}
    for rid in recognizers:
        try:
            ex = reg.get(rid)
        except WeightsMissingError as exc:
            log.warning("skipping recognizer %s: %s", rid, exc)
            rank1[rid] = None
            continue
        rep = rank1_accuracy([(n, ref_imgs[n]) for n in names], [(n, syn_imgs[n]) for n in names],
                             ex, args.distance)
        rep.write_csv(out / f"rank1_{rid}.csv")
        rank1[rid] = rep.accuracy
    means = {k: (None if v != v else v) for k, v in iqa.means.items()}
    fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
    table = [
        "| Method | SSIM | FSIM | VIF |", "|---|---|---|---|",
        f"| {args.method} | {fmt(means['ssim'])} | {fmt(means['fsim'])} | {fmt(means['vif'])} |", "",
        "| Method | " + " | ".join(recognizers) + " |", "|---" * (len(recognizers) + 1) + "|",
        f"| {args.method} | " + " | ".join(fmt(rank1[r]) for r in recognizers) + " |",
    ]
    (out / "summary.md").write_text("\n".join(table) + "\n")
    (out / "summary.json").write_text(json.dumps({"pairs": len(names), "iqa_means": means,
                                                  "rank1": rank1}, indent=2))
    print("\n".join(table))
    _manifest("evaluate", cfg.to_dict()).write(out / "run_manifest.json")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketch2face", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
        return sp

    sp = sub.add_parser("make-toy-assets", help="write seeded toy checkpoints and a toy config")
    sp.add_argument("--seed", type=int, default=TOY_SEED)
    sp.add_argument("--out", required=True)
    sp.add_argument("--with-models", action="store_true", help="also train the toy F2W and HOGFD models")
    sp.set_defaults(func=cmd_make_toy_assets)

    sp = with_config(sub.add_parser("prepare-f2w-data", help="generate (feature, latent) pairs"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--extractor")
    sp.set_defaults(func=cmd_prepare_f2w_data)

    sp = with_config(sub.add_parser("train-f2w", help="train the feature-to-latent mapper"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train_f2w)

    sp = with_config(sub.add_parser("prepare-faceness-data", help="label generated images with faceness"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--oracle", choices=["hog", "smoothness"])
    sp.set_defaults(func=cmd_prepare_faceness_data)

    sp = with_config(sub.add_parser("train-hogfd", help="train the faceness regressor"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_hogfd)

    def with_inversion(sp):
        sp.add_argument("--mapper")
        sp.add_argument("--hogfd")
        sp.add_argument("--terms", nargs="+", metavar="TERM", help="e.g. app:vggface manifold*0.5")
        sp.add_argument("--max-iterations", type=int)
        sp.add_argument("--seed", type=int)
        return sp

    sp = with_inversion(with_config(sub.add_parser("invert", help="sketch -> photo")))
    sp.add_argument("--sketch", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_invert)

    sp = with_inversion(with_config(sub.add_parser("ablate", help="loss-combination grid")))
    sp.add_argument("--sketch", action="append")
    sp.add_argument("--corpus")
    sp.add_argument("--n-train", type=int, help="split the corpus and ablate the test part")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--combos", nargs="+", choices=list("defghij"))
    sp.add_argument("--l1", default="vggface")
    sp.add_argument("--l2", default="vggface2")
    sp.add_argument("--l3", default="vgg16")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("evaluate", help="SSIM/FSIM/VIF and rank-1 tables"))
    sp.add_argument("--reference-dir", required=True)
    sp.add_argument("--synth-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--recognizers", help="comma-separated extractor ids (default facenet,vggface,vggface2)")
    sp.add_argument("--distance", choices=["euclidean", "cosine"], default="euclidean")
    sp.add_argument("--method", default="Proposed model")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    _argv[:] = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sketch2face: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except Sketch2FaceError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return status if isinstance(status, int) else 0


if __name__ == "__main__":
    sys.exit(main())
