"""Paired sketch/photo corpora, ablation grids and run manifests."""
from __future__ import annotations

import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import DatasetError
from .inversion import APPEARANCE, MANIFOLD, Bundle, InversionConfig, InversionRun, LossTermSpec, invert_sketch

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class CorpusRecord:
    identity: str
    photo: Path
    sketch: Path


@dataclass
class PairedCorpus:
    records: list[CorpusRecord]
    split: dict[str, str] = field(default_factory=dict)
    split_seed: int | None = None
    orphans: list[Path] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, name: str) -> list[CorpusRecord]:
        return [r for r in self.records if self.split.get(r.identity) == name]

    @property
    def train(self) -> list[CorpusRecord]:
        return self.subset("train")

    @property
    def test(self) -> list[CorpusRecord]:
        return self.subset("test")


def _images_by_id(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_corpus(root: str | Path) -> PairedCorpus:
    """Match ``photos/<id>.png`` with ``sketches/<id>.png`` under ``root``."""
    root = Path(root)
    photos, sketches = _images_by_id(root / "photos"), _images_by_id(root / "sketches")
    ids = sorted(photos.keys() & sketches.keys())
    orphans = sorted([photos[i] for i in photos.keys() - sketches.keys()]
                     + [sketches[i] for i in sketches.keys() - photos.keys()])
    if not ids:
        detail = f"; orphans: {', '.join(map(str, orphans))}" if orphans else ""
        raise DatasetError(f"no matched photo/sketch pairs under {root}{detail}")
    for p in orphans:
        log.warning("orphan corpus file without a counterpart: %s", p)
    return PairedCorpus([CorpusRecord(i, photos[i], sketches[i]) for i in ids], orphans=orphans)


def split_corpus(corpus: PairedCorpus, n_train: int, seed: int) -> PairedCorpus:
    """Random train/test partition with exactly ``n_train`` training identities."""
    if not 0 < n_train < len(corpus):
        raise DatasetError(f"n_train must be in [1, {len(corpus) - 1}], got {n_train}")
    ids = sorted(r.identity for r in corpus.records)
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = {ids[i] for i in perm[:n_train]}
    split = {i: ("train" if i in train else "test") for i in ids}
    return replace(corpus, split=split, split_seed=seed)


def loss_combos(l1: str = "vggface", l2: str = "vggface2", l3: str = "vgg16") -> dict[str, list[LossTermSpec]]:
    """The seven loss combinations of the ablation grid, labelled d..j."""
    a = {k: LossTermSpec(APPEARANCE, eid) for k, eid in (("1", l1), ("2", l2), ("3", l3))}
    m = LossTermSpec(MANIFOLD)
    return {
        "d": [a["1"]],
        "e": [a["2"]],
        "f": [a["1"], a["2"], a["3"]],
        "g": [a["1"], m],
        "h": [a["2"], m],
        "i": [a["1"], a["2"], m],
        "j": [a["1"], a["2"], a["3"], m],
    }


@dataclass
class AblationCell:
    sketch: str
    combo: str
    status: str
    run: InversionRun | None = None
    error: str | None = None


@dataclass
class AblationReport:
    cells: list[AblationCell]
    combos: list[str]

    def cell(self, sketch: str, combo: str) -> AblationCell:
        return next(c for c in self.cells if c.sketch == sketch and c.combo == combo)

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "ablation.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["sketch", "combo", "status", "iterations", "initial_total", "final_total", "error"])
            for c in self.cells:
                r = c.run
                out.writerow([c.sketch, c.combo, c.status,
                              r.iterations if r else "", repr(r.total_losses[0]) if r and r.total_losses else "",
                              repr(r.final_total) if r else "", c.error or ""])
                if r is not None:
                    r.export(directory / c.sketch / c.combo)
        return directory


def run_ablation(sketches: list[tuple[str, torch.Tensor]], bundle: Bundle,
                 combos: dict[str, list[LossTermSpec]], cfg: InversionConfig) -> AblationReport:
    """One inversion per (sketch, combo). A failing cell is recorded and the grid continues."""
    if not combos:
        raise DatasetError("at least one loss combination is required")
    cells = []
    for name, sketch in sketches:
        for label, terms in combos.items():
            try:
                _, run = invert_sketch(sketch, bundle, replace(cfg, terms=list(terms)))
                cells.append(AblationCell(name, label, "ok", run))
            except Exception as exc:  # isolation: one cell never aborts the grid
                log.error("ablation cell %s/%s failed: %s", name, label, exc)
                cells.append(AblationCell(name, label, "failed", error=f"{type(exc).__name__}: {exc}"))
    return AblationReport(cells, list(combos))


@dataclass
class RunManifest:
    stage: str
    config: dict
    checkpoints: dict[str, str | None] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    argv: list[str] = field(default_factory=lambda: list(sys.argv[1:]))
    started: float = field(default_factory=time.time)
    finished: float | None = None
    status: str = "running"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.finished = time.time()
        record = {
            "toolkit_version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "stage": self.stage,
            "status": self.status,
            "argv": self.argv,
            "checkpoints": self.checkpoints,
            "seeds": self.seeds,
            "config": self.config,
            "timestamps": {"started": self.started, "finished": self.finished},
        }
        path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
        return path
