"""Latent refinement: weighted sum of appearance and manifold losses,
minimized over the generator's intermediate latent code.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError, NonFiniteError, Sketch2FaceError
from .extractors import Extractor, ExtractorRegistry, FeatureVector
from .f2w import MapperModel, map_features
from .generator import GeneratorHandle
from .imaging import SIGNED, UNIT, save_png
from .manifold import HOGFDModel, manifold_loss

log = logging.getLogger(__name__)

APPEARANCE = "appearance"
MANIFOLD = "manifold"


@dataclass(frozen=True)
class LossTermSpec:
    kind: str
    extractor_id: str | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in (APPEARANCE, MANIFOLD):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == APPEARANCE and not self.extractor_id:
            raise ConfigError("appearance terms need an extractor_id")
        if not (self.weight >= 0 and self.weight != float("inf")):
            raise ConfigError(f"term weight must be finite and >= 0, got {self.weight}")

    @property
    def name(self) -> str:
        return f"app:{self.extractor_id}" if self.kind == APPEARANCE else "manifold"

    @classmethod
    def parse(cls, text: str) -> "LossTermSpec":
        """``app:<id>[*weight]`` or ``manifold[*weight]``."""
        body, _, weight = text.partition("*")
        kind, _, eid = body.partition(":")
        kind = {"app": APPEARANCE, "appearance": APPEARANCE, "manifold": MANIFOLD, "m": MANIFOLD}.get(kind)
        if kind is None:
            raise ConfigError(f"cannot parse loss term {text!r}")
        return cls(kind, eid or None, float(weight) if weight else 1.0)


def appearance(*ids: str) -> list[LossTermSpec]:
    return [LossTermSpec(APPEARANCE, i) for i in ids]


def default_terms() -> list[LossTermSpec]:
    return appearance("vggface", "vggface2", "vgg16") + [LossTermSpec(MANIFOLD)]


@dataclass
class InversionConfig:
    terms: list[LossTermSpec] = field(default_factory=default_terms)
    step_size: float = 0.01
    max_iterations: int = 1000
    plateau_patience: int = 50
    plateau_tolerance: float = 1e-4
    optimize_rows: str = "joint_18"
    optimizer: str = "adam"
    seed: int = 0
    snapshot_every: int = 50

    def validate(self) -> None:
        if not self.terms:
            raise ConfigError("at least one loss term is required")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if self.optimize_rows not in ("joint_18", "shared_1"):
            raise ConfigError(f"optimize_rows must be joint_18 or shared_1, got {self.optimize_rows!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = [asdict(t) for t in self.terms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        d = dict(d)
        if "terms" in d:
            d["terms"] = [LossTermSpec.parse(t) if isinstance(t, str) else LossTermSpec(**t)
                          for t in d["terms"]]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown inversion keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Bundle:
    """Loaded, read-only models shared by every inversion run."""

    generator: GeneratorHandle
    extractors: ExtractorRegistry
    mapper: MapperModel | None = None
    hogfd: HOGFDModel | None = None

    def extractor(self, extractor_id: str) -> Extractor:
        return self.extractors.get(extractor_id)


def appearance_loss(syn: torch.Tensor, sketch: torch.Tensor | None, extractor: Extractor,
                    sketch_feature: FeatureVector | None = None,
                    syn_range: str = SIGNED, sketch_range: str = UNIT) -> torch.Tensor:
    """Euclidean distance between the extractor's features of ``syn`` and ``sketch``.

    Pass ``sketch_feature`` to reuse a cached sketch descriptor.
    """
    if sketch_feature is None:
        with torch.no_grad():
            sketch_feature = extractor.extract(sketch, sketch_range)
    f_syn = extractor.extract(syn, syn_range).values
    return torch.linalg.vector_norm(f_syn - sketch_feature.values.to(f_syn.dtype), dim=-1)


class LossEvaluator:
    """Evaluates Σ weight·term on ``synthesize(w)`` with sketch features cached."""

    def __init__(self, bundle: Bundle, terms: list[LossTermSpec], sketch: torch.Tensor,
                 sketch_range: str = UNIT):
        if not terms:
            raise ConfigError("at least one loss term is required")
        self.bundle, self.terms = bundle, list(terms)
        self.names = _unique_names(self.terms)
        self._sketch_features: dict[str, FeatureVector] = {}
        for t in self.terms:
            if t.kind == APPEARANCE and t.weight != 0 and t.extractor_id not in self._sketch_features:
                with torch.no_grad():
                    self._sketch_features[t.extractor_id] = bundle.extractor(t.extractor_id).extract(
                        sketch, sketch_range)
            if t.kind == MANIFOLD and t.weight != 0 and bundle.hogfd is None:
                raise ConfigError("manifold term requested but no HOGFD model is loaded")

    def term_values(self, img: torch.Tensor) -> list[torch.Tensor | None]:
        """Unweighted term values; ``None`` for zero-weight terms, which are never evaluated."""
        values = []
        for t, name in zip(self.terms, self.names):
            if t.weight == 0:
                values.append(None)
                continue
            try:
                if t.kind == APPEARANCE:
                    ex = self.bundle.extractor(t.extractor_id)
                    values.append(appearance_loss(img, None, ex, self._sketch_features[t.extractor_id]))
                else:
                    values.append(manifold_loss(self.bundle.hogfd, img, SIGNED))
            except Sketch2FaceError as exc:
                raise type(exc)(f"loss term {name}: {exc}") from exc
        return values

    def __call__(self, w: torch.Tensor):
        """Return (total, weighted breakdown, unweighted values) for latent ``w``."""
        img = self.bundle.generator.synthesize(w)
        values = self.term_values(img)
        total = None
        breakdown = {}
        for t, name, v in zip(self.terms, self.names, values):
            if v is None:
                breakdown[name] = 0.0
                continue
            contrib = v if t.weight == 1 else t.weight * v
            breakdown[name] = contrib.item()
            total = contrib if total is None else total + contrib
        if total is None:
            total = w.new_zeros(()) + 0.0 * w.sum()
        return total, breakdown, values


def _unique_names(terms) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for t in terms:
        k = seen.get(t.name, 0)
        names.append(t.name if k == 0 else f"{t.name}#{k}")
        seen[t.name] = k + 1
    return names


def total_loss(w: torch.Tensor, bundle: Bundle, terms: list[LossTermSpec], sketch: torch.Tensor,
               sketch_range: str = UNIT) -> tuple[torch.Tensor, dict[str, float]]:
    total, breakdown, _ = LossEvaluator(bundle, terms, sketch, sketch_range)(w)
    return total, breakdown


@dataclass
class InversionRun:
    initial_w: torch.Tensor
    final_w: torch.Tensor
    total_losses: list[float]
    term_losses: dict[str, list[float]]
    snapshots: dict[int, torch.Tensor]
    stop_reason: str
    config: InversionConfig
    wall_time: float
    final_total: float | None = None
    final_image: torch.Tensor | None = None

    @property
    def iterations(self) -> int:
        return len(self.total_losses)

    def write_losses_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            names = list(self.term_losses)
            out.writerow(["iteration", "total", *names])
            for i, total in enumerate(self.total_losses):
                out.writerow([i, repr(total), *(repr(self.term_losses[n][i]) for n in names)])

    def export(self, directory: str | Path, extra_summary: dict | None = None) -> Path:
        """Run directory: config.json, losses.csv, snapshots/*.png, final.png, summary.json."""
        directory = Path(directory)
        (directory / "snapshots").mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))
        self.write_losses_csv(directory / "losses.csv")
        for it, img in sorted(self.snapshots.items()):
            save_png(directory / "snapshots" / f"iter_{it:05d}.png", img, SIGNED)
        if self.final_image is not None:
            save_png(directory / "final.png", self.final_image, SIGNED)
        summary = {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "initial_total": self.total_losses[0] if self.total_losses else None,
            "final_total": self.final_total,
            "wall_time_s": self.wall_time,
        }
        summary.update(extra_summary or {})
        (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return directory


def _plateaued(losses: list[float], patience: int, tol: float) -> bool:
    if len(losses) <= patience:
        return False
    before = min(losses[: len(losses) - patience])
    now = min(losses)
    return (before - now) / max(abs(before), 1e-12) < tol


def optimize(w0: torch.Tensor, bundle: Bundle, sketch: torch.Tensor, cfg: InversionConfig,
             sketch_range: str = UNIT, evaluator: LossEvaluator | None = None) -> InversionRun:
    """Iteratively refine ``w0`` by first-order descent on the configured total loss.

    Stops at ``max_iterations``, on a plateau of the best loss, or on a
    non-finite loss or gradient (``stop_reason == 'divergence'``, partial run).
    Loss entry ``i`` is the loss at the i-th iterate, before its update.
    """
    cfg.validate()
    gen = bundle.generator
    if tuple(w0.shape) != gen.latent_shape:
        raise ConfigError(f"w0 shape {tuple(w0.shape)} != generator latent {gen.latent_shape}")
    if not torch.isfinite(w0).all():
        raise NonFiniteError("initial latent has non-finite entries")
    evaluator = evaluator or LossEvaluator(bundle, cfg.terms, sketch, sketch_range)
    torch.manual_seed(cfg.seed)
    w0 = w0.detach().to(gen.dtype)
    shared = cfg.optimize_rows == "shared_1"
    param = (w0.mean(0) if shared else w0.clone()).requires_grad_(True)
    expand = (lambda p: gen.broadcast(p)) if shared else (lambda p: p)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam([param], lr=cfg.step_size)
    else:
        opt = torch.optim.SGD([param], lr=cfg.step_size)

    totals: list[float] = []
    terms = {n: [] for n in evaluator.names}
    snapshots: dict[int, torch.Tensor] = {}
    stop = "max_iter"
    last_good = param.detach().clone()
    start = time.perf_counter()
    for it in range(cfg.max_iterations):
        opt.zero_grad()
        try:
            total, _, values = evaluator(expand(param))
        except NonFiniteError as exc:
            log.warning("non-finite evaluation at iteration %d: %s", it, exc)
            stop = "divergence"
            break
        if not torch.isfinite(total):
            stop = "divergence"
            break
        total.backward()
        if not torch.isfinite(param.grad).all():
            stop = "divergence"
            break
        last_good = param.detach().clone()
        totals.append(total.item())
        for n, v in zip(evaluator.names, values):
            terms[n].append(0.0 if v is None else v.item())
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            with torch.no_grad():
                snapshots[it] = gen.synthesize(expand(param)).detach().clone()
        opt.step()
        if not torch.isfinite(param.detach()).all():
            stop = "divergence"
            break
        if _plateaued(totals, cfg.plateau_patience, cfg.plateau_tolerance):
            stop = "plateau"
            break
    if stop == "divergence":
        with torch.no_grad():
            param.copy_(last_good)
        log.warning("optimization diverged after %d iterations", len(totals))
    final_w = expand(param.detach()).clone()
    with torch.no_grad():
        final_image = gen.synthesize(final_w)
        try:
            final_total, _, _ = evaluator(final_w)
        except NonFiniteError:
            final_total = torch.tensor(float("nan"))
    return InversionRun(
        initial_w=w0, final_w=final_w, total_losses=totals, term_losses=terms,
        snapshots=snapshots, stop_reason=stop, config=cfg,
        wall_time=time.perf_counter() - start,
        final_total=final_total.item() if torch.isfinite(final_total) else None,
        final_image=final_image,
    )


def initial_latent(sketch: torch.Tensor, bundle: Bundle, sketch_range: str = UNIT) -> torch.Tensor:
    if bundle.mapper is None:
        raise ConfigError("bundle has no F2W mapper")
    feature = bundle.extractor(bundle.mapper.extractor_id).extract(sketch, sketch_range)
    w0 = map_features(bundle.mapper, feature)
    if tuple(w0.shape) != bundle.generator.latent_shape:
        raise ConfigError(f"mapper emits {tuple(w0.shape)}, generator expects {bundle.generator.latent_shape}")
    return w0.to(bundle.generator.dtype)


def invert_sketch(sketch: torch.Tensor, bundle: Bundle, cfg: InversionConfig,
                  sketch_range: str = UNIT) -> tuple[torch.Tensor, InversionRun]:
    """Sketch -> F2W initial latent -> refined latent -> synthesized photo (signed range)."""
    w0 = initial_latent(sketch, bundle, sketch_range)
    run = optimize(w0, bundle, sketch, cfg, sketch_range)
    return run.final_image, run
