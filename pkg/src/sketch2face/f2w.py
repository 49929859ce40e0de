"""Feature-to-latent (F2W) initialization mapper.

Training pairs come from the generator itself: seeded noise -> latent ->
image -> features. The mapper is two affine layers with a ReLU between them,
regressing the flattened latent code with mean squared error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint, write_manifest, read_manifest
from .errors import DatasetError, ExtractorMismatchError, ShapeError, TrainingDivergedError
from .extractors import Extractor, FeatureVector
from .generator import GeneratorHandle, sample_noise
from .imaging import SIGNED

log = logging.getLogger(__name__)

MAPPER_FORMAT = "sketch2face-f2w"
DATASET_FORMAT = "sketch2face-pair-dataset"


def record_seed(seed: int, index: int) -> int:
    return seed + index


@dataclass
class PairDataset:
    features: torch.Tensor  # (n, d)
    latents: torch.Tensor  # (n, rows, width)
    extractor_id: str
    checkpoint_id: str
    seed: int
    indices: np.ndarray | None = None  # record index of each row, relative to ``seed``

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.features))
        if len(self.features) != len(self.latents):
            raise DatasetError("features and latents have different record counts")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairDataset(self.features[idx], self.latents[idx], self.extractor_id,
                           self.checkpoint_id, self.seed, self.indices[idx])

    def split(self, holdout_fraction: float = 0.05) -> tuple["PairDataset", "PairDataset"]:
        """Seed-deterministic (train, holdout) partition by record index."""
        n = len(self)
        n_hold = max(1, int(round(n * holdout_fraction))) if n > 1 else 0
        perm = np.random.default_rng(self.seed).permutation(n)
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "features.npy", self.features.detach().cpu().numpy())
        np.save(directory / "latents.npy", self.latents.detach().cpu().numpy())
        np.save(directory / "indices.npy", self.indices)
        write_manifest(directory / "dataset.manifest", {
            "format": DATASET_FORMAT, "version": 1,
            "records": len(self), "feature_dim": self.features.shape[-1],
            "latent_shape": "x".join(map(str, self.latents.shape[1:])),
            "dtype": str(self.features.dtype).removeprefix("torch."),
            "extractor_id": self.extractor_id, "checkpoint_id": self.checkpoint_id,
            "seed": self.seed,
        })
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "PairDataset":
        directory = Path(directory)
        fields = read_manifest(directory / "dataset.manifest")
        if fields.get("format") != DATASET_FORMAT:
            raise DatasetError(f"{directory}: not a pair dataset")
        return cls(
            torch.from_numpy(np.load(directory / "features.npy")),
            torch.from_numpy(np.load(directory / "latents.npy")),
            fields["extractor_id"], fields["checkpoint_id"], int(fields["seed"]),
            np.load(directory / "indices.npy"),
        )


def build_pair_dataset(
    gen: GeneratorHandle, extractor: Extractor, n: int, seed: int, batch_size: int = 64
) -> PairDataset:
    """``n`` (feature, latent) records; record i uses noise seed ``seed + i``."""
    if n < 1:
        raise DatasetError("pair dataset needs n >= 1")
    feats, lats = [], []
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        z = torch.stack([sample_noise(record_seed(seed, i), gen.dtype) for i in range(start, stop)])
        w = gen.map_noise(z)
        with torch.no_grad():
            f = extractor.extract(gen.synthesize(w), SIGNED).values
        feats.append(f)
        lats.append(w)
    return PairDataset(torch.cat(feats), torch.cat(lats), extractor.extractor_id, gen.checkpoint_id, seed)


@dataclass
class F2WConfig:
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 128
    weight_decay: float = 0.0
    seed: int = 0
    holdout_fraction: float = 0.05
    dataset_size: int = 1000


class MapperModel(nn.Module):
    def __init__(self, feature_dim: int, latent_shape: tuple[int, int], hidden: int,
                 extractor_id: str, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.extractor_id = extractor_id
        self.latent_shape = tuple(latent_shape)
        self.fc1 = nn.Linear(feature_dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, latent_shape[0] * latent_shape[1], dtype=dtype)
        self.register_buffer("feat_mean", torch.zeros(feature_dim, dtype=dtype))
        self.register_buffer("feat_scale", torch.ones(feature_dim, dtype=dtype))
        self.loss_curve: list[float] = []
        self.holdout_curve: dict[int, float] = {}
        self.meta: dict[str, object] = {}

    @property
    def feature_dim(self) -> int:
        return self.fc1.in_features

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = (f.to(self.fc1.weight.dtype) - self.feat_mean) / self.feat_scale
        out = self.fc2(torch.relu(self.fc1(x)))
        return out.view(*f.shape[:-1], *self.latent_shape)

    def save(self, path: str | Path) -> Path:
        tensors = dict(self.state_dict())
        tensors["loss_curve"] = torch.tensor(self.loss_curve, dtype=torch.float64)
        meta = {
            "extractor_id": self.extractor_id,
            "feature_dim": self.feature_dim,
            "hidden": self.fc1.out_features,
            "latent_rows": self.latent_shape[0],
            "latent_width": self.latent_shape[1],
            "dtype": str(self.fc1.weight.dtype).removeprefix("torch."),
        }
        meta.update({k: v for k, v in self.meta.items() if k not in meta})
        return save_checkpoint(path, tensors, format=MAPPER_FORMAT, version=1, meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "MapperModel":
        tensors, fields = load_checkpoint(path, format=MAPPER_FORMAT, version=1)
        m = cls(int(fields["feature_dim"]), (int(fields["latent_rows"]), int(fields["latent_width"])),
                int(fields["hidden"]), fields["extractor_id"], getattr(torch, fields["dtype"]))
        curve = tensors.pop("loss_curve", torch.zeros(0))
        m.load_state_dict(tensors)
        m.loss_curve = curve.tolist()
        m.eval()
        return m


def _uniform_init(m: MapperModel, gen: torch.Generator) -> None:
    with torch.no_grad():
        for layer in (m.fc1, m.fc2):
            bound = 1.0 / math.sqrt(layer.in_features)
            for p in (layer.weight, layer.bias):
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)


def zero_mapper(ds: PairDataset, hidden: int = 128) -> MapperModel:
    """All-zero weights and biases: predicts the zero latent for every input."""
    m = MapperModel(ds.features.shape[-1], tuple(ds.latents.shape[1:]), hidden,
                    ds.extractor_id, ds.features.dtype)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m.eval()


def latent_mse(m: MapperModel, ds: PairDataset) -> torch.Tensor:
    """Per-record mean squared latent error."""
    with torch.no_grad():
        pred = m(ds.features)
    return (pred - ds.latents.to(pred.dtype)).pow(2).flatten(1).mean(1)


def train_mapper(ds: PairDataset, hyper: F2WConfig, holdout: PairDataset | None = None,
                 eval_steps=()) -> MapperModel:
    """Fit the mapper with Adam on minibatch MSE.

    Training loss is logged for every optimizer step; holdout MSE is logged at
    the steps listed in ``eval_steps`` (step 0 is before the first update).
    """
    if len(ds) < 1:
        raise DatasetError("training set is empty")
    if hyper.epochs < 1:
        raise ValueError("epochs must be >= 1")
    gen = torch.Generator().manual_seed(hyper.seed)
    dtype = ds.features.dtype
    m = MapperModel(ds.features.shape[-1], tuple(ds.latents.shape[1:]), hyper.hidden,
                    ds.extractor_id, dtype)
    _uniform_init(m, gen)
    with torch.no_grad():
        m.feat_mean.copy_(ds.features.mean(0))
        if len(ds) > 1:
            m.feat_scale.copy_(ds.features.std(0).clamp_min(1e-6))
    opt = torch.optim.Adam(m.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    eval_steps = set(eval_steps)
    target = ds.latents.to(dtype)
    step = 0

    def _log_holdout():
        if holdout is not None and step in eval_steps:
            m.eval()
            m.holdout_curve[step] = float(latent_mse(m, holdout).mean())
            m.train()

    m.train()
    _log_holdout()
    done = False
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(ds), generator=gen)
        for start in range(0, len(ds), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss = (m(ds.features[idx]) - target[idx]).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"F2W loss became non-finite at step {step} "
                    f"(last finite {m.loss_curve[-1] if m.loss_curve else 'n/a'})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            m.loss_curve.append(loss.item())
            _log_holdout()
            if hyper.max_steps is not None and step >= hyper.max_steps:
                done = True
                break
        if done:
            break
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    m.meta = {"epochs": epoch + 1, "steps": step, "seed": hyper.seed, "lr": hyper.lr,
              "batch_size": hyper.batch_size, "final_loss": m.loss_curve[-1]}
    log.info("F2W trained: %d steps, final minibatch loss %.6g", step, m.loss_curve[-1])
    return m


def map_features(m: MapperModel, f: FeatureVector) -> torch.Tensor:
    """Features (d,) or (N, d) -> latent code(s) in the generator's shape."""
    if f.extractor_id != m.extractor_id:
        raise ExtractorMismatchError(
            f"mapper trained on {m.extractor_id!r} features, got {f.extractor_id!r}"
        )
    if f.values.shape[-1] != m.feature_dim:
        raise ShapeError(f"feature dim {f.values.shape[-1]} != mapper input {m.feature_dim}")
    with torch.no_grad():
        return m(f.values.detach())


def evaluate_mapper(m: MapperModel, holdout: PairDataset, gen: GeneratorHandle | None = None) -> dict:
    """Latent-space error summary; adds image-space MSE when a generator is given."""
    if len(holdout) == 0:
        raise DatasetError("holdout set is empty")
    err = latent_mse(m, holdout)
    report = {
        "records": len(holdout),
        "mean_latent_mse": float(err.mean()),
        "median_latent_mse": float(err.median()),
    }
    if gen is not None:
        with torch.no_grad():
            pred = gen.synthesize(m(holdout.features).to(gen.dtype))
            ref = gen.synthesize(holdout.latents.to(gen.dtype))
        report["mean_image_mse"] = float((pred - ref).pow(2).flatten(1).mean(1).mean())
    return report
