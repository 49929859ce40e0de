"""Faceness scoring and the manifold-preservation loss.

Ground-truth faceness comes from an oracle: dlib's HOG frontal-face detector
at full scale, or a smoothness score on the toy fixture where face detection
on 32x32 images is meaningless. The HOGFD regressor learns that score so it
can be differentiated; the loss is ``max_score - HOGFD(image)``.
"""
from __future__ import annotations

import csv
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DatasetError, OracleUnavailableError, ShapeError, TrainingDivergedError
from .generator import GeneratorHandle, sample_noise
from .imaging import SIGNED, UNIT, check_image, convert_range, load_png, save_png, tensor_to_hwc, to_gray, to_uint8

log = logging.getLogger(__name__)

HOGFD_FORMAT = "sketch2face-hogfd"
_local = threading.local()


def _as_gray_uint8(img) -> np.ndarray:
    arr = tensor_to_hwc(img) if isinstance(img, torch.Tensor) else np.asarray(img, dtype=np.float64)
    gray = to_gray(arr)
    if gray.size == 0 or min(gray.shape) < 1:
        raise ShapeError("degenerate image")
    return to_uint8(gray)


def hog_faceness(img, upsample: int = 1) -> float:
    """Maximum HOG face-detector confidence over all detections, 0 if none.

    ``img`` is a unit-range (C,H,W) tensor or HxW(x3) array. Not differentiable.
    """
    gray = _as_gray_uint8(img)
    detector = getattr(_local, "detector", None)
    if detector is None:
        try:
            import dlib
        except ImportError as exc:
            raise OracleUnavailableError("dlib is required for the HOG faceness oracle") from exc
        detector = _local.detector = dlib.get_frontal_face_detector()
    _, scores, _ = detector.run(gray, upsample, 0.0)
    return float(max(scores)) if len(scores) else 0.0


def smoothness_faceness(img, scale: float = 2.0, tau: float = 0.02) -> float:
    """Toy stand-in oracle: ``scale * exp(-mean squared gradient / tau)`` on the 8-bit gray image."""
    g = _as_gray_uint8(img).astype(np.float64) / 255.0
    energy = 0.0
    if g.shape[0] > 1:
        energy += np.mean(np.diff(g, axis=0) ** 2)
    if g.shape[1] > 1:
        energy += np.mean(np.diff(g, axis=1) ** 2)
    return float(scale * np.exp(-energy / tau))


ORACLES: dict[str, Callable] = {"hog": hog_faceness, "smoothness": smoothness_faceness}


@dataclass
class ScoredImageDataset:
    images: torch.Tensor  # (n, 3, H, W), unit range, 8-bit quantized
    scores: torch.Tensor  # (n,)
    seeds: list[int]
    checkpoint_id: str
    seed: int
    oracle: str

    def __len__(self) -> int:
        return len(self.scores)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        with open(directory / "scores.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["index", "seed", "score"])
            for i, (s, score) in enumerate(zip(self.seeds, self.scores.tolist())):
                save_png(directory / "images" / f"{i:06d}.png", self.images[i])
                out.writerow([i, s, repr(score)])
        (directory / "dataset.txt").write_text(
            f"checkpoint_id: {self.checkpoint_id}\nseed: {self.seed}\noracle: {self.oracle}\n"
        )
        return directory

    @classmethod
    def load(cls, directory: str | Path, dtype: torch.dtype = torch.float64) -> "ScoredImageDataset":
        directory = Path(directory)
        meta = dict(line.split(": ", 1) for line in (directory / "dataset.txt").read_text().splitlines())
        seeds, scores, images = [], [], []
        with open(directory / "scores.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                arr = load_png(directory / "images" / f"{int(row['index']):06d}.png", channels=3)
                images.append(torch.from_numpy(arr.transpose(2, 0, 1).copy()))
                seeds.append(int(row["seed"]))
                scores.append(float(row["score"]))
        if not scores:
            raise DatasetError(f"{directory}: no records")
        return cls(torch.stack(images).to(dtype), torch.tensor(scores, dtype=dtype), seeds,
                   meta["checkpoint_id"], int(meta["seed"]), meta["oracle"])


def build_faceness_dataset(gen: GeneratorHandle, n: int, seed: int, oracle: str = "hog",
                           batch_size: int = 32) -> ScoredImageDataset:
    """``n`` generated images (noise seed ``seed + i``) labelled by the named oracle."""
    if n < 1:
        raise DatasetError("faceness dataset needs n >= 1")
    score_fn = ORACLES[oracle]
    images, scores = [], []
    seeds = [seed + i for i in range(n)]
    for start in range(0, n, batch_size):
        z = torch.stack([sample_noise(s, gen.dtype) for s in seeds[start : start + batch_size]])
        with torch.no_grad():
            img = convert_range(gen.synthesize(gen.map_noise(z)), SIGNED, UNIT)
        img = torch.round(img.clamp(0, 1) * 255) / 255
        images.append(img)
        scores.extend(score_fn(im) for im in img)
    return ScoredImageDataset(torch.cat(images), torch.tensor(scores, dtype=gen.dtype),
                              seeds, gen.checkpoint_id, seed, oracle)


class HOGFDNet(nn.Module):
    """Four conv(3x3)+BN+ReLU+maxpool blocks, then FC 16 (BN, ReLU, dropout) -> FC 4 (ReLU) -> FC 1."""

    def __init__(self, input_resolution: int = 128, dropout: float = 0.5,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if input_resolution % 16:
            raise ValueError("input_resolution must be divisible by 16")
        blocks, c_in = [], 3
        for c in (16, 32, 64, 128):
            blocks += [nn.Conv2d(c_in, c, 3, stride=1, padding=1, dtype=dtype),
                       nn.BatchNorm2d(c, dtype=dtype), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c
        self.features = nn.Sequential(*blocks)
        side = input_resolution // 16
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(128 * side * side, 16, dtype=dtype), nn.BatchNorm1d(16, dtype=dtype), nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(16, 4, dtype=dtype), nn.ReLU(),
            nn.Linear(4, 1, dtype=dtype),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))[:, 0]


def prepare_input(img: torch.Tensor, resolution: int, dtype: torch.dtype,
                  value_range: str = UNIT) -> torch.Tensor:
    """Image or batch -> (N, 3, r, r) network input centred on zero."""
    check_image(img)
    x = convert_range(img if img.dim() == 4 else img[None], value_range, UNIT)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    if tuple(x.shape[-2:]) != (resolution, resolution):
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return (x.to(dtype) - 0.5) / 0.5


@dataclass
class HOGFDConfig:
    input_resolution: int = 128
    dropout: float = 0.5
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    dataset_size: int = 100_000
    oracle: str = "hog"
    train_dtype: str = "float32"


class HOGFDModel:
    """Trained regressor plus the ``max_score`` anchor of the manifold loss."""

    def __init__(self, net: HOGFDNet, input_resolution: int, max_score: float | None = None,
                 max_target: float | None = None, argmax_index: int | None = None):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.input_resolution = input_resolution
        self.max_score = max_score
        self.max_target = max_target
        self.argmax_index = argmax_index
        self.loss_curve: list[float] = []
        self.final_mse: float | None = None
        self.target_variance: float | None = None

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def prepare(self, img: torch.Tensor, value_range: str = UNIT) -> torch.Tensor:
        return prepare_input(img, self.input_resolution, self.dtype, value_range)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.net.state_dict(), format=HOGFD_FORMAT, version=1, meta={
            "input_resolution": self.input_resolution,
            "dropout": self.net.head[4].p,
            "dtype": str(self.dtype).removeprefix("torch."),
            "max_score": repr(self.max_score),
            "max_target": repr(self.max_target),
            "argmax_index": self.argmax_index,
        })

    @classmethod
    def load(cls, path: str | Path) -> "HOGFDModel":
        tensors, fields = load_checkpoint(path, format=HOGFD_FORMAT, version=1)
        res = int(fields["input_resolution"])
        net = HOGFDNet(res, float(fields["dropout"]), getattr(torch, fields["dtype"]))
        net.load_state_dict(tensors)

        def _num(key, cast=float):
            v = fields.get(key, "None")
            return None if v == "None" else cast(v)

        return cls(net, res, _num("max_score"), _num("max_target"), _num("argmax_index", int))


def hogfd_score(m: HOGFDModel, img: torch.Tensor, value_range: str = UNIT) -> torch.Tensor:
    """Faceness of one image (scalar) or a batch (N,). Differentiable with respect to ``img``."""
    out = m.net(m.prepare(img, value_range))
    return out[0] if img.dim() == 3 else out


def manifold_loss(m: HOGFDModel, img: torch.Tensor, value_range: str = UNIT) -> torch.Tensor:
    """``max_score - HOGFD(img)``; unclamped, so images above ``max_score`` give negative loss."""
    if m.max_score is None:
        raise ValueError("HOGFD model has no max_score; train or load a calibrated model")
    return m.max_score - hogfd_score(m, img, value_range)


def _batch_scores(m: HOGFDModel, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([hogfd_score(m, images[i : i + batch_size])
                          for i in range(0, len(images), batch_size)])


def calibrate_max_score(m: HOGFDModel, images: torch.Tensor, batch_size: int = 256) -> None:
    """Set ``max_score`` to the largest single-image output over ``images``.

    Candidates near the batched maximum are re-scored one at a time so the
    stored value is exactly what :func:`hogfd_score` returns for the argmax image.
    """
    out = _batch_scores(m, images, batch_size)
    top = float(out.max())
    margin = 1e-5 * (1.0 + abs(top))
    best, best_i = -float("inf"), -1
    with torch.no_grad():
        for i in torch.nonzero(out >= top - margin).flatten().tolist():
            s = float(hogfd_score(m, images[i]))
            if s > best:
                best, best_i = s, i
    m.max_score, m.argmax_index = best, best_i


def _refit_output_layer(net: HOGFDNet, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> None:
    """Least-squares refit of the final 4->1 layer on inference-mode activations.

    Dropout and batch-norm behave differently at inference, which biases the
    trained head; refitting the last affine map removes that bias and can only
    lower the inference-mode training MSE (a constant predictor is a feasible fit).
    """
    net.eval()
    body = nn.Sequential(net.features, net.head[:-1])
    with torch.no_grad():
        h = torch.cat([body(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
        design = torch.cat([h, torch.ones(len(h), 1, dtype=h.dtype)], dim=1).double()
        sol = torch.linalg.lstsq(design, y.double()[:, None], driver="gelsd").solution[:, 0]
        net.head[-1].weight.copy_(sol[:-1][None].to(h.dtype))
        net.head[-1].bias.copy_(sol[-1:].to(h.dtype))


def train_hogfd(ds: ScoredImageDataset, hyper: HOGFDConfig) -> HOGFDModel:
    if len(ds) < 1:
        raise DatasetError("faceness dataset is empty")
    gen = torch.Generator().manual_seed(hyper.seed)
    dtype = getattr(torch, hyper.train_dtype)
    torch.manual_seed(hyper.seed)  # dropout masks draw from the global generator
    net = HOGFDNet(hyper.input_resolution, hyper.dropout, dtype)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen, dtype=dtype)
                                 * (2.0 / fan_in) ** 0.5)
                mod.bias.zero_()
    for p in net.parameters():
        p.requires_grad_(True)
    curve = []
    with torch.no_grad():
        net.head[-1].bias.fill_(float(ds.scores.mean()))
    x_all = prepare_input(ds.images, hyper.input_resolution, dtype)
    y_all = ds.scores.to(dtype)
    y_eval = ds.scores.to(ds.images.dtype)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    steps_per_epoch = max(1, len(ds) // hyper.batch_size + (len(ds) % hyper.batch_size >= 2))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=hyper.epochs * steps_per_epoch)
    net.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(ds), generator=gen)
        for start in range(0, len(ds), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            if len(idx) < 2:  # batch norm needs two samples
                continue
            loss = (net(x_all[idx]) - y_all[idx]).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"HOGFD loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            curve.append(loss.item())
    _refit_output_layer(net, x_all, y_all, hyper.batch_size)
    model = HOGFDModel(net.to(ds.images.dtype), hyper.input_resolution)
    model.loss_curve = curve
    pred = _batch_scores(model, ds.images, hyper.batch_size)
    model.final_mse = float((pred - y_eval).pow(2).mean())
    model.target_variance = float(y_eval.var(unbiased=False))
    model.max_target = float(y_eval.max())
    calibrate_max_score(model, ds.images, hyper.batch_size)
    log.info("HOGFD trained: mse %.4g (target variance %.4g), max_score %.6g, max target %.6g",
             model.final_mse, model.target_variance, model.max_score, model.max_target)
    return model
