"""Face generators: latent code -> image.

Two kinds are supported behind one handle:

* ``toy``: a small seeded decoder (18x16 latent, 32x32 output, float64) used
  for fast, differentiable tests of every downstream stage.
* ``pretrained``: a TorchScript export of a style-based generator exposing
  ``mapping(z) -> w`` and ``synthesis(w) -> image`` (NCHW, [-1, 1]).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import check_manifest, file_sha256, load_checkpoint, save_checkpoint
from .errors import CorruptCheckpointError, NonFiniteError, ShapeError

NOISE_DIM = 512
LATENT_ROWS = 18
LATENT_WIDTH = 512

TOY_FORMAT = "sketch2face-toy-generator"
PRETRAINED_FORMAT = "stylegan-torchscript"
FORMAT_VERSION = 1
TOY_SEED = 1234
TOY_WIDTH = 16
TOY_RESOLUTION = 32


def sample_noise(seed: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Standard-normal noise vector of length 512, reproducible per seed."""
    z = np.random.default_rng(seed).standard_normal(NOISE_DIM)
    return torch.from_numpy(z).to(dtype)


def _normal(gen: torch.Generator, *shape: int, std: float) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * std


class ToyMapping(nn.Module):
    def __init__(self, width: int = TOY_WIDTH, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(NOISE_DIM, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, width, dtype=torch.float64)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        return self.fc2(torch.tanh(self.fc1(z)))


class ToySynthesis(nn.Module):
    """Three upsampling stages from a 4x4 base to 32x32 RGB.

    Latent rows are consumed in groups: rows 0-1 build the base tensor, rows
    2-13 modulate the three stages (4 rows each), rows 14-17 modulate the
    RGB projection. Every row therefore influences the output.
    """

    channels = 24

    def __init__(self, width: int = TOY_WIDTH):
        super().__init__()
        c = self.channels
        self.width = width
        self.base = nn.Linear(2 * width, c * 16, dtype=torch.float64)
        self.const = nn.Parameter(torch.zeros(c, 4, 4, dtype=torch.float64))
        self.convs = nn.ModuleList(
            nn.Conv2d(c, c, 3, padding=1, dtype=torch.float64) for _ in range(3)
        )
        self.styles = nn.ModuleList(nn.Linear(4 * width, c, dtype=torch.float64) for _ in range(3))
        self.rgb_style = nn.Linear(4 * width, c, dtype=torch.float64)
        self.to_rgb = nn.Conv2d(c, 3, 1, dtype=torch.float64)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        n, c = w.shape[0], self.channels
        x = self.base(w[:, 0:2].reshape(n, -1)).view(n, c, 4, 4) + self.const
        for k, (conv, style) in enumerate(zip(self.convs, self.styles)):
            s = w[:, 2 + 4 * k : 6 + 4 * k].reshape(n, -1)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = conv(x) * (1.0 + 0.5 * torch.tanh(style(s)))[:, :, None, None]
            x = torch.tanh(x)
        s = w[:, 14:18].reshape(n, -1)
        x = x * (1.0 + 0.5 * torch.tanh(self.rgb_style(s)))[:, :, None, None]
        return torch.tanh(self.to_rgb(x))


class ToyGenerator(nn.Module):
    def __init__(self, width: int = TOY_WIDTH):
        super().__init__()
        self.mapping_net = ToyMapping(width)
        self.synthesis_net = ToySynthesis(width)

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping_net(z)

    def synthesis(self, w: torch.Tensor) -> torch.Tensor:
        return self.synthesis_net(w)


def init_toy_generator(seed: int = TOY_SEED) -> ToyGenerator:
    """Deterministic toy weights; independent of torch's global RNG."""
    net = ToyGenerator()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.copy_(_normal(gen, *p.shape, std=0.1))
            elif name == "synthesis_net.const":
                p.copy_(_normal(gen, *p.shape, std=0.5))
            else:
                fan_in = p[0].numel()
                gain = 2.0 if "conv" in name else 1.0
                p.copy_(_normal(gen, *p.shape, std=gain / math.sqrt(fan_in)))
    return net


@dataclass(frozen=True, eq=False)
class GeneratorHandle:
    """Immutable loaded generator. All public calls are pure functions of inputs."""

    kind: str
    output_resolution: int
    checkpoint_id: str
    latent_shape: tuple[int, int]
    network: nn.Module = field(repr=False)
    dtype: torch.dtype = torch.float64

    def map_noise(self, z: torch.Tensor) -> torch.Tensor:
        """Noise (512,) or (N, 512) -> latent (rows, width) or (N, rows, width).

        The mapping network's single output row is broadcast to every latent row.
        """
        z = torch.as_tensor(z, dtype=self.dtype)
        single = z.dim() == 1
        if z.shape[-1] != NOISE_DIM or z.dim() > 2:
            raise ShapeError(f"noise must have trailing length {NOISE_DIM}, got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise NonFiniteError("noise vector has non-finite entries")
        zb = z[None] if single else z
        with torch.no_grad():
            out = self.network.mapping(zb).to(self.dtype)
        rows, width = self.latent_shape
        if out.dim() == 2:
            out = out[:, None, :].expand(-1, rows, -1)
        if tuple(out.shape[1:]) != self.latent_shape:
            raise ShapeError(f"mapping produced {tuple(out.shape[1:])}, expected {self.latent_shape}")
        out = out.contiguous()
        return out[0] if single else out

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        """Latent (rows, width) or (N, rows, width) -> image (3,R,R) or (N,3,R,R) in [-1, 1].

        Differentiable with respect to ``w``.
        """
        single = w.dim() == 2
        if tuple(w.shape[-2:]) != self.latent_shape or w.dim() not in (2, 3):
            raise ShapeError(f"latent must be {self.latent_shape}, got {tuple(w.shape)}")
        if not torch.isfinite(w.detach()).all():
            raise NonFiniteError("latent code has non-finite entries")
        wb = w[None] if single else w
        img = self.network.synthesis(wb.to(self.dtype))
        r = self.output_resolution
        if tuple(img.shape[1:]) != (3, r, r):
            raise ShapeError(f"synthesis produced {tuple(img.shape[1:])}, expected (3, {r}, {r})")
        return img[0] if single else img

    def broadcast(self, row: torch.Tensor) -> torch.Tensor:
        """Repeat one latent row (width,) to the full (rows, width) code."""
        return row.expand(self.latent_shape[0], -1)


def _freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def make_toy_generator(seed: int = TOY_SEED) -> GeneratorHandle:
    return GeneratorHandle(
        kind="toy",
        output_resolution=TOY_RESOLUTION,
        checkpoint_id=f"toy-seed{seed}",
        latent_shape=(LATENT_ROWS, TOY_WIDTH),
        network=_freeze(init_toy_generator(seed)),
    )


def save_toy_generator(path: str | Path, seed: int = TOY_SEED) -> Path:
    net = init_toy_generator(seed)
    return save_checkpoint(
        path,
        net.state_dict(),
        format=TOY_FORMAT,
        version=FORMAT_VERSION,
        meta={
            "checkpoint_id": f"toy-seed{seed}",
            "resolution": TOY_RESOLUTION,
            "latent_rows": LATENT_ROWS,
            "latent_width": TOY_WIDTH,
            "noise_dim": NOISE_DIM,
            "seed": seed,
        },
    )


def load_generator(checkpoint_path: str | Path, kind: str) -> GeneratorHandle:
    """Load a generator checkpoint of the declared ``kind`` ('toy' or 'pretrained')."""
    if kind == "toy":
        tensors, fields = load_checkpoint(checkpoint_path, format=TOY_FORMAT, version=FORMAT_VERSION)
        net = ToyGenerator(int(fields["latent_width"]))
        try:
            net.load_state_dict(tensors)
        except RuntimeError as exc:
            raise CorruptCheckpointError(f"{checkpoint_path}: {exc}") from exc
        return GeneratorHandle(
            kind="toy",
            output_resolution=int(fields["resolution"]),
            checkpoint_id=fields.get("checkpoint_id", fields["sha256"][:16]),
            latent_shape=(int(fields["latent_rows"]), int(fields["latent_width"])),
            network=_freeze(net),
        )
    if kind == "pretrained":
        fields = check_manifest(checkpoint_path, format=PRETRAINED_FORMAT, version=FORMAT_VERSION)
        if "sha256" in fields and fields["sha256"] != file_sha256(checkpoint_path):
            raise CorruptCheckpointError(f"{checkpoint_path}: sha256 does not match manifest")
        try:
            net = torch.jit.load(str(checkpoint_path), map_location="cpu")
        except (RuntimeError, ValueError) as exc:
            raise CorruptCheckpointError(f"{checkpoint_path}: {exc}") from exc
        dtype = getattr(torch, fields.get("dtype", "float32"))
        return GeneratorHandle(
            kind="pretrained",
            output_resolution=int(fields["resolution"]),
            checkpoint_id=fields.get("checkpoint_id", fields.get("sha256", "")[:16]),
            latent_shape=(int(fields.get("latent_rows", LATENT_ROWS)),
                          int(fields.get("latent_width", LATENT_WIDTH))),
            network=_freeze(net),
            dtype=dtype,
        )
    raise ValueError(f"unknown generator kind {kind!r}")
