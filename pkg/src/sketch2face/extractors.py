"""Face-feature extractors behind one interface, plus shared preprocessing.

Registered architectures:

========  ===========================  =========================  ======
id        network                      descriptor                 dim
========  ===========================  =========================  ======
vggface   VGG16, 2622 identities       fc7 activation             4096
vggface2  ResNet-50, 8631 identities   global-pool activation     2048
vgg16     VGG16, ImageNet              fc7 activation             4096
facenet   TorchScript export           module output              512
toy       seeded 2-conv net, float64   linear head                64
========  ===========================  =========================  ======

Weights for the pretrained networks are user-supplied files; nothing is
downloaded.
"""
from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F
import yaml
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CorruptCheckpointError, NonFiniteError, RegistryError, WeightsMissingError
from .imaging import UNIT, check_image, convert_range

TOY_EXTRACTOR_SEED = 4321
TOY_EXTRACTOR_FORMAT = "sketch2face-toy-extractor"
HOME_ENV = "SKETCH2FACE_HOME"


def asset_root() -> Path:
    return Path(os.environ.get(HOME_ENV, Path.home() / ".cache" / "sketch2face"))


@dataclass(frozen=True)
class ExtractorSpec:
    extractor_id: str
    input_resolution: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    feature_dim: int
    arch: str
    differentiable: bool = True
    weights: str | None = None
    num_classes: int | None = None
    l2_normalize: bool = False

    def __post_init__(self):
        if self.feature_dim <= 0 or self.input_resolution <= 0:
            raise RegistryError(f"{self.extractor_id}: feature_dim and input_resolution must be > 0")

    def weights_path(self) -> Path:
        if self.weights:
            return Path(self.weights).expanduser()
        suffix = ".pt" if self.arch == "torchscript" else ".pth"
        return asset_root() / "weights" / f"{self.extractor_id}{suffix}"


@dataclass(frozen=True)
class FeatureVector:
    values: torch.Tensor
    extractor_id: str

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


_VGGFACE_MEAN = (129.1863 / 255, 104.7624 / 255, 93.5940 / 255)
_VGGFACE2_MEAN = (131.0912 / 255, 103.8827 / 255, 91.4953 / 255)
_PIXEL_SCALE = (1 / 255, 1 / 255, 1 / 255)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_SPECS = (
    ExtractorSpec("vggface", 224, _VGGFACE_MEAN, _PIXEL_SCALE, 4096, "vgg16", num_classes=2622),
    ExtractorSpec("vggface2", 224, _VGGFACE2_MEAN, _PIXEL_SCALE, 2048, "resnet50", num_classes=8631),
    ExtractorSpec("vgg16", 224, _IMAGENET_MEAN, _IMAGENET_STD, 4096, "vgg16", num_classes=1000),
    ExtractorSpec("facenet", 160, (0.5, 0.5, 0.5), (128 / 255,) * 3, 512, "torchscript"),
    ExtractorSpec("toy", 32, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 64, "toy"),
)
INIT_EXTRACTOR = "vggface"


def preprocess(img: torch.Tensor, spec: ExtractorSpec, value_range: str = UNIT) -> torch.Tensor:
    """Bring an image to the extractor's input contract.

    Converts to the unit range, replicates single-channel inputs to RGB,
    resizes bilinearly (differentiable) to a square ``input_resolution`` and
    applies per-channel normalization. Accepts (C,H,W) or (N,C,H,W).
    """
    check_image(img)
    single = img.dim() == 3
    x = convert_range(img[None] if single else img, value_range, UNIT)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    r = spec.input_resolution
    if tuple(x.shape[-2:]) != (r, r):
        x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)
    mean = x.new_tensor(spec.mean)[None, :, None, None]
    std = x.new_tensor(spec.std)[None, :, None, None]
    x = (x - mean) / std
    return x[0] if single else x


class _VGGDescriptor(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        from torchvision.models import vgg16

        net = vgg16(weights=None, num_classes=num_classes)
        self.features, self.avgpool = net.features, net.avgpool
        self.classifier = net.classifier
        self.head = net.classifier[:5]

    def forward(self, x):
        x = torch.flatten(self.avgpool(self.features(x)), 1)
        return self.head(x)


class _ResNetDescriptor(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        from torchvision.models import resnet50

        self.net = resnet50(weights=None, num_classes=num_classes)

    def forward(self, x):
        n = self.net
        x = n.maxpool(n.relu(n.bn1(n.conv1(x))))
        x = n.layer4(n.layer3(n.layer2(n.layer1(x))))
        return torch.flatten(n.avgpool(x), 1)


class ToyExtractorNet(nn.Module):
    def __init__(self, feature_dim: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, stride=2, padding=1, dtype=torch.float64)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1, dtype=torch.float64)
        self.fc = nn.Linear(16 * 8 * 8, feature_dim, dtype=torch.float64)

    def forward(self, x):
        x = torch.tanh(self.conv1(x))
        x = torch.tanh(self.conv2(x))
        return self.fc(torch.flatten(x, 1))


def init_toy_extractor(seed: int = TOY_EXTRACTOR_SEED, feature_dim: int = 64) -> ToyExtractorNet:
    net = ToyExtractorNet(feature_dim)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            std = 0.05 if name.endswith("bias") else 1.5 / math.sqrt(p[0].numel())
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
    return net


def save_toy_extractor(path: str | Path, seed: int = TOY_EXTRACTOR_SEED) -> Path:
    return save_checkpoint(
        path, init_toy_extractor(seed).state_dict(), format=TOY_EXTRACTOR_FORMAT,
        version=1, meta={"extractor_id": "toy", "feature_dim": 64, "seed": seed},
    )


class Extractor:
    """A spec bound to loaded, frozen weights. Safe for concurrent ``extract`` calls."""

    def __init__(self, spec: ExtractorSpec, network: nn.Module):
        self.spec = spec
        network.eval()
        for p in network.parameters():
            p.requires_grad_(False)
        self.network = network
        self.dtype = next(iter(network.parameters()), torch.zeros((), dtype=torch.float32)).dtype

    @property
    def extractor_id(self) -> str:
        return self.spec.extractor_id

    def extract(self, img: torch.Tensor, value_range: str = UNIT) -> FeatureVector:
        """Image (C,H,W) or batch -> FeatureVector with values (d,) or (N, d)."""
        x = preprocess(img, self.spec, value_range)
        single = x.dim() == 3
        out = self.network((x[None] if single else x).to(self.dtype))
        if self.spec.l2_normalize:
            out = F.normalize(out, dim=-1)
        if out.shape[-1] != self.spec.feature_dim:
            raise RegistryError(
                f"{self.extractor_id}: produced dim {out.shape[-1]}, spec says {self.spec.feature_dim}"
            )
        if not torch.isfinite(out.detach()).all():
            raise NonFiniteError(f"{self.extractor_id}: non-finite activations")
        return FeatureVector(out[0] if single else out, self.extractor_id)

    __call__ = extract


def build_extractor(spec: ExtractorSpec) -> Extractor:
    if spec.arch == "toy":
        if spec.weights:
            tensors, _ = load_checkpoint(spec.weights, format=TOY_EXTRACTOR_FORMAT, version=1)
            net = ToyExtractorNet(spec.feature_dim)
            net.load_state_dict(tensors)
        else:
            net = init_toy_extractor(feature_dim=spec.feature_dim)
        return Extractor(spec, net)

    path = spec.weights_path()
    if not path.exists():
        raise WeightsMissingError(f"{spec.extractor_id}: weights not found at {path}")
    if spec.arch == "torchscript":
        try:
            return Extractor(spec, torch.jit.load(str(path), map_location="cpu"))
        except RuntimeError as exc:
            raise CorruptCheckpointError(f"{path}: {exc}") from exc
    if spec.arch == "vgg16":
        net = _VGGDescriptor(spec.num_classes or 1000)
        target = net
    elif spec.arch == "resnet50":
        net = _ResNetDescriptor(spec.num_classes or 1000)
        target = net.net
    else:
        raise RegistryError(f"{spec.extractor_id}: unknown arch {spec.arch!r}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    try:
        target.load_state_dict(state.get("state_dict", state) if isinstance(state, dict) else state)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    return Extractor(spec, net)


@dataclass
class ExtractorRegistry:
    specs: dict[str, ExtractorSpec] = field(default_factory=dict)
    _loaded: dict[str, Extractor] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def register(self, spec: ExtractorSpec) -> None:
        if spec.extractor_id in self.specs:
            raise RegistryError(f"extractor id {spec.extractor_id!r} already registered")
        self.specs[spec.extractor_id] = spec

    def list_extractors(self) -> list[ExtractorSpec]:
        return list(self.specs.values())

    def spec(self, extractor_id: str) -> ExtractorSpec:
        try:
            return self.specs[extractor_id]
        except KeyError:
            raise RegistryError(f"unknown extractor id {extractor_id!r}") from None

    def get(self, extractor_id: str) -> Extractor:
        with self._lock:
            if extractor_id not in self._loaded:
                self._loaded[extractor_id] = build_extractor(self.spec(extractor_id))
            return self._loaded[extractor_id]

    def add(self, extractor: Extractor) -> None:
        """Register an already-built extractor (e.g. a custom network in tests)."""
        self.register(extractor.spec)
        self._loaded[extractor.extractor_id] = extractor

    def override(self, extractor_id: str, **changes) -> None:
        with self._lock:
            self.specs[extractor_id] = replace(self.spec(extractor_id), **changes)
            self._loaded.pop(extractor_id, None)


def default_registry(specs: Iterable[ExtractorSpec] = DEFAULT_SPECS) -> ExtractorRegistry:
    reg = ExtractorRegistry()
    for spec in specs:
        reg.register(spec)
    return reg


def list_extractors() -> list[ExtractorSpec]:
    return default_registry().list_extractors()


def registry_from_manifest(path: str | Path) -> ExtractorRegistry:
    """Default registry with entries overridden or added from a YAML manifest.

    The manifest maps extractor ids to fields of :class:`ExtractorSpec`;
    relative weight paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = yaml.safe_load(path.read_text()) or {}
    reg = default_registry()
    for eid, fields in entries.items():
        fields = dict(fields or {})
        if fields.get("weights"):
            w = Path(fields["weights"]).expanduser()
            fields["weights"] = str(w if w.is_absolute() else path.parent / w)
        for key in ("mean", "std"):
            if key in fields:
                fields[key] = tuple(float(v) for v in fields[key])
        if eid in reg.specs:
            reg.override(eid, **fields)
        else:
            reg.register(ExtractorSpec(extractor_id=eid, **fields))
    return reg
