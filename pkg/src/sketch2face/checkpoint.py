"""Weight files with plain-text manifest sidecars.

A checkpoint is two files: ``<name>`` holding tensors (safetensors layout) and
``<name>.manifest`` with one ``key: value`` pair per line. The manifest always
carries ``format``, ``version`` and ``sha256`` of the weight file.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .errors import CheckpointVersionError, CorruptCheckpointError, MissingCheckpointError

MANIFEST_SUFFIX = ".manifest"


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str | Path, fields: Mapping[str, object]) -> None:
    lines = []
    for key, value in fields.items():
        text = str(value)
        if "\n" in text or ":" in key:
            raise ValueError(f"manifest field {key!r} is not single-line")
        lines.append(f"{key}: {text}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"manifest not found: {path}")
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise CorruptCheckpointError(f"{path}:{lineno}: expected 'key: value'")
        fields[key.strip()] = value.strip()
    return fields


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    *,
    format: str,
    version: int,
    meta: Mapping[str, object] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file({k: v.detach().contiguous().cpu() for k, v in tensors.items()}, str(path))
    fields: dict[str, object] = {"format": format, "version": version}
    fields.update(meta or {})
    fields["sha256"] = file_sha256(path)
    write_manifest(manifest_path(path), fields)
    return path


def check_manifest(path: str | Path, *, format: str, version: int) -> dict[str, str]:
    """Validate existence, format name and version; return the manifest fields."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    fields = read_manifest(manifest_path(path))
    if fields.get("format") != format:
        raise CheckpointVersionError(
            f"{path}: format {fields.get('format')!r}, expected {format!r}"
        )
    if fields.get("version") != str(version):
        raise CheckpointVersionError(
            f"{path}: version {fields.get('version')!r}, expected {version}"
        )
    return fields


def load_checkpoint(
    path: str | Path, *, format: str, version: int
) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    fields = check_manifest(path, format=format, version=version)
    digest = fields.get("sha256")
    if digest is not None and digest != file_sha256(path):
        raise CorruptCheckpointError(f"{path}: sha256 does not match manifest")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable weights ({exc})") from exc
    return tensors, fields
