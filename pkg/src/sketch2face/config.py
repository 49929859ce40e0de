"""YAML configuration with one section per stage.

Relative paths are resolved against the config file's directory. Every key
has a default, so an empty file is a valid (pretrained-scale) config.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .extractors import INIT_EXTRACTOR
from .f2w import F2WConfig
from .inversion import InversionConfig
from .manifold import HOGFDConfig


@dataclass
class PathsConfig:
    generator: str | None = None
    generator_kind: str = "pretrained"
    extractor_manifest: str | None = None
    init_extractor: str = INIT_EXTRACTOR
    mapper: str | None = None
    hogfd: str | None = None


@dataclass
class Config:
    paths: PathsConfig = field(default_factory=PathsConfig)
    f2w: F2WConfig = field(default_factory=F2WConfig)
    hogfd: HOGFDConfig = field(default_factory=HOGFDConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p).expanduser()
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "f2w": asdict(self.f2w),
            "hogfd": asdict(self.hogfd),
            "inversion": self.inversion.to_dict(),
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> Config:
    data = dict(data or {})
    unknown = set(data) - {"paths", "f2w", "hogfd", "inversion"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return Config(
            paths=_section(PathsConfig, data.get("paths"), "paths"),
            f2w=_section(F2WConfig, data.get("f2w"), "f2w"),
            hogfd=_section(HOGFDConfig, data.get("hogfd"), "hogfd"),
            inversion=InversionConfig.from_dict(data.get("inversion") or {}),
            base_dir=base_dir,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent.resolve())


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in data:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        data[section][name] = yaml.safe_load(raw)
    return config_from_dict(data, cfg.base_dir)
