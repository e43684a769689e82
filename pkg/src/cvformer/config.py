"""Run configuration: the model, training and contrastive settings plus run mode.

Config files are UTF-8 INI text with one section per settings type::

    [ModelConfig]
    d_model = 64

    [TrainConfig]
    lambda = 0.1

    [RunConfig]
    manifest = data/manifest.txt
    enable_cross_view = false

Missing keys keep their defaults; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ingest import ConfigError
from .model import ModelConfig
from .training import ContrastiveConfig, TrainConfig

# the view switches live on RunConfig so there is a single source of truth
_VIEW_FIELDS = ("use_roi", "use_conn", "use_cross")
_KEY_ALIASES = {"TrainConfig": {"lambda": "lam"}}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    manifest: str | None = None
    out: str | None = None
    enable_cross_view: bool = True
    enable_roi_view: bool = True
    enable_conn_view: bool = True
    pretrain_init: str | None = None

    def __post_init__(self):
        if not (self.enable_roi_view or self.enable_conn_view):
            raise ConfigError("at least one view must be enabled")
        if self.enable_cross_view and not (self.enable_roi_view and self.enable_conn_view):
            raise ConfigError("cross-view fusion needs both views enabled")
        self.model = dataclasses.replace(
            self.model,
            use_roi=self.enable_roi_view,
            use_conn=self.enable_conn_view,
            use_cross=self.enable_cross_view,
        )


def _parse_value(raw: str, default, where: str):
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text or None


def _section_values(parser: configparser.ConfigParser, section: str, defaults) -> dict:
    if not parser.has_section(section):
        return {}
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(defaults)
             if f.name not in ("model", "train", "contrastive")}
    aliases = _KEY_ALIASES.get(section, {})
    values = {}
    for key, raw in parser.items(section):
        name = aliases.get(key, key)
        if section == "ModelConfig" and name in _VIEW_FIELDS:
            raise ConfigError(f"[{section}] {key}: set views with enable_*_view under [RunConfig]")
        if name not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        values[name] = _parse_value(raw, known[name], f"[{section}] {key}")
    return values


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` maps section names (``"ModelConfig"``, ``"TrainConfig"``,
    ``"ContrastiveConfig"``, ``"RunConfig"``) to field values.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep M, P, L as written
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - {"ModelConfig", "TrainConfig", "ContrastiveConfig", "RunConfig"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    overrides = overrides or {}
    base = RunConfig()
    merged = {}
    for section, defaults in (("ModelConfig", base.model), ("TrainConfig", base.train),
                              ("ContrastiveConfig", base.contrastive), ("RunConfig", base)):
        merged[section] = _section_values(parser, section, defaults) | overrides.get(section, {})
    try:
        return RunConfig(
            model=ModelConfig(**merged["ModelConfig"]),
            train=TrainConfig(**merged["TrainConfig"]),
            contrastive=ContrastiveConfig(**merged["ContrastiveConfig"]),
            **merged["RunConfig"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_config(run: RunConfig, path: str | Path) -> Path:
    """Write the effective config in the same format :func:`load_run_config` reads."""
    sections = {
        "ModelConfig": {k: v for k, v in dataclasses.asdict(run.model).items() if k not in _VIEW_FIELDS},
        "TrainConfig": {("lambda" if k == "lam" else k): v for k, v in dataclasses.asdict(run.train).items()},
        "ContrastiveConfig": dataclasses.asdict(run.contrastive),
        "RunConfig": {f.name: getattr(run, f.name) for f in dataclasses.fields(run)
                      if f.name not in ("model", "train", "contrastive")},
    }
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format(value)}" for key, value in values.items())
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
