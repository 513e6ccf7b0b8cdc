"""Run configuration: a flat key=value file format with typed overrides.

A config file is plain text, one ``key=value`` per line, ``#`` comments.
Tracker and mapper settings use dotted keys (``tracker.scale_mode=plane``,
``mapper.mapping_iters=150``); everything else is a top-level key. The same
``key=value`` strings drive CLI ``--set`` overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .mapper import MapperConfig
from .synthetic import SCENE_PRESETS
from .tracker import TrackerConfig

__all__ = ["ConfigError", "RunConfig", "load_run_config", "config_to_text", "parse_config_text"]

DATASET_KINDS = ("tum", "generic", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything one SLAM run needs, resolvable from text.

    ``dataset`` is ``tum``, ``generic`` (both need ``dataset_root``) or
    ``synthetic:<preset>``. ``max_frames`` of 0 means the whole sequence.
    Ablation switches live on the nested configs (``tracker.scale_mode``,
    ``tracker.metric_mode``, ``tracker.init_mode``, ``mapper.offset_frozen``).
    """

    dataset: str = "synthetic:corridor"
    dataset_root: str = ""
    output_dir: str = "runs/latest"
    seed: int = 0
    worker_count: int = 1
    max_frames: int = 0
    stride: int = 1
    gt_prior_frame0: bool = False
    resume: bool = False
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)


_SECTIONS = {"tracker": TrackerConfig, "mapper": MapperConfig}
_TOP_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in _SECTIONS}
_SECTION_FIELDS = {
    name: {f.name: f for f in dataclasses.fields(cls)} for name, cls in _SECTIONS.items()
}

_BOOL_WORDS = {
    "true": True, "1": True, "yes": True, "on": True,
    "false": False, "0": False, "no": False, "off": False,
}


def _coerce(raw: str, type_name: str, key: str):
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key=value lines into an ordered dict, last assignment wins."""
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        items[key.strip()] = value.strip()
    return items


def _build(items: Mapping[str, str]) -> RunConfig:
    top: dict = {}
    nested: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in items.items():
        section, _, name = key.partition(".")
        if section in _SECTIONS and name:
            fields = _SECTION_FIELDS[section]
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            nested[section][name] = _coerce(raw, fields[name].type, key)
        elif key in _TOP_FIELDS:
            top[key] = _coerce(raw, _TOP_FIELDS[key].type, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        sub = {name: cls(**nested[name]) for name, cls in _SECTIONS.items()}
        return RunConfig(**top, **sub)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _validate(cfg: RunConfig) -> None:
    kind, _, preset = cfg.dataset.partition(":")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset must be one of {DATASET_KINDS}, got {cfg.dataset!r}")
    if kind == "synthetic":
        if preset not in SCENE_PRESETS:
            raise ConfigError(
                f"unknown synthetic preset {preset!r}; have {sorted(SCENE_PRESETS)}"
            )
    else:
        if not cfg.dataset_root:
            raise ConfigError(f"dataset {cfg.dataset!r} requires dataset_root")
        if not Path(cfg.dataset_root).is_dir():
            raise ConfigError(f"dataset_root does not exist: {cfg.dataset_root}")
    if cfg.worker_count < 1:
        raise ConfigError(f"worker_count must be >= 1, got {cfg.worker_count}")
    if cfg.max_frames < 0:
        raise ConfigError(f"max_frames must be >= 0, got {cfg.max_frames}")
    if cfg.stride < 1:
        raise ConfigError(f"stride must be >= 1, got {cfg.stride}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")


def load_run_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    **direct,
) -> RunConfig:
    """Assemble a validated RunConfig.

    Precedence, lowest to highest: file at ``path``, ``direct`` keyword
    values (the CLI's dedicated flags), then ``overrides`` entries of the
    form ``key=value``.
    """
    items: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        items.update(parse_config_text(p.read_text(), source=str(p)))
    for key, value in direct.items():
        if value is not None:
            items[key] = str(value)
    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(f"--set expects key=value, got {entry!r}")
        key, _, value = entry.partition("=")
        items[key.strip()] = value.strip()
    cfg = _build(items)
    _validate(cfg)
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Serialize every field; parsing the result reproduces ``cfg`` exactly."""
    lines = []
    for name in _TOP_FIELDS:
        lines.append(f"{name}={_format_value(getattr(cfg, name))}")
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for name in _SECTION_FIELDS[section]:
            lines.append(f"{section}.{name}={_format_value(getattr(sub, name))}")
    return "\n".join(lines) + "\n"
