"""Experiment configuration files and checkpoints.

Configs are INI files with up to three sections, each mapping onto a
dataclass::

    [model]   ModelConfig fields (pattern, window, fusion, dims, ...)
    [train]   TrainConfig fields (lr, weight_decay, epochs, distill, seed, ...)
    [data]    SyntheticTask fields (kind, samples, noise, seed, ...)

Omitted keys keep their defaults; unknown sections or keys are rejected with
the list of valid names.

A checkpoint directory holds the MOMA tensor manifest, a copy of the config
(``config.cfg``) and the SHA-256 of the frozen tensors (``frozen.sha256``).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from moma.core.serialize import digest, load_manifest, save_manifest
from moma.errors import ConfigError, ContractError
from moma.harness.data import SyntheticTask
from moma.model import ModelConfig, MoMaModel
from moma.train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SyntheticTask}
CONFIG_FILE = "config.cfg"
HASH_FILE = "frozen.sha256"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticTask = field(default_factory=SyntheticTask)

    def task(self) -> SyntheticTask:
        """Data settings with frame count and image size taken from the model."""
        return dataclasses.replace(self.data, frames=self.model.frames, image=self.model.image)


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(":", ",").split(","))
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _build(section: str, cls, items: dict[str, str]):
    defaults = cls()
    valid = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(items) - set(valid))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)} in [{section}]; "
                          f"valid keys: {', '.join(valid)}")
    values = {k: _convert(section, k, v, getattr(defaults, k)) for k, v in items.items()}
    return dataclasses.replace(defaults, **values)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    unknown = sorted(set(cp.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}; valid sections: {', '.join(SECTIONS)}")
    parts = {}
    for name, cls in SECTIONS.items():
        items = dict(cp.items(name)) if cp.has_section(name) else {}
        parts[name] = _build(name, cls, items)
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    return parse_config(path.read_text(), str(path))


def _render_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines.extend(f"{f.name} = {_render_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj))
        lines.append("")
    return "\n".join(lines)


def save_checkpoint(directory, model: MoMaModel, cfg: ExperimentConfig) -> Path:
    directory = Path(directory)
    tensors, roles = model.state()
    save_manifest(directory, tensors, roles)
    (directory / CONFIG_FILE).write_text(render_config(cfg))
    (directory / HASH_FILE).write_text(model.frozen_digest() + "\n")
    return directory


def load_checkpoint(directory) -> tuple[MoMaModel, ExperimentConfig]:
    """Rebuild the model from a checkpoint, refusing one whose frozen tensors were altered."""
    directory = Path(directory)
    if not (directory / CONFIG_FILE).is_file():
        raise ConfigError(f"checkpoint not found: {directory}")
    cfg = load_config(directory / CONFIG_FILE)
    tensors, roles = load_manifest(directory)
    frozen = {k: v for k, v in tensors.items() if roles[k] == "frozen"}
    recorded = (directory / HASH_FILE).read_text().strip()
    if digest(frozen) != recorded:
        raise ContractError(f"frozen tensors in {directory} do not match the recorded hash")
    model = MoMaModel(cfg.model, seed=cfg.train.seed)
    model.load_state(tensors)
    return model, cfg
