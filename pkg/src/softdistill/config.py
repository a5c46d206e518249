"""Experiment configuration: ``[section]`` headers with ``key = value`` lines.

Every key is declared in :data:`SCHEMA` with a type and a default; unknown
sections or keys are rejected so that typos fail loudly. ``resolved_text``
renders a fully-defaulted config that parses back to an identical object.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass
from pathlib import Path

REQUIRED = object()


class ConfigError(ValueError):
    """Malformed, incomplete or mistyped configuration."""


def _int(s: str) -> int:
    return int(s.strip())


def _float(s: str) -> float:
    return float(s.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item):
    def parse(s: str):
        s = s.strip()
        if not s:
            return []
        return [item(p) for p in s.split(",")]

    parse.__name__ = f"list[{item.__name__.strip('_')}]"
    return parse


def _str(s: str) -> str:
    return s.strip()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return ""
    return str(value)


_TRAIN_KEYS = {
    "base_lr": (_float, 0.1),
    "momentum": (_float, 0.9),
    "batch_size": (_int, 64),
    "eval_every": (_int, 1),
}

# None as a default means "derived from another key at resolve time"
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (_int, REQUIRED),
        "output_dir": (_str, "runs/default"),
        "record_wall_clock": (_bool, False),
    },
    "dataset": {
        "num_classes": (_int, 10),
        "extra_classes": (_int, 10),
        "dim": (_int, 32),
        "mean_scale": (_float, 0.65),
        "noise_std": (_float, 1.0),
        "components_per_class": (_int, 1),
        "n_train": (_int, 2000),
        "n_val": (_int, 2000),
        "n_gallery": (_int, 20000),
        "duplicate_fraction": (_float, 0.01),
    },
    "teacher": {
        "hidden": (_list(_int), [256, 256]),
        **_TRAIN_KEYS,
        "weight_decay": (_float, 5e-4),
        "epochs": (_int, 100),
        "warmup_epochs": (_int, 5),
        "max_val_loss": (_float, 0.8),
        "checkpoint": (_str, ""),
    },
    "student": {
        "hidden": (_list(_int), [32]),
    },
    "curation": {
        "similarity_threshold": (_float, 0.995),
        "k": (_int, 400),
    },
    "distill": {
        "loss": (_str, "js_div"),
        **_TRAIN_KEYS,
        "weight_decay": (_float, 1e-4),
        "epochs": (_int, 120),
        "warmup_epochs": (_int, 5),
        "override_quality": (_bool, False),
    },
    "finetune": {
        "epochs": (_int, 10),
        "base_lr": (_float, None),
        "weight_decay": (_float, None),
        "momentum": (_float, 0.9),
        "batch_size": (_int, 64),
        "eval_every": (_int, 1),
    },
    "sweep": {
        "weight_decay": (_list(_float), []),
        "teacher_checkpoint": (_list(_str), []),
        "unlabeled_volume": (_list(_int), []),
        "epochs": (_list(_int), []),
        "seeds": (_list(_int), None),
    },
}

REQUIRED_SECTIONS = ("dataset",)


@dataclass
class ExperimentConfig:
    sections: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.sections[section][key]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.sections == other.sections

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.sections["run"]["output_dir"])

    def sweep_axes(self) -> dict[str, list]:
        return {k: v for k, v in self.sections["sweep"].items() if k != "seeds" and v}

    def resolved_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self.sections[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings, re-validating the result."""
        raw = {s: {k: _fmt(v) for k, v in keys.items()} for s, keys in self.sections.items()}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            dotted, value = item.split("=", 1)
            if "." not in dotted:
                raise ConfigError(f"override key {dotted!r} must be section.key")
            section, key = (p.strip() for p in dotted.split(".", 1))
            _check_known(section, key)
            raw[section][key] = value.strip()
        return _resolve(raw)


def _check_known(section: str, key: str | None = None) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key is not None and key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _resolve(raw: dict[str, dict[str, str]]) -> ExperimentConfig:
    out: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        values = {}
        for key, (conv, default) in keys.items():
            if key in given and given[key] != "":
                try:
                    values[key] = conv(given[key])
                except ValueError:
                    raise ConfigError(
                        f"[{section}] {key}: expected {conv.__name__.strip('_')}, got {given[key]!r}"
                    ) from None
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{section}]")
            else:
                values[key] = copy.deepcopy(default)
        out[section] = values

    ft, ds = out["finetune"], out["distill"]
    if ft["base_lr"] is None:
        ft["base_lr"] = 0.1 * ds["base_lr"]
    if ft["weight_decay"] is None:
        ft["weight_decay"] = ds["weight_decay"]
    if out["sweep"]["seeds"] is None or not out["sweep"]["seeds"]:
        out["sweep"]["seeds"] = [out["run"]["seed"]]
    return ExperimentConfig(out)


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keep key case so typos are reported verbatim
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}".splitlines()[0]) from None
    raw: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        _check_known(section)
        raw[section] = {}
        for key, value in cp.items(section):
            _check_known(section, key)
            raw[section][key] = value
    for section in REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigError(f"missing required section [{section}]")
    return _resolve(raw)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())
