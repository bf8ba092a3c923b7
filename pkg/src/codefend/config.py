"""Layered key-value configuration: defaults < file < environment < flags.

Keys are `section.key`; the environment override prefix is CODEFEND_
(CODEFEND_PURIFIER_EPOCHS maps to purifier.epochs). Unknown keys are hard
errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import CodefendError

ENV_PREFIX = "CODEFEND_"

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.workers": 1,
    "data.image_size": 32,
    "data.channels": 3,
    "attack.epsilon": 8.0 / 255.0,
    "attack.steps": 10,
    "attack.step_size": 2.0 / 255.0,
    "attack.targeted": False,
    "attack.target_text": "",
    "purifier.learning_rate": 5e-5,
    "purifier.batch_size": 4,
    "purifier.epochs": 4000,
    "purifier.schedule_steps": 50,
    "purifier.width": 32,
    "purifier.instruction": "Remove the adversarial noise while preserving original image details",
    "sampler.steps": 10,
    "sampler.t_start_frac": 0.3,
    "sampler.image_guidance": 1.5,
    "sampler.text_guidance": 7.5,
    "promptopt.rounds": 3,
    "promptopt.beam_width": 4,
    "promptopt.candidates_per_position": 16,
    "promptopt.trigger_length": 8,
    "promptopt.delta_bound": 2.0,
    "promptopt.vocab_size": 64,
    "prefix.learning_rate": 2e-4,
    "prefix.batch_size": 4,
    "prefix.epochs": 100,
    "prefix.rank": 8,
    "prefix.alpha": 16.0,
    "prefix.template": "<s>[INST] Add prefix to: {question} [/INST] {prefix}</s>",
    "decode.max_length": 64,
    "decode.strategy": "greedy",
    "eval.caption_prompt": "Describe the image.",
    "victim.target_text": "the secret password is mango",
}


class ConfigError(CodefendError):
    pass


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as boolean")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as integer") from exc
    if isinstance(default, float):
        try:
            if "/" in raw:  # 8/255-style pixel budgets
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as float") from exc
    return raw


class Config:
    def __init__(self, values: dict[str, object]):
        self._values = values

    def __getitem__(self, key: str):
        return self._values[key]

    def get(self, key: str, default=None):
        return self._values.get(key, default)

    def as_dict(self) -> dict[str, object]:
        return dict(sorted(self._values.items()))

    def dump_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def parse_config_file(path: Path | str) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    raw: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {line_no}: expected 'section.key = value'")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _env_overrides() -> dict[str, str]:
    out: dict[str, str] = {}
    for var, value in os.environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        if "_" not in rest:
            raise ConfigError(f"environment variable {var} does not name a section.key")
        section, key = rest.split("_", 1)
        out[f"{section}.{key}"] = value
    return out


def load_config(
    config_file: Path | str | None = None,
    overrides: dict[str, str] | None = None,
) -> Config:
    """Resolve the effective configuration; a flag always beats a file."""
    values: dict[str, object] = dict(DEFAULTS)
    layers: list[dict[str, str]] = []
    if config_file is not None:
        layers.append(parse_config_file(config_file))
    layers.append(_env_overrides())
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return Config(values)
