"""Run configuration: typed key=value files with presets and overrides.

Resolution order is preset < config file < command-line overrides. Unknown
keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


def _floats(text):
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    return tuple(math.inf if t.strip().lower() == "inf" else float(t)
                 for t in str(text).split(",") if t.strip())


def _ints(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _strs(text):
    if isinstance(text, (tuple, list)):
        return tuple(str(x) for x in text)
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


@dataclass(frozen=True)
class RunConfig:
    preset: str = "full"
    cutoff: int = 130
    kappas: tuple = (1.0, 2.0, 5.0, math.inf)
    state_start: int = 50
    state_stop: int = 1050
    resolution: int = 64
    kind: str = "density"
    split_seed: int = 0
    # network and training
    conv1_filters: int = 16
    conv2_filters: int = 32
    conv1_kernel: int = 3
    conv2_kernel: int = 3
    padding: str = "same"
    dense_width: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    init_seed: int = 0
    shuffle_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    # experiments
    mass_kappas: tuple = (1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 4.0, 5.0, 10.0, math.inf)
    alphas: tuple = (0.25, 0.5, 0.8, 1.0, 1.25, 2.0, 4.0)
    sigmas: tuple = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
    noise_mode: str = "multiplicative"
    noise_G: float = 1.0
    noise_seed: int = 0
    random_count: int = 1000
    zero_fractions: tuple = (0.0, 0.35)
    distributions: tuple = ("gaussian", "laplace", "uniform")
    random_seed: int = 0
    loo_singles: int = 40
    loo_blocks: int = 20
    loo_block_size: int = 10
    loo_seed: int = 0
    loo_epochs: int = 5
    loo_test_kappa: float = 5.0
    loo_test_energy: float = 534.86
    attack_step: float = 1e-3
    attack_iters: int = 200
    # paths
    work_dir: str = "."

    def __post_init__(self):
        if self.kind not in ("density", "psi"):
            raise ConfigError(f"kind must be density or psi, got {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError("padding must be same or valid")
        if self.noise_mode not in ("multiplicative", "additive"):
            raise ConfigError("noise_mode must be multiplicative or additive")
        if not 0 <= self.state_start < self.state_stop:
            raise ConfigError("need 0 <= state_start < state_stop")
        if self.cutoff < 3:
            raise ConfigError("cutoff must be >= 3")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def subset(self, *keys) -> dict:
        return {k: getattr(self, k) for k in keys}


PRESETS = {
    "fast": dict(preset="fast", cutoff=60, state_start=50, state_stop=300, seeds=(0, 1)),
    "ci": dict(preset="ci", cutoff=80, state_start=50, state_stop=300, seeds=(0, 1)),
    "full": dict(preset="full", cutoff=130, state_start=50, state_stop=1050,
                 seeds=(0, 1, 2, 3, 4)),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if isinstance(default, tuple):
            if default and isinstance(default[0], str):
                return _strs(value)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return _ints(value)
            return _floats(value)
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return math.inf if str(value).strip().lower() == "inf" else float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve(preset: str | None = None, path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
    if path is not None:
        with open(path) as fh:
            file_values = parse_text(fh.read())
        if "preset" in file_values and preset is None:
            values = {**PRESETS.get(file_values["preset"], {}), **values}
        values.update(file_values)
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v)
    return replace(RunConfig(), **values)


def dump(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.as_dict().items():
        if isinstance(v, tuple):
            v = ",".join("inf" if isinstance(x, float) and math.isinf(x) else str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
