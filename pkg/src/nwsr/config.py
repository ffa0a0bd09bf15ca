"""Flat ``key = value`` run configuration for training.

Lines starting with ``#`` and blank lines are ignored. Lists are comma
separated. Relative paths resolve against the config file's directory.

Example::

    train_dir = data/train
    val_dir = data/val
    test_dir = data/test
    blocks = 4
    filters = 16
    population = 6
    iterations = 20
    perturbation_interval = 5
    lr_grid = 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7
    seed = 0
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from nwsr.train import LR_GRID, PBTConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train_dir: str = ""
    val_dir: str = ""
    test_dir: str = ""
    blocks: int = 16
    filters: int = 64
    nw_depth: int = 3
    population: int = 6
    iterations: int = 100
    perturbation_interval: int = 20
    epochs_per_iteration: int = 1
    batch_size: int = 16
    lr_grid: tuple = LR_GRID
    perturb_factors: tuple = (0.8, 1.25)
    sigma: float | None = None  # NW GAUSS bandwidth; None -> 0.7 * mean spacing
    dtype: str = "float64"
    seed: int = 0
    workers: int = 1

    def pbt(self) -> PBTConfig:
        return PBTConfig(
            population=self.population,
            iterations=self.iterations,
            perturbation_interval=self.perturbation_interval,
            lr_grid=tuple(self.lr_grid),
            epochs_per_iteration=self.epochs_per_iteration,
            perturb_factors=tuple(self.perturb_factors),
            batch_size=self.batch_size,
            seed=self.seed,
            dtype=self.dtype,
            workers=self.workers,
        )

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f for f in fields(RunConfig)}
_PATHS = ("train_dir", "val_dir", "test_dir")


def _convert(key, raw):
    default = getattr(RunConfig(), key)
    try:
        if key in ("lr_grid", "perturb_factors"):
            vals = tuple(float(x) for x in raw.split(",") if x.strip())
            if not vals:
                raise ValueError("empty list")
            return vals
        if key == "sigma":
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def parse_config(text, base_dir=None) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    if base_dir is not None:
        for key in _PATHS:
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    cfg = RunConfig(**values)
    try:
        cfg.pbt()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
