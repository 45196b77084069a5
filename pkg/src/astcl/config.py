"""Training configuration, profiles, and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

FULL_PROFILE: dict = {}

# Scaled down so the acceptance experiments finish on one CPU core.
DESK_PROFILE = {
    "dim": 32,
    "layers": 2,
    "batch_size": 16,
    "steps": 500,
    "max_depth": 8,
    "lr": 1e-2,
    "activation": "tanh",
}

PROFILES = {"full": FULL_PROFILE, "desk": DESK_PROFILE}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dim: int = 768
    layers: int = 4
    max_depth: int = 30
    max_paths: int = 200
    max_nodes: int = 1000
    lr: float = 1e-4
    batch_size: int = 2048
    steps: int = 1000
    margin: float = 1.0
    triplets_per_graph: int = 64
    activation: str = "relu"
    seed: int = 0
    ngram_sizes: tuple[int, ...] = (3, 4)
    hash_seed: int = 0
    no_nep: bool = False
    no_nro: bool = False
    no_self_attention: bool = False
    no_residual: bool = False

    def __post_init__(self):
        self.ngram_sizes = tuple(int(k) for k in self.ngram_sizes)
        if self.activation not in ("identity", "relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.dim < 2 or self.layers < 0 or self.max_depth < 0:
            raise ConfigError("dim must be >= 2, layers and max_depth >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.triplets_per_graph < 0:
            raise ConfigError("batch_size must be >= 1, steps and triplets_per_graph >= 0")

    @property
    def num_levels(self) -> int:
        """Classes of the level predictor: every level 0..max_depth."""
        return self.max_depth + 1

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}")
        return cls.from_dict({**PROFILES[name], **overrides})

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in values.items()})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ngram_sizes"] = list(self.ngram_sizes)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def coerce(f: dataclasses.Field, raw):
    """Convert a string from a config file or CLI flag to the field's type."""
    if not isinstance(raw, str):
        return raw
    default = f.default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r}") from None
    return raw.strip()


def read_flat_config(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_flat_config(values: dict) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
