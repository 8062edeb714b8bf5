"""Model / run configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError
from .nn import POINTNET_WIDTHS, effective_groups

TASKS = ("semantic-parts", "instances", "motion")
HEADS = {"semantic-parts": "semantic", "instances": "instance", "motion": "motion"}


@dataclass
class ModelConfig:
    task: str = "semantic-parts"
    dim: int = 3
    levels: int = 2
    widths: tuple = (64, 128)
    blocks: tuple = (1, 2)
    n_classes: int = 3
    embed_dim: int = 8
    window: int = 1
    in_features: int = 0
    sigma: tuple | None = None
    points_per_vertex: float = 30.0
    deform: bool = True
    offset_reg: bool = False
    offset_reg_weight: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 1.5
    lr: float = 1e-3
    weight_decay: float = 1e-4
    plateau_patience: int = 10
    plateau_window: int = 5
    plateau_interval: int = 10
    plateau_factor: float = 0.1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def shallow(cls, **kw):
        return cls(levels=2, widths=(64, 128), blocks=(1, 2), **kw)

    @classmethod
    def deep(cls, **kw):
        return cls(levels=3, widths=(64, 128, 256), blocks=(1, 2, 2), **kw)

    @property
    def head(self) -> str:
        return HEADS[self.task]

    @property
    def out_width(self) -> int:
        return self.embed_dim if self.head == "instance" else self.n_classes

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.widths) != self.levels or len(self.blocks) != self.levels:
            raise ConfigError("widths and blocks need one entry per level")
        if self.widths[0] != POINTNET_WIDTHS[-1]:
            raise ConfigError(f"level-0 width must equal the PointNet output width {POINTNET_WIDTHS[-1]}")
        for w in self.widths:
            effective_groups(w)
            effective_groups(2 * w)
        if self.window < 1:
            raise ConfigError("temporal window must be >= 1")
        if self.dim < 1:
            raise ConfigError("lattice dimension must be >= 1")
        if self.sigma is not None and (len(self.sigma) != self.dim or min(self.sigma) <= 0):
            raise ConfigError("sigma needs dim strictly positive entries")
        return self

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        for k in sorted(self.extra):
            lines.append(f"{k} = {self.extra[k]}")
        return "\n".join(lines) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_pairs(cls, pairs: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        cfg.extra = dict(cfg.extra)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in pairs.items():
            key = key.replace("-", "_")
            if key not in types or key == "extra":
                cfg.extra[key] = raw
                continue
            setattr(cfg, key, _parse(key, raw, getattr(cls(), key)))
        return cfg


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, raw, default):
    raw = str(raw).strip()
    try:
        if key == "sigma":
            return None if raw.lower() == "none" else tuple(float(x) for x in raw.split())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_pairs(text: str) -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, base=None) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_pairs(read_pairs(fh.read()), base)
