"""Flat ``key = value`` run configuration.

Keys::

    tile_size    tile edge in pixels (default 32)
    max_tiles    tile budget per image (default 8)
    branch       small | large (default small)
    vrc.enabled  on | off (default off)
    vrc.eps      loss-ratio tolerance for labelling (default 1.05)
    quant.group  quantization group size (default 32)

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .errors import ParameterError

_BOOL = {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}


@dataclass(frozen=True)
class RunConfig:
    tile_size: int = 32
    max_tiles: int = 8
    branch: str = "small"
    vrc_enabled: bool = False
    vrc_eps: float = 1.05
    quant_group: int = 32

    def __post_init__(self):
        if self.tile_size < 8:
            raise ParameterError(f"tile_size must be >= 8, got {self.tile_size}")
        if self.max_tiles < 1:
            raise ParameterError(f"max_tiles must be >= 1, got {self.max_tiles}")
        if self.branch not in ("small", "large"):
            raise ParameterError(f"branch must be small or large, got {self.branch!r}")
        if self.vrc_eps < 1.0:
            raise ParameterError(f"vrc.eps must be >= 1, got {self.vrc_eps}")
        if self.quant_group < 1:
            raise ParameterError(f"quant.group must be >= 1, got {self.quant_group}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        lines = [f"{k.replace('_', '.', 1) if k.startswith(('vrc_', 'quant_')) else k} = {_fmt(v)}"
                 for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return str(v)


_KEYS = {
    "tile_size": ("tile_size", int),
    "max_tiles": ("max_tiles", int),
    "branch": ("branch", str),
    "vrc.enabled": ("vrc_enabled", "bool"),
    "vrc.eps": ("vrc_eps", float),
    "quant.group": ("quant_group", int),
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"config line {n}: expected key = value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ParameterError(f"config line {n}: unknown key {key!r}; known keys {sorted(_KEYS)}")
        field_name, kind = _KEYS[key]
        try:
            if kind == "bool":
                values[field_name] = _BOOL[val.lower()]
            else:
                values[field_name] = kind(val)
        except (KeyError, ValueError):
            raise ParameterError(f"config line {n}: bad value {val!r} for {key}") from None
    return replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
