"""Flat ``key = value`` configuration covering every tunable of a run."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .database import DatabaseConfig
from .geometry import GeometryConfig
from .loop import LoopConfig
from .scoring import ScoringConfig

_SECTIONS = ("scoring", "loop", "geometry", "database")


def _coerce(value: str, typ):
    if isinstance(typ, str) and "None" in typ and value.strip() in ("", "None", "auto"):
        return None
    typ = typ.split("|")[0].strip() if isinstance(typ, str) else typ
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


@dataclass(frozen=True)
class Settings:
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    database: DatabaseConfig = field(default_factory=DatabaseConfig)

    @classmethod
    def keys(cls) -> dict[str, list[tuple[str, object]]]:
        """Flat key -> [(section, field type)]; a key may feed several sections."""
        out: dict[str, list] = {}
        for sec in _SECTIONS:
            for f in fields(cls.__dataclass_fields__[sec].default_factory()):
                out.setdefault(f.name, []).append((sec, f.type))
        return out

    def with_values(self, values: dict[str, object]) -> "Settings":
        known = self.keys()
        updates: dict[str, dict] = {s: {} for s in _SECTIONS}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            for sec, typ in known[key]:
                updates[sec][key] = _coerce(raw, typ) if isinstance(raw, str) else raw
        return replace(self, **{s: replace(getattr(self, s), **u) for s, u in updates.items() if u})

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {}
        for sec in _SECTIONS:
            flat.update(dataclasses.asdict(getattr(self, sec)))
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_flat().items()))

    @classmethod
    def loads(cls, text: str) -> "Settings":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        cp.optionxform = str
        cp.read_string("[bowg]\n" + text)
        return cls().with_values(dict(cp["bowg"]))

    @classmethod
    def load(cls, path: str | Path) -> "Settings":
        return cls.loads(Path(path).read_text())
