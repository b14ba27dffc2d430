"""Layered key=value configuration with includes.

A file holds ``key = value`` lines; ``#`` starts a comment and
``include = other.cfg`` pulls in another file (relative to the including
one) whose keys the later lines may override. Dotted keys address nested
parameters, e.g. ``timing.tCCDL = 6`` or ``contention.background_util = 0.5``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .addrmap import AddressMapping, PimLevel, load_mapping
from .energy import EnergyParams
from .errors import ConfigError
from .gemm import Mode
from .timing import ContentionProfile, TimingParams

_TOP = {"mapping", "level", "mode", "seed", "workload", "fidelity", "subsets", "spread"}
_TOPOLOGY = {"scratchpad", "simd_width", "pipeline_depth"}
_WORKLOAD = {"batch", "seq_len", "cpu_other_ns"}


def _number(text: str):
    try:
        return int(text, 0)
    except ValueError:
        return float(text)


def read_config(path: "str | Path", _seen: tuple = ()) -> dict[str, str]:
    """Flatten a config file and its includes into one key -> raw string dict."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{no}: empty key or value")
        if key == "include":
            out.update(read_config(path.parent / value, _seen + (path,)))
        else:
            out[key] = value
    return out


@dataclass
class SimConfig:
    mapping_name: str = "skl_ddr4"
    level: PimLevel | None = None   # None lets the planner choose
    mode: Mode = Mode.STP
    seed: int = 0
    timing: TimingParams = field(default_factory=TimingParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    contention: ContentionProfile = field(default_factory=ContentionProfile)
    topology: dict = field(default_factory=dict)
    workload: str | None = None
    workload_args: dict = field(default_factory=dict)
    fidelity: str = "simulate"      # or "estimate"
    subsets: tuple[str, ...] = ("all", "half")
    spread: bool = True

    def mapping(self) -> AddressMapping:
        try:
            return load_mapping(self.mapping_name)
        except Exception as exc:
            raise ConfigError(f"mapping {self.mapping_name!r}: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "mapping": self.mapping_name,
            "level": self.level.value if self.level else None,
            "mode": self.mode.value,
            "seed": self.seed,
            "timing": asdict(self.timing),
            "energy": {"in_device_pj_per_bit": self.energy.in_device_pj_per_bit,
                       "off_chip_pj_per_bit": self.energy.off_chip_pj_per_bit,
                       "simd_nj_per_op": self.energy.simd_nj_per_op,
                       "scratchpad_nj": {k.value: v for k, v in self.energy.scratchpad_nj.items()}},
            "contention": asdict(self.contention),
            "topology": dict(self.topology),
            "workload": self.workload,
            "workload_args": dict(self.workload_args),
            "fidelity": self.fidelity,
            "subsets": list(self.subsets),
            "spread": self.spread,
        }


def _set(obj, name: str, value: str, key: str):
    known = {f.name for f in fields(obj)}
    if name not in known:
        raise ConfigError(f"unknown key {key!r}")
    try:
        return replace(obj, **{name: _number(value)})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key} = {value}: {exc}") from exc


def build_config(values: dict[str, str], base: SimConfig | None = None) -> SimConfig:
    cfg = replace(base) if base is not None else SimConfig()
    for key, value in values.items():
        head, _, rest = key.partition(".")
        try:
            if not rest and head in _TOP:
                if head == "mapping":
                    cfg.mapping_name = value
                elif head == "level":
                    cfg.level = None if value == "auto" else PimLevel.parse(value)
                elif head == "mode":
                    cfg.mode = Mode.parse(value)
                elif head == "seed":
                    cfg.seed = int(value, 0)
                elif head == "workload":
                    cfg.workload = value
                elif head == "fidelity":
                    if value not in ("simulate", "estimate"):
                        raise ConfigError(f"fidelity must be simulate or estimate, got {value!r}")
                    cfg.fidelity = value
                elif head == "subsets":
                    cfg.subsets = tuple(s.strip() for s in value.split(","))
                elif head == "spread":
                    cfg.spread = value.lower() in ("1", "true", "yes", "on")
            elif head == "timing" and rest:
                cfg.timing = _set(cfg.timing, rest, value, key)
            elif head == "contention" and rest:
                cfg.contention = _set(cfg.contention, rest, value, key)
            elif head == "energy" and rest:
                if rest.startswith("scratchpad_nj."):
                    lvl = PimLevel.parse(rest.split(".", 1)[1])
                    sp = dict(cfg.energy.scratchpad_nj)
                    sp[lvl] = float(value)
                    cfg.energy = replace(cfg.energy, scratchpad_nj=sp)
                else:
                    cfg.energy = _set(cfg.energy, rest, value, key)
            elif head == "topology" and rest in _TOPOLOGY:
                cfg.topology = {**cfg.topology, rest: int(value, 0)}
            elif head == "workload" and rest in _WORKLOAD:
                cfg.workload_args = {**cfg.workload_args, rest: _number(value)}
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{key} = {value}: {exc}") from exc
    return cfg


def load_config(path: "str | Path | None" = None, overrides: dict[str, str] | None = None) -> SimConfig:
    values = read_config(path) if path else {}
    values.update(overrides or {})
    return build_config(values)


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
