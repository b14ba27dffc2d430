"""XOR-based physical-to-DRAM address mappings.

A mapping assigns every DRAM coordinate bit (channel, rank, bank group,
bank, row, column) the parity of a set of physical-address bits. Viewed over
GF(2) it is a square bit-matrix on the address bits above the cache-block
offset; when that matrix is invertible the mapping is a bijection between
cache blocks and DRAM coordinates and can be run backwards with ``encode``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AddressOutOfRange,
    MappingParseError,
    NonInvertibleMapping,
    UnknownField,
)

DIMENSIONS = ("CH", "RK", "BG", "BA", "ROW", "COL")
_FIELD_RE = re.compile(r"^(CH|RK|BG|BA|ROW|COL)(\d*)$")


def parity(x: int) -> int:
    return x.bit_count() & 1


def parity_array(values: np.ndarray, mask: int) -> np.ndarray:
    """Vectorised parity of ``values & mask`` (values must be uint64)."""
    return (np.bitwise_count(values & np.uint64(mask)) & 1).astype(np.uint8)


def bits_of(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def gf2_rank(rows: Iterable[int]) -> int:
    basis: dict[int, int] = {}
    for r in rows:
        while r:
            top = r.bit_length() - 1
            if top not in basis:
                basis[top] = r
                break
            r ^= basis[top]
    return len(basis)


def gf2_inverse(rows: Sequence[int], n: int) -> list[int] | None:
    """Invert an n x n GF(2) matrix given as row bitmasks.

    Row ``i`` of the input has bit ``j`` set when output bit ``i`` depends on
    input bit ``j``. Returns rows of the inverse in the same convention, or
    None when the matrix is singular.
    """
    if len(rows) != n:
        return None
    aug = [(rows[i], 1 << i) for i in range(n)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][0] >> col & 1), None)
        if pivot is None:
            return None
        aug[col], aug[pivot] = aug[pivot], aug[col]
        prow, pinv = aug[col]
        for r in range(n):
            if r != col and aug[r][0] >> col & 1:
                aug[r] = (aug[r][0] ^ prow, aug[r][1] ^ pinv)
    # aug[col] now reads: input bit col = XOR of outputs in aug[col][1]
    return [aug[j][1] for j in range(n)]


class PimLevel(enum.Enum):
    CHANNEL = "ch"
    DEVICE = "dv"
    BANK_GROUP = "bg"

    @property
    def id_dims(self) -> tuple[str, ...]:
        return {
            PimLevel.CHANNEL: ("CH",),
            PimLevel.DEVICE: ("CH", "RK"),
            PimLevel.BANK_GROUP: ("CH", "RK", "BG"),
        }[self]

    @classmethod
    def parse(cls, text: "str | PimLevel") -> "PimLevel":
        if isinstance(text, PimLevel):
            return text
        key = text.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "ch": cls.CHANNEL, "channel": cls.CHANNEL,
            "dv": cls.DEVICE, "device": cls.DEVICE, "rank": cls.DEVICE,
            "bg": cls.BANK_GROUP, "bankgroup": cls.BANK_GROUP,
        }
        if key not in aliases:
            raise ValueError(f"unknown PIM level {text!r}")
        return aliases[key]


@dataclass(frozen=True)
class DramField:
    name: str
    source_bits: frozenset[int]

    def __post_init__(self):
        if not _FIELD_RE.match(self.name):
            raise MappingParseError(f"bad field name {self.name!r}")

    @property
    def dim(self) -> str:
        return _FIELD_RE.match(self.name).group(1)

    @property
    def index(self) -> int:
        digits = _FIELD_RE.match(self.name).group(2)
        return int(digits) if digits else 0

    @property
    def mask(self) -> int:
        m = 0
        for b in self.source_bits:
            m |= 1 << b
        return m


@dataclass(frozen=True)
class DramCoord:
    """One DRAM location. ``col`` includes the byte offset inside the block."""

    channel: int = 0
    rank: int = 0
    bank_group: int = 0
    bank: int = 0
    row: int = 0
    col: int = 0

    _ATTR = {"CH": "channel", "RK": "rank", "BG": "bank_group", "BA": "bank",
             "ROW": "row", "COL": "col"}

    def get(self, dim: str) -> int:
        return getattr(self, self._ATTR[dim])


@dataclass(frozen=True)
class PimId:
    level: PimLevel
    value: int
    id_bits: tuple[str, ...]  # most-significant first

    def __post_init__(self):
        if self.value >= 1 << len(self.id_bits):
            raise ValueError("PIM id value exceeds its bit width")

    def __int__(self) -> int:
        return self.value


@dataclass
class ValidationReport:
    invertible: bool
    rank: int
    physical_bits: int
    field_count: int
    unused_bits: list[int]
    field_sources: dict[str, list[int]]
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.invertible and not self.problems

    def summary(self) -> str:
        lines = [
            f"invertible: {'yes' if self.invertible else 'no'} "
            f"(rank {self.rank} of {self.physical_bits} bits, {self.field_count} fields)",
            f"unused physical bits: {self.unused_bits or 'none'}",
        ]
        for name, srcs in self.field_sources.items():
            lines.append(f"  {name:6s} = XOR({', '.join(f'b{b}' for b in srcs)})")
        lines.extend(f"problem: {p}" for p in self.problems)
        return "\n".join(lines)


class AddressMapping:
    """Immutable GF(2)-linear map from physical byte addresses to DRAM coordinates."""

    def __init__(self, fields: Sequence[DramField], block_offset_bits: int = 6,
                 total_bits: int = 34, name: str = ""):
        self.fields: tuple[DramField, ...] = tuple(fields)
        self.block_offset_bits = block_offset_bits
        self.total_bits = total_bits
        self.name = name
        self._by_name = {f.name: i for i, f in enumerate(self.fields)}
        self._problems = self._structural_problems()
        nbits = total_bits - block_offset_bits
        self._rows = [f.mask >> block_offset_bits for f in self.fields]
        self._inverse = None
        if not self._problems:
            self._inverse = gf2_inverse(self._rows, nbits)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_dict(cls, spec: dict[str, Iterable[int]], **kw) -> "AddressMapping":
        return cls([DramField(k, frozenset(v)) for k, v in spec.items()], **kw)

    def _structural_problems(self) -> list[str]:
        probs = []
        if len(self._by_name) != len(self.fields):
            probs.append("duplicate field names")
        for f in self.fields:
            if not f.source_bits:
                probs.append(f"field {f.name} has no source bits")
            for b in f.source_bits:
                if b < self.block_offset_bits or b >= self.total_bits:
                    probs.append(f"field {f.name} uses bit b{b} outside "
                                 f"[{self.block_offset_bits}, {self.total_bits})")
            if f.dim == "COL" and f.index < self.block_offset_bits:
                probs.append(f"column field {f.name} overlaps the block offset")
        return probs

    # -- queries ---------------------------------------------------------------
    @property
    def invertible(self) -> bool:
        return self._inverse is not None

    def require_valid(self) -> None:
        if not self.invertible:
            raise NonInvertibleMapping(
                f"mapping {self.name or '<anon>'} is not invertible: "
                + ("; ".join(self._problems) or "rank deficient"))

    def field(self, name: str) -> DramField:
        try:
            return self.fields[self._by_name[name]]
        except KeyError:
            raise UnknownField(f"field {name} not in mapping") from None

    def fields_of(self, dim: str) -> list[DramField]:
        return sorted((f for f in self.fields if f.dim == dim), key=lambda f: f.index)

    def dim_width(self, dim: str) -> int:
        fs = self.fields_of(dim)
        width = max((f.index + 1 for f in fs), default=0)
        if dim == "COL":
            width = max(width, self.block_offset_bits)
        return width

    def id_fields(self, level: PimLevel) -> list[DramField]:
        """ID fields ordered least-significant first (PIM ID bit 0 first)."""
        # a missing CH or RK dimension just means one channel or rank, but
        # bank-group PIMs cannot exist without bank-group coordinates
        if level is PimLevel.BANK_GROUP and not self.fields_of("BG"):
            raise UnknownField("bg level needs BG fields, absent from the mapping")
        out: list[DramField] = []
        for dim in reversed(level.id_dims):
            out.extend(self.fields_of(dim))
        return out

    def id_masks(self, level: PimLevel) -> list[int]:
        return [f.mask for f in self.id_fields(level)]

    def num_pims(self, level: PimLevel) -> int:
        return 1 << len(self.id_fields(level))

    def count(self, dim: str) -> int:
        return 1 << len(self.fields_of(dim))

    # -- the map ----------------------------------------------------------------
    def _check_addr(self, addr: int) -> None:
        if addr < 0 or addr >= 1 << self.total_bits:
            raise AddressOutOfRange(f"address {addr:#x} outside {self.total_bits}-bit space")

    def decode(self, addr: int) -> DramCoord:
        self._check_addr(addr)
        vals = dict.fromkeys(DIMENSIONS, 0)
        for f in self.fields:
            vals[f.dim] |= parity(addr & f.mask) << f.index
        vals["COL"] |= addr & ((1 << self.block_offset_bits) - 1)
        return DramCoord(vals["CH"], vals["RK"], vals["BG"], vals["BA"], vals["ROW"], vals["COL"])

    def encode(self, coord: DramCoord) -> int:
        if not self.invertible:
            self.require_valid()
        bo = self.block_offset_bits
        vec = 0
        covered = dict.fromkeys(DIMENSIONS, 0)
        for i, f in enumerate(self.fields):
            vec |= (coord.get(f.dim) >> f.index & 1) << i
            covered[f.dim] |= 1 << f.index
        covered["COL"] |= (1 << bo) - 1
        for dim in DIMENSIONS:
            if coord.get(dim) & ~covered[dim]:
                raise AddressOutOfRange(f"{dim} value {coord.get(dim):#x} has bits the mapping lacks")
        addr = 0
        for j, inv_row in enumerate(self._inverse):
            addr |= parity(vec & inv_row) << (j + bo)
        return addr | (coord.col & ((1 << bo) - 1))

    def pim_id(self, addr: int, level: PimLevel) -> PimId:
        self._check_addr(addr)
        fs = self.id_fields(level)
        value = 0
        for i, f in enumerate(fs):
            value |= parity(addr & f.mask) << i
        return PimId(level, value, tuple(f.name for f in reversed(fs)))

    def pim_ids_array(self, addrs: np.ndarray, level: PimLevel) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.uint64)
        out = np.zeros(addrs.shape, dtype=np.int64)
        for i, f in enumerate(self.id_fields(level)):
            out |= parity_array(addrs, f.mask).astype(np.int64) << i
        return out

    def dim_array(self, addrs: np.ndarray, dim: str) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.uint64)
        out = np.zeros(addrs.shape, dtype=np.int64)
        for f in self.fields_of(dim):
            out |= parity_array(addrs, f.mask).astype(np.int64) << f.index
        return out

    # -- derivation ----------------------------------------------------------------
    def rename(self, renames: dict[str, str], name: str | None = None) -> "AddressMapping":
        """Copy with some fields renamed (e.g. demote an ID bit to a row bit)."""
        for old in renames:
            self.field(old)
        fields = [DramField(renames.get(f.name, f.name), f.source_bits) for f in self.fields]
        return AddressMapping(fields, self.block_offset_bits, self.total_bits,
                              name if name is not None else self.name)

    def spare_name(self, dim: str) -> str:
        """A field name of ``dim`` not used yet, above the existing ones."""
        idx = self.dim_width(dim)
        return f"{dim}{idx}"

    def __repr__(self) -> str:
        return f"AddressMapping({self.name or '<anon>'}, {len(self.fields)} fields, {self.total_bits} bits)"


def pim_id(mapping: AddressMapping, addr: int, level: PimLevel) -> PimId:
    return mapping.pim_id(addr, level)


def decode(mapping: AddressMapping, addr: int) -> DramCoord:
    return mapping.decode(addr)


def encode(mapping: AddressMapping, coord: DramCoord) -> int:
    return mapping.encode(coord)


def validate_mapping(mapping: AddressMapping) -> ValidationReport:
    bo, tb = mapping.block_offset_bits, mapping.total_bits
    rows = [f.mask >> bo for f in mapping.fields]
    nbits = tb - bo
    rank = gf2_rank(rows)
    used = 0
    for f in mapping.fields:
        used |= f.mask
    unused = [b for b in range(bo, tb) if not used >> b & 1]
    problems = list(mapping._problems)
    if len(mapping.fields) != nbits:
        problems.append(f"{len(mapping.fields)} fields for {nbits} physical bits (not square)")
    if rank < nbits:
        problems.append(f"rank deficient ({rank} < {nbits})")
    return ValidationReport(
        invertible=mapping.invertible and rank == nbits,
        rank=rank,
        physical_bits=nbits,
        field_count=len(mapping.fields),
        unused_bits=unused,
        field_sources={f.name: sorted(f.source_bits) for f in mapping.fields},
        problems=problems,
    )


# -- mapping files -----------------------------------------------------------

_LINE_FIELD = re.compile(r"^FIELD\s+(\w+)\s*=\s*XOR\s*\(([^)]*)\)\s*$", re.IGNORECASE)


def parse_mapping(text: str, name: str = "") -> AddressMapping:
    """Parse the ``FIELD <name> = XOR(b<i>, ...)`` mapping file format."""
    fields = []
    block_offset, total = 6, 34
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split()[0].upper()
        try:
            if head == "BLOCK_OFFSET_BITS":
                block_offset = int(line.split()[1])
            elif head == "TOTAL_BITS":
                total = int(line.split()[1])
            elif head == "NAME":
                name = name or line.split(None, 1)[1]
            elif head == "FIELD":
                m = _LINE_FIELD.match(line)
                if not m:
                    raise ValueError("expected FIELD <name> = XOR(b<i>, ...)")
                bits = []
                for tok in m.group(2).split(","):
                    tok = tok.strip().lower()
                    if not re.fullmatch(r"b\d+", tok):
                        raise ValueError(f"bad bit token {tok!r}")
                    bits.append(int(tok[1:]))
                fields.append(DramField(m.group(1).upper(), frozenset(bits)))
            else:
                raise ValueError(f"unknown directive {head}")
        except (ValueError, IndexError, MappingParseError) as exc:
            raise MappingParseError(f"line {lineno}: {exc}") from None
    if not fields:
        raise MappingParseError("mapping defines no fields")
    return AddressMapping(fields, block_offset, total, name)


def format_mapping(mapping: AddressMapping) -> str:
    lines = []
    if mapping.name:
        lines.append(f"NAME {mapping.name}")
    lines.append(f"BLOCK_OFFSET_BITS {mapping.block_offset_bits}")
    lines.append(f"TOTAL_BITS {mapping.total_bits}")
    for f in mapping.fields:
        srcs = ", ".join(f"b{b}" for b in sorted(f.source_bits))
        lines.append(f"FIELD {f.name} = XOR({srcs})")
    return "\n".join(lines) + "\n"


def load_mapping(path: "str | Path") -> AddressMapping:
    p = Path(path)
    if not p.exists() and str(path) in builtin_mappings():
        return load_builtin(str(path))
    return parse_mapping(p.read_text(), name=p.stem)


def builtin_mappings() -> list[str]:
    pkg = resources.files("stepstone") / "mappings"
    return sorted(e.name[:-4] for e in pkg.iterdir() if e.name.endswith(".map"))


def load_builtin(name: str) -> AddressMapping:
    pkg = resources.files("stepstone") / "mappings" / f"{name}.map"
    return parse_mapping(pkg.read_text(), name=name)
