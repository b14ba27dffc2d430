"""Replication of B/C into per-PIM private regions and reduction of partial C.

Each (pim, group) pair consumes the B rows that match the column blocks it
owns; each PIM produces partial sums for the A rows it touches. The plan
lists both, in the order the PIM streams them, and carries the traffic
totals the timing and energy models charge for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .addrmap import AddressMapping, DramCoord, PimLevel
from .errors import MissingPartial, RegionTooSmall, ShapeMismatch
from .grouping import GroupSpec, MatrixGeometry, owned_col_blocks, owned_rows, pim_group_pairs


@dataclass
class PrivateRegion:
    """Blocks of one PIM's memory, synthesised through the inverse mapping.

    Block ``i`` of the region spreads the bits of ``base_index + i`` over the
    non-ID coordinate bits (columns first, then banks, then rows), while the
    ID coordinates stay fixed to the owner. Every address therefore decodes
    to the owner.
    """

    mapping: AddressMapping
    level: PimLevel
    owner: int
    n_blocks: int
    base_index: int = 0
    layout: str = "B-then-C, stream ordered"

    def __post_init__(self):
        bo = self.mapping.block_offset_bits
        id_names = {f.name for f in self.mapping.id_fields(self.level)}
        order = {"COL": 0, "BA": 1, "BG": 2, "RK": 3, "CH": 4, "ROW": 5}
        free = [f for f in self.mapping.fields if f.name not in id_names]
        free.sort(key=lambda f: (order[f.dim], f.index))
        self._free = [f for f in free if not (f.dim == "COL" and f.index < bo)]
        if self.base_index + self.n_blocks > 1 << len(self._free):
            raise RegionTooSmall(
                f"PIM {self.owner} has {1 << len(self._free)} blocks, region needs "
                f"{self.base_index + self.n_blocks}")
        self._ids = self.mapping.id_fields(self.level)

    @property
    def length(self) -> int:
        return self.n_blocks << self.mapping.block_offset_bits

    @property
    def base(self) -> int:
        return self.address(0)

    def address(self, i: int) -> int:
        if not 0 <= i < self.n_blocks:
            raise IndexError(i)
        vals = dict.fromkeys(("CH", "RK", "BG", "BA", "ROW", "COL"), 0)
        for b, f in enumerate(self._ids):
            vals[f.dim] |= (self.owner >> b & 1) << f.index
        idx = self.base_index + i
        for b, f in enumerate(self._free):
            vals[f.dim] |= (idx >> b & 1) << f.index
        return self.mapping.encode(DramCoord(vals["CH"], vals["RK"], vals["BG"],
                                             vals["BA"], vals["ROW"], vals["COL"]))

    def addresses(self) -> list[int]:
        return [self.address(i) for i in range(self.n_blocks)]


@dataclass
class LocalizationPlan:
    level: PimLevel
    n: int
    elem_bytes: int
    rows_per_block: int  # B rows covered by one column block of A
    b_blocks: dict[tuple[int, int], list[int]]  # (pim, group) -> owned column blocks
    c_rows: dict[int, np.ndarray]                # pim -> sorted A/C row indices
    regions: dict[int, PrivateRegion] = field(default_factory=dict)
    scratchpad_direct: bool = False

    @property
    def pims(self) -> list[int]:
        return sorted(self.c_rows)

    def b_rows(self, pim: int, group: int) -> np.ndarray:
        cbs = np.asarray(self.b_blocks[(pim, group)], dtype=np.int64)
        rpb = self.rows_per_block
        return (cbs[:, None] * rpb + np.arange(rpb)).reshape(-1)

    def b_footprint(self, pim: int) -> int:
        return sum(len(v) for (p, _), v in self.b_blocks.items() if p == pim) \
            * self.rows_per_block * self.n * self.elem_bytes

    def c_footprint(self, pim: int) -> int:
        return len(self.c_rows[pim]) * self.n * self.elem_bytes

    @property
    def replication_bytes(self) -> int:
        rows = sum(len(v) for v in self.b_blocks.values()) * self.rows_per_block
        return rows * self.n * self.elem_bytes

    @property
    def reduction_bytes(self) -> int:
        return sum(len(r) for r in self.c_rows.values()) * self.n * self.elem_bytes

    @property
    def distinct_b_bytes(self) -> int:
        cbs = set()
        for v in self.b_blocks.values():
            cbs.update(v)
        return len(cbs) * self.rows_per_block * self.n * self.elem_bytes

    @property
    def c_bytes(self) -> int:
        rows = set()
        for r in self.c_rows.values():
            rows.update(r.tolist())
        return len(rows) * self.n * self.elem_bytes

    @property
    def traffic(self) -> dict[str, int]:
        return {"replication_bytes": self.replication_bytes,
                "reduction_bytes": self.reduction_bytes,
                "distinct_b_bytes": self.distinct_b_bytes}

    def to_json(self) -> dict:
        return {
            "level": self.level.value,
            "n": self.n,
            "b_blocks": {f"{p}/{g}": list(map(int, v)) for (p, g), v in sorted(self.b_blocks.items())},
            "c_rows": {str(p): [int(x) for x in r] for p, r in sorted(self.c_rows.items())},
            "scratchpad_direct": self.scratchpad_direct,
            "traffic": self.traffic,
        }


def plan_localization(mapping: AddressMapping, spec: GroupSpec, geom: MatrixGeometry,
                      level: PimLevel, active_pims=None, n: int = 1,
                      regions: dict[int, PrivateRegion] | None = None,
                      scratchpad: int | None = None) -> LocalizationPlan:
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    keep = None if active_pims is None else set(active_pims)
    b_blocks: dict[tuple[int, int], list[int]] = {}
    c_rows: dict[int, set] = {}
    for pim, g in pim_group_pairs(spec, geom):
        if keep is not None and pim not in keep:
            continue
        b_blocks[(pim, g)] = owned_col_blocks(spec, geom, pim, g).tolist()
        c_rows.setdefault(pim, set()).update(owned_rows(spec, geom, pim, g).tolist())
    block = 1 << mapping.block_offset_bits
    plan = LocalizationPlan(
        level=level, n=n, elem_bytes=geom.elem_bytes,
        rows_per_block=block // geom.elem_bytes,
        b_blocks=b_blocks,
        c_rows={p: np.array(sorted(r), dtype=np.int64) for p, r in c_rows.items()},
    )
    need = {p: -(-(plan.b_footprint(p) + plan.c_footprint(p)) // block) for p in plan.c_rows}
    if regions is not None:
        for p, blocks in need.items():
            if p not in regions or regions[p].n_blocks < blocks:
                have = regions[p].n_blocks if p in regions else 0
                raise RegionTooSmall(f"PIM {p} region holds {have} blocks, plan needs {blocks}")
        plan.regions = dict(regions)
    if scratchpad is not None:
        plan.scratchpad_direct = all(
            plan.b_footprint(p) + plan.c_footprint(p) <= scratchpad for p in plan.c_rows)
    return plan


def default_regions(mapping: AddressMapping, plan: LocalizationPlan) -> dict[int, PrivateRegion]:
    """Regions placed in the upper half of each PIM's memory, above typical matrices."""
    block = 1 << mapping.block_offset_bits
    out = {}
    for p in plan.c_rows:
        blocks = -(-(plan.b_footprint(p) + plan.c_footprint(p)) // block)
        probe = PrivateRegion(mapping, plan.level, p, 0)
        half = 1 << (len(probe._free) - 1)
        out[p] = PrivateRegion(mapping, plan.level, p, blocks, base_index=half)
    return out


@dataclass
class LocalizedB:
    buffers: dict[int, dict[int, np.ndarray]]  # pim -> group -> rows x N, stream order
    read_blocks: int
    write_blocks: int
    block_bytes: int = 64

    @property
    def read_bytes(self) -> int:
        return self.read_blocks * self.block_bytes

    @property
    def write_bytes(self) -> int:
        return self.write_blocks * self.block_bytes


def _blocks_of_rows(rows: np.ndarray, row_bytes: int, block: int) -> set[int]:
    first = rows * row_bytes // block
    last = ((rows + 1) * row_bytes - 1) // block
    out = set()
    for a, b in zip(first.tolist(), last.tolist()):
        out.update(range(a, b + 1))
    return out


def localize_b(B: np.ndarray, plan: LocalizationPlan) -> LocalizedB:
    if B.ndim != 2 or B.shape[1] != plan.n:
        raise ShapeMismatch(f"B has shape {B.shape}, plan expects N={plan.n}")
    block = plan.rows_per_block * plan.elem_bytes
    row_bytes = plan.n * plan.elem_bytes
    buffers: dict[int, dict[int, np.ndarray]] = {}
    referenced: set[int] = set()
    writes = 0
    for (pim, g) in sorted(plan.b_blocks):
        rows = plan.b_rows(pim, g)
        if len(rows) and rows.max() >= B.shape[0]:
            raise ShapeMismatch(f"B has {B.shape[0]} rows, plan references row {rows.max()}")
        buffers.setdefault(pim, {})[g] = B[rows].copy()
        referenced |= _blocks_of_rows(rows, row_bytes, block)
        writes += -(-len(rows) * row_bytes // block)
    return LocalizedB(buffers, read_blocks=len(referenced), write_blocks=writes, block_bytes=block)


def reduce_c(partials: dict[int, np.ndarray], plan: LocalizationPlan, m_rows: int) -> np.ndarray:
    """Sum per-PIM partials (rows ordered as ``plan.c_rows``) in ascending PIM order."""
    C = np.zeros((m_rows, plan.n), dtype=np.float64)
    for pim in plan.pims:
        if pim not in partials:
            raise MissingPartial(f"no partial result from PIM {pim}")
        part = partials[pim]
        rows = plan.c_rows[pim]
        if part.shape != (len(rows), plan.n):
            raise ShapeMismatch(f"PIM {pim} partial has shape {part.shape}, expected {(len(rows), plan.n)}")
        C[rows] += part
    return C
