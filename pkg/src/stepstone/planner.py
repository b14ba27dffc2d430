"""PIM level and subset selection, plus the allocation-coloring checker.

Running on half of a level's PIMs means every block of A must land on PIMs
whose pinned ID field has one value. An allocator can only guarantee that by
coloring physical frames, so the pinned field needs a source bit above the
4KB page offset (the colored bit). ``subset_mapping`` gives the mapping as
seen through such an allocation: the colored bit follows the parity of the
field's other sources, so the field and one address bit drop out.

The same coloring lets a small matrix reach every PIM of a level: frames
are handed out so that ID fields the contiguous span would leave constant
still vary. That is modeled by composing the mapping with an invertible
remap of frame-number bits (``spread_mapping``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .addrmap import AddressMapping, DramField, PimLevel, bits_of, gf2_rank, parity_array
from .gemm import Mode, make_plan
from .grouping import MatrixGeometry, block_addresses
from .timing import ContentionProfile, PimTopology, TimingParams, estimate

PAGE_BITS = 12
HUGE_PAGE_BITS = 21


@dataclass(frozen=True)
class Subset:
    level: PimLevel
    pinned: dict = field(default_factory=dict)  # ID field name -> forced value

    @property
    def fraction(self) -> float:
        return 1 / (1 << len(self.pinned))

    @property
    def label(self) -> str:
        return "all" if not self.pinned else \
            ("half" if len(self.pinned) == 1 else f"1/{1 << len(self.pinned)}")


@dataclass
class AllocationCheck:
    ok: bool
    granularity: int
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    offending_blocks: list[int] = field(default_factory=list)


def _colored_bit(mapping: AddressMapping, name: str) -> int | None:
    srcs = [b for b in bits_of(mapping.field(name).mask) if b >= PAGE_BITS]
    return min(srcs) if srcs else None


def _inside_sources(mapping: AddressMapping, name: str) -> list[int]:
    c = _colored_bit(mapping, name)
    return [] if c is None else [b for b in bits_of(mapping.field(name).mask) if b < c]


def granularity_for(mapping: AddressMapping, level: PimLevel, name: str) -> int | None:
    """Allocation granule needed to pin ``name``; None if it cannot be colored.

    The granule has to reach just past the highest ID-affecting bit below the
    colored bit, so that each granule still covers every combination of the
    other ID bits. When the field also has sources below the colored bit, the
    granule must contain both values of the colored bit so each block can be
    placed in the half whose parity matches (half the granule is then used).
    """
    c = _colored_bit(mapping, name)
    if c is None:
        return None
    id_mask = 0
    for m in mapping.id_masks(level):
        id_mask |= m
    lower = [b for b in bits_of(id_mask) if b < c]
    top = max(lower, default=-1)
    if _inside_sources(mapping, name):
        top = max(top, c)
    return max(1 << PAGE_BITS, 1 << (top + 1))


def pinnable_fields(mapping: AddressMapping, level: PimLevel) -> list[tuple[bool, int, str]]:
    """(needs per-block forcing, granularity, name) of ID fields that can be colored.

    Fields colored by whole frames sort first: they waste no memory.
    """
    out = []
    for f in mapping.id_fields(level):
        g = granularity_for(mapping, level, f.name)
        if g is not None:
            out.append((bool(_inside_sources(mapping, f.name)), g, f.name))
    return sorted(out)


def half_subset(mapping: AddressMapping, level: "PimLevel | str") -> Subset | None:
    level = PimLevel.parse(level)
    cands = pinnable_fields(mapping, level)
    return Subset(level, {cands[0][2]: 0}) if cands else None


def _squeeze(bits: frozenset[int], c: int) -> frozenset[int]:
    return frozenset(b if b < c else b - 1 for b in bits if b != c)


def subset_mapping(mapping: AddressMapping, subset: Subset) -> AddressMapping:
    """Mapping as a colored allocation sees it, over the allocation's own addresses.

    The allocator never hands out addresses whose pinned field differs from
    its value, so bit ``c`` (the colored bit) is no longer free: it is the
    parity of the field's other sources. Composing with that placement drops
    the pinned field and one address bit; the remaining fields of the same
    dimension are renumbered from 0.
    """
    m = mapping
    for name in sorted(subset.pinned):
        f = m.field(name)
        c = _colored_bit(m, name)
        if c is None:
            raise ValueError(f"{name} has no source bit above the 4KB page offset")
        others = _squeeze(f.source_bits, c)
        kept = []
        for g in m.fields:
            if g.name == name:
                continue
            bits = _squeeze(g.source_bits, c)
            kept.append(DramField(g.name, bits ^ others if c in g.source_bits else bits))
        renum, count = [], {}
        for g in sorted(kept, key=lambda g: (g.dim, g.index)):
            i = count.get(g.dim, 0)
            count[g.dim] = i + 1
            renum.append(DramField(g.name if g.dim == "COL" else f"{g.dim}{i}", g.source_bits))
        m = AddressMapping(renum, m.block_offset_bits, m.total_bits - 1, m.name)
    return AddressMapping(m.fields, m.block_offset_bits, m.total_bits,
                          f"{mapping.name}[{subset.label}]") if subset.pinned else mapping


def spread_mapping(mapping: AddressMapping, geom: MatrixGeometry,
                   level: "PimLevel | str") -> AddressMapping:
    """Mapping seen through a frame allocator that spreads A over every PIM.

    Virtual frame bit ``v`` inside the matrix span is also made to set a
    physical bit ``h`` above the span (an ID source the contiguous layout
    leaves constant). Moves are taken greedily while they raise the rank of
    the ID bits over the span; ties prefer an ``h`` feeding the fewest fields.
    Returns the mapping unchanged when the span already reaches every PIM.
    """
    level = PimLevel.parse(level)
    ids = mapping.id_fields(level)
    span = geom.span_bits
    lo = max(PAGE_BITS, mapping.block_offset_bits)

    def vec(b):
        return sum(1 << i for i, f in enumerate(ids) if b in f.source_bits)

    fixed = [vec(b) for b in range(mapping.block_offset_bits, min(lo, span))]
    cols = {v: vec(v) for v in range(lo, span)}
    highs = sorted({b for f in ids for b in f.source_bits if b >= span})
    moves = []
    while True:
        r0 = gf2_rank(fixed + list(cols.values()))
        best = None
        for v in cols:
            for h in highs:
                cols[v] ^= vec(h)
                r = gf2_rank(fixed + list(cols.values()))
                cols[v] ^= vec(h)
                key = (-r, sum(h in f.source_bits for f in mapping.fields))
                if r > r0 and (best is None or key < best[0]):
                    best = (key, v, h)
        if best is None:
            break
        _, v, h = best
        cols[v] ^= vec(h)
        moves.append((v, h))
    if not moves:
        return mapping
    fields = list(mapping.fields)
    for v, h in moves:
        fields = [DramField(f.name, f.source_bits ^ {v}) if h in f.source_bits else f for f in fields]
    return AddressMapping(fields, mapping.block_offset_bits, mapping.total_bits,
                          f"{mapping.name}[spread]")


def colored_address(mapping: AddressMapping, vaddr: int, subset: Subset, granularity: int) -> int:
    """Physical address of ``vaddr`` when granules go to frames of the right color."""
    del granularity  # frames are at least one granule, the colored bit sits above it
    paddr = vaddr
    for name, value in sorted(subset.pinned.items()):
        c = _colored_bit(mapping, name)
        mask = mapping.field(name).mask
        lo = paddr & ((1 << c) - 1)
        hi = paddr >> c
        paddr = (hi << (c + 1)) | lo
        if bin(paddr & mask).count("1") % 2 != value:
            paddr |= 1 << c
    return paddr


def check_allocation(mapping: AddressMapping, geom: MatrixGeometry, subset: Subset,
                     physical: bool = True, huge_pages: bool = False,
                     max_report: int = 8) -> AllocationCheck:
    """Verify a subset allocation; never raises.

    With ``physical`` the matrix is taken to sit at ``geom.base_addr`` exactly
    (a misplacement check); otherwise the matrix is laid out through the
    colored frame allocator first.
    """
    level = subset.level
    if not subset.pinned:
        return AllocationCheck(True, 1 << PAGE_BITS)
    violations, warnings = [], []
    gran = 1 << PAGE_BITS
    for name in subset.pinned:
        try:
            g = granularity_for(mapping, level, name)
        except Exception as exc:  # unknown field
            violations.append(str(exc))
            continue
        if g is None:
            violations.append(f"{name} has no source bit above the 4KB page offset; it cannot be colored")
            continue
        gran = max(gran, g)
        c = _colored_bit(mapping, name)
        inside = _inside_sources(mapping, name)
        if inside:
            warnings.append(
                f"{name} source bit(s) {inside} lie below colored bit b{c}; b{c} is forced per "
                f"block inside each {g >> 10}KB granule, which uses half the granule")
    if huge_pages:
        warnings.append("a 2MB huge page already spans every bank, so a subset allocation cannot be colored")
        if gran < 1 << HUGE_PAGE_BITS:
            gran = 1 << HUGE_PAGE_BITS
    addrs = block_addresses(geom)
    if not physical:
        addrs = np.array([colored_address(mapping, int(a), subset, gran) for a in addrs], dtype=np.uint64)
    bad = np.zeros(len(addrs), dtype=bool)
    for name, value in subset.pinned.items():
        bad |= parity_array(addrs, mapping.field(name).mask) != value
    offending = [int(a) for a in addrs[bad][:max_report]]
    if bad.any():
        violations.append(f"{int(bad.sum())} of {len(addrs)} blocks decode outside the subset "
                          f"(first at {offending[0]:#x})")
    return AllocationCheck(not violations, gran, violations, warnings, offending)


@dataclass
class LevelChoice:
    level: PimLevel
    subset: Subset
    mapping: AddressMapping
    active_pims: tuple[int, ...]
    estimate: dict
    table: list[dict]

    def to_json(self) -> dict:
        return {"level": self.level.value, "subset": self.subset.label,
                "pinned": dict(self.subset.pinned), "active_pims": list(self.active_pims),
                "estimate": self.estimate, "candidates": self.table}


_COARSE = {PimLevel.CHANNEL: 0, PimLevel.DEVICE: 1, PimLevel.BANK_GROUP: 2}


def evaluate(mapping, geom, n, level, subset, mode=Mode.STP, timing=None, contention=None,
             exhaustive=False, topo_overrides=None, spread=True):
    m = subset_mapping(mapping, subset)
    if spread:
        m = spread_mapping(m, geom, level)
    plan = make_plan(m, geom, n, level, mode)
    topo = PimTopology.from_mapping(m, level, timing, **(topo_overrides or {}))
    if exhaustive:
        from .gemm import build_trace
        from .timing import simulate
        rep = simulate(build_trace(plan), m, topo, timing, contention)
        est = {"localization": rep.phase_cycles["localization"],
               "execution": rep.phase_cycles["execution"],
               "reduction": rep.phase_cycles["reduction"], "total": rep.total_cycles}
    else:
        est = estimate(plan, topo, timing, contention)
    return m, plan, est


def choose_level(mapping: AddressMapping, geom: MatrixGeometry, n: int,
                 levels=None, subsets=("all", "half"), mode=Mode.STP,
                 timing: TimingParams | None = None, contention: ContentionProfile | None = None,
                 exhaustive: bool = False, topo_overrides: dict | None = None,
                 spread: bool = True) -> LevelChoice:
    """Argmin of the analytic estimate over levels x {all, half}."""
    levels = [PimLevel.parse(x) for x in (levels or list(PimLevel))]
    table, best = [], None
    for level in levels:
        try:
            mapping.id_fields(level)
        except Exception:
            continue
        for kind in subsets:
            subset = Subset(level) if kind == "all" else half_subset(mapping, level)
            if subset is None:
                continue
            try:
                m, plan, est = evaluate(mapping, geom, n, level, subset, mode, timing, contention,
                                        exhaustive, topo_overrides, spread)
            except Exception as exc:  # e.g. infeasible plan
                table.append({"level": level.value, "subset": subset.label, "error": str(exc)})
                continue
            row = {"level": level.value, "subset": subset.label,
                   "pims": len(plan.active_pims), **est}
            table.append(row)
            key = (round(est["total"], 6), len(plan.active_pims), _COARSE[level])
            if best is None or key < best[0]:
                best = (key, LevelChoice(level, subset, m, plan.active_pims, est, table))
    if best is None:
        raise ValueError("no feasible level for this GEMM")
    return best[1]
