"""Group-based GEMM with partitioning, in four execution modes.

``make_plan`` picks row/column partitions so a tile's B and C slices fit
the scratchpad. ``build_trace`` lays out what every PIM does, kernel by
kernel, and ``run_gemm`` executes that trace numerically. The modes only
differ in how work is cut into kernels and how it is launched:

* STP  - one kernel per (row partition, group, column partition) tile;
* eCHO - grouped like STP but one kernel per A row inside a tile;
* nCHO - no grouping; one GEMV pass per batch column, one kernel per row;
* PEI  - tiles as STP but every A block needs its own command packet.

Every mode accumulates a (pim, row) partial over ascending column blocks and
ascending k within a block, so all modes agree bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .addrmap import AddressMapping, PimLevel
from .agen import AddressGenerator
from .errors import Infeasible, PlanGeometryMismatch, ShapeMismatch
from .grouping import (
    GroupSpec, MatrixGeometry, derive_groups, group_ids_of, is_pow2, owned_col_blocks,
)
from .localize import LocalizationPlan, localize_b, plan_localization, reduce_c

C_ROW_GRANULE = 16


class Mode(enum.Enum):
    STP = "stp"
    ECHO = "echo"
    NCHO = "ncho"
    PEI = "pei"

    @classmethod
    def parse(cls, text: "str | Mode") -> "Mode":
        if isinstance(text, Mode):
            return text
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown mode {text!r}; expected one of stp, echo, ncho, pei") from None


# Per logical PIM: a BG or DV PIM spans the 8 x8 devices of a rank, each with
# its own unit, which operate in lock step on the 8B slice they hold.
DEFAULT_SCRATCHPAD = {PimLevel.BANK_GROUP: 64 << 10, PimLevel.DEVICE: 256 << 10,
                      PimLevel.CHANNEL: 256 << 10}


def _pow2_range(limit: int):
    k = 1
    while k <= limit:
        yield k
        k <<= 1


@dataclass
class GemmPlan:
    mapping: AddressMapping
    geom: MatrixGeometry
    n: int
    level: PimLevel
    mode: Mode
    spec: GroupSpec
    active_pims: tuple[int, ...]
    groups: tuple[int, ...]
    row_parts: list[tuple[int, int]]
    col_parts: list[tuple[int, int]]
    scratchpad: int
    loc: LocalizationPlan
    tile_bytes: int = 0  # worst PIM's B slice + C slice

    @property
    def tiles_per_pim(self) -> int:
        return len(self.row_parts) * len(self.groups) * len(self.col_parts)

    def describe(self) -> dict:
        return {
            "matrix": [self.geom.m_rows, self.geom.k_cols],
            "n": self.n,
            "level": self.level.value,
            "mode": self.mode.value,
            "active_pims": list(self.active_pims),
            "num_groups": len(self.groups),
            "row_partitions": len(self.row_parts),
            "col_partitions": len(self.col_parts),
            "scratchpad_bytes": self.scratchpad,
            "tile_bytes": self.tile_bytes,
            "scratchpad_direct": self.loc.scratchpad_direct,
            "traffic": self.loc.traffic,
        }


def _split(total: int, parts: int) -> list[tuple[int, int]]:
    step = total // parts
    return [(i * step, (i + 1) * step) for i in range(parts)]


def _footprints(loc: LocalizationPlan, geom: MatrixGeometry, n: int, rp: int, cp: int,
                row_blocks: int) -> int:
    eb, rpb = geom.elem_bytes, loc.rows_per_block
    redges = np.arange(rp + 1) * (geom.m_rows // rp)
    c_max = 0
    for rows in loc.c_rows.values():
        c_max = max(c_max, int(np.diff(np.searchsorted(rows, redges)).max(initial=0)))
    cedges = np.arange(cp + 1) * (row_blocks // cp)
    b_max = 0
    for cbs in loc.b_blocks.values():
        b_max = max(b_max, int(np.diff(np.searchsorted(np.asarray(cbs), cedges)).max(initial=0)))
    return c_max * n * eb + b_max * rpb * n * eb


def make_plan(mapping: AddressMapping, geom: MatrixGeometry, n: int, level: "PimLevel | str",
              mode: "Mode | str" = Mode.STP, scratchpad: int | None = None,
              overrides: dict | None = None, active_pims=None) -> GemmPlan:
    """Smallest partition counts whose tiles fit, splitting rows before columns."""
    level, mode = PimLevel.parse(level), Mode.parse(mode)
    if n < 1:
        raise ValueError("batch size must be >= 1")
    overrides = dict(overrides or {})
    scratchpad = scratchpad if scratchpad is not None else DEFAULT_SCRATCHPAD[level]
    spec = derive_groups(mapping, geom, level)
    pims = tuple(sorted(set(spec.active_pims) & set(active_pims))) if active_pims is not None \
        else spec.active_pims
    loc = plan_localization(mapping, spec, geom, level, pims, n, scratchpad=scratchpad)
    pims = tuple(loc.pims)
    groups = tuple(range(spec.num_groups))
    row_blocks = geom.row_blocks(1 << mapping.block_offset_bits)
    n_eff = 1 if mode is Mode.NCHO else n
    max_rp = max(1, geom.m_rows // C_ROW_GRANULE)

    choice = None
    fixed_rp, fixed_cp = overrides.pop("row_parts", None), overrides.pop("col_parts", None)
    if overrides:
        raise ValueError(f"unknown plan overrides {sorted(overrides)}")
    for v, lim in ((fixed_rp, max_rp), (fixed_cp, row_blocks)):
        if v is not None and (not is_pow2(v) or v > lim):
            raise ValueError(f"partition count {v} must be a power of two <= {lim}")
    cps = [fixed_cp] if fixed_cp else list(_pow2_range(row_blocks))
    rps = [fixed_rp] if fixed_rp else list(_pow2_range(max_rp))
    for cp in cps:
        for rp in rps:
            fp = _footprints(loc, geom, n_eff, rp, cp, row_blocks)
            if fp <= scratchpad or (fixed_rp and fixed_cp):
                choice = (rp, cp, fp)
                break
        if choice:
            break
    if choice is None:
        raise Infeasible(
            f"a {C_ROW_GRANULE}-row x 1-block tile at N={n_eff} needs "
            f"{_footprints(loc, geom, n_eff, rps[-1], cps[-1], row_blocks)}B, scratchpad is {scratchpad}B")
    rp, cp, fp = choice
    return GemmPlan(mapping, geom, n, level, mode, spec, pims, groups,
                    _split(geom.m_rows, rp), _split(row_blocks, cp), scratchpad, loc, fp)


# -- trace ---------------------------------------------------------------------

@dataclass
class Kernel:
    """One unit of PIM work: an ordered A-block stream plus its buffer traffic."""

    pim: int
    kind: str                  # tile | row | gemv
    row_part: int
    group: int                 # -1 when grouping is not used
    col_part: int
    addrs: np.ndarray          # uint64 block addresses in stream order
    gaps: np.ndarray           # +1-block increments the naive generator needs per step
    batch: int                 # batch columns computed per block
    fill_b_bytes: int = 0
    fill_c_bytes: int = 0
    drain_c_bytes: int = 0
    launch: bool = True        # needs a kernel-launch command packet
    per_block_packets: bool = False
    column: int = -1           # batch column of a GEMV pass

    @property
    def blocks(self) -> int:
        return len(self.addrs)


@dataclass
class EventTrace:
    mode: Mode
    level: PimLevel
    n: int
    kernels: dict[int, list[Kernel]]
    block_bytes: int
    elem_bytes: int
    simd_width: int | None = None
    controller: dict[str, int] = field(default_factory=dict)

    @property
    def pims(self) -> list[int]:
        return sorted(self.kernels)

    def dram_block_reads(self, pim: int) -> np.ndarray:
        ks = self.kernels[pim]
        return np.concatenate([k.addrs for k in ks]) if ks else np.zeros(0, np.uint64)

    def counts(self) -> dict[str, int]:
        c = {"dram_block_read": 0, "kernel_launch": 0, "command_packet": 0,
             "buffer_fill_B": 0, "buffer_fill_C": 0, "buffer_drain_C": 0, "agen_step": 0}
        for ks in self.kernels.values():
            for k in ks:
                c["dram_block_read"] += k.blocks
                c["agen_step"] += max(k.blocks - 1, 0)
                c["buffer_fill_B"] += k.fill_b_bytes
                c["buffer_fill_C"] += k.fill_c_bytes
                c["buffer_drain_C"] += k.drain_c_bytes
                if k.launch:
                    c["kernel_launch"] += 1
                    c["command_packet"] += 1
                if k.per_block_packets:
                    c["command_packet"] += k.blocks
        return c

    @property
    def is_empty(self) -> bool:
        return all(not ks for ks in self.kernels.values()) and not any(self.controller.values())


def _tile_stream(plan: GemmPlan, pim: int, group: int, rpart, cpart) -> tuple[np.ndarray, np.ndarray]:
    gen = AddressGenerator(plan.spec, plan.geom, pim, group, rpart, cpart)
    addrs = gen.stream_array()
    return addrs, _gaps(addrs, plan)


def _gaps(addrs: np.ndarray, plan: GemmPlan) -> np.ndarray:
    if len(addrs) == 0:
        return np.zeros(0, dtype=np.int64)
    local = ((addrs - np.uint64(plan.geom.base_addr)) >> np.uint64(plan.mapping.block_offset_bits)).astype(np.int64)
    return np.concatenate([[0], np.diff(local)])


def _rows_of(addrs: np.ndarray, geom: MatrixGeometry) -> np.ndarray:
    return ((addrs - np.uint64(geom.base_addr)) // np.uint64(geom.row_bytes)).astype(np.int64)


def _split_by_row(addrs, gaps, geom):
    """Cut a row-major stream into per-row pieces."""
    if len(addrs) == 0:
        return []
    rows = _rows_of(addrs, geom)
    cuts = np.flatnonzero(np.diff(rows)) + 1
    return list(zip(np.split(addrs, cuts), np.split(gaps, cuts)))


def build_trace(plan: GemmPlan, simd_width: int | None = None) -> EventTrace:
    geom, n, eb = plan.geom, plan.n, plan.geom.elem_bytes
    rpb = plan.loc.rows_per_block
    block = 1 << plan.mapping.block_offset_bits
    mode = plan.mode
    kernels: dict[int, list[Kernel]] = {}
    for pim in plan.active_pims:
        ks: list[Kernel] = []
        crows = plan.loc.c_rows[pim]
        passes = range(n) if mode is Mode.NCHO else [-1]
        batch = 1 if mode is Mode.NCHO else n
        for col in passes:
            for ri, rpart in enumerate(plan.row_parts):
                c_here = int(np.count_nonzero((crows >= rpart[0]) & (crows < rpart[1])))
                c_bytes = c_here * batch * eb
                first_k = len(ks)
                for ci, cpart in enumerate(plan.col_parts):
                    if mode is Mode.NCHO:
                        parts, b_blocks = [], set()
                        for g in plan.groups:
                            a, _ = _tile_stream(plan, pim, g, rpart, cpart)
                            parts.append(a)
                            if len(a):
                                cbs = owned_col_blocks(plan.spec, geom, pim, g)
                                b_blocks.update(cbs[(cbs >= cpart[0]) & (cbs < cpart[1])].tolist())
                        addrs = np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.uint64)
                        tiles = [(-1, addrs, _gaps(addrs, plan), len(b_blocks) * rpb * batch * eb)]
                    else:
                        tiles = []
                        for g in plan.groups:
                            a, gp = _tile_stream(plan, pim, g, rpart, cpart)
                            cbs = np.asarray(plan.loc.b_blocks.get((pim, g), []))
                            nb = int(np.count_nonzero((cbs >= cpart[0]) & (cbs < cpart[1]))) if len(a) else 0
                            tiles.append((g, a, gp, nb * rpb * batch * eb))
                    for g, a, gp, b_bytes in tiles:
                        if len(a) == 0:
                            continue
                        if mode in (Mode.STP, Mode.PEI):
                            ks.append(Kernel(pim, "tile", ri, g, ci, a, gp, batch, fill_b_bytes=b_bytes,
                                             launch=mode is Mode.STP,
                                             per_block_packets=mode is Mode.PEI, column=col))
                        else:
                            kind = "gemv" if mode is Mode.NCHO else "row"
                            for j, (ra, rg) in enumerate(_split_by_row(a, gp, geom)):
                                ks.append(Kernel(pim, kind, ri, g, ci, ra, rg, batch,
                                                 fill_b_bytes=b_bytes if j == 0 else 0, column=col))
                if len(ks) > first_k:
                    ks[first_k].fill_c_bytes = c_bytes
                    ks[-1].drain_c_bytes = c_bytes
        kernels[pim] = ks
    loc = plan.loc
    accelerated = mode is Mode.STP
    controller = {
        "localize_read_bytes": loc.distinct_b_bytes if accelerated else loc.replication_bytes,
        "localize_write_bytes": loc.replication_bytes + loc.reduction_bytes,
        "reduce_read_bytes": loc.reduction_bytes,
        "reduce_write_bytes": loc.c_bytes,
        "accelerated": int(accelerated),
        "scratchpad_direct": int(loc.scratchpad_direct),
    }
    return EventTrace(mode, plan.level, n, kernels, block, eb, simd_width, controller)


def reconcile(trace: EventTrace, plan: GemmPlan) -> list[str]:
    """Cross-check trace counts against the plan; returns the problems found."""
    problems = []
    for pim in plan.active_pims:
        want = []
        for rpart in plan.row_parts:
            for g in plan.groups:
                for cpart in plan.col_parts:
                    want.append(AddressGenerator(plan.spec, plan.geom, pim, g, rpart, cpart).stream_array())
        want = np.sort(np.concatenate(want)) if want else np.zeros(0, np.uint64)
        got = trace.dram_block_reads(pim)
        if trace.mode is Mode.NCHO:
            got = np.sort(got[: len(got) // max(trace.n, 1)]) if trace.n else got
        else:
            got = np.sort(got)
        if not np.array_equal(got, want):
            problems.append(f"PIM {pim}: {len(got)} block reads, plan has {len(want)}")
    return problems


# -- numerics --------------------------------------------------------------------

def _pim_partial(plan: GemmPlan, A64: np.ndarray, bufs: dict[int, np.ndarray], pim: int,
                 kernels: list[Kernel], n_cols: int, col: int) -> np.ndarray:
    geom, rpb = plan.geom, plan.loc.rows_per_block
    rows_c = plan.loc.c_rows[pim]
    acc = np.zeros((len(rows_c), n_cols), dtype=np.float64)
    if not kernels:
        return acc
    addrs = np.concatenate([k.addrs for k in kernels])
    if len(addrs) == 0:
        return acc
    off = (addrs - np.uint64(geom.base_addr)).astype(np.int64)
    rows = off // geom.row_bytes
    cbs = (off % geom.row_bytes) // (rpb * geom.elem_bytes)
    groups = group_ids_of(plan.spec, addrs)
    nb = geom.row_blocks(rpb * geom.elem_bytes)
    pos = np.full((plan.spec.num_groups, nb), -1, dtype=np.int64)
    for g in plan.groups:
        owned = plan.loc.b_blocks.get((pim, g), [])
        pos[g, owned] = np.arange(len(owned))
    p = pos[groups, cbs]
    contrib = np.zeros((len(addrs), n_cols), dtype=np.float64)
    for g in plan.groups:
        sel = np.flatnonzero(groups == g)
        if len(sel) == 0:
            continue
        buf = bufs[g] if col < 0 else bufs[g][:, col:col + 1]
        for j in range(rpb):
            contrib[sel] += A64[rows[sel], cbs[sel] * rpb + j][:, None] * buf[p[sel] * rpb + j]
    # accumulate in stream order: k-th visit of each row is added in pass k
    crow = np.searchsorted(rows_c, rows)
    order = np.argsort(crow, kind="stable")
    sorted_rows = crow[order]
    first = np.searchsorted(sorted_rows, sorted_rows, side="left")
    visit = np.empty(len(order), dtype=np.int64)
    visit[order] = np.arange(len(order)) - first
    for v in range(int(visit.max()) + 1):
        sel = visit == v
        acc[crow[sel]] += contrib[sel]
    return acc


def run_gemm(A: np.ndarray, B: np.ndarray, plan: GemmPlan,
             trace: EventTrace | None = None) -> tuple[np.ndarray, EventTrace]:
    """Execute the plan; returns C (float32) and the event trace."""
    geom = plan.geom
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeMismatch(f"cannot multiply {A.shape} by {B.shape}")
    if A.shape != (geom.m_rows, geom.k_cols) or B.shape[1] != plan.n:
        raise PlanGeometryMismatch(
            f"operands {A.shape}x{B.shape} do not match plan {geom.m_rows}x{geom.k_cols}, N={plan.n}")
    trace = trace or build_trace(plan)
    A64 = np.asarray(A, dtype=np.float32).astype(np.float64)
    B32 = np.asarray(B, dtype=np.float32)
    lb = localize_b(B32, plan.loc)
    partials = {}
    for pim in plan.active_pims:
        bufs = {g: b.astype(np.float64) for g, b in lb.buffers.get(pim, {}).items()}
        ks = trace.kernels[pim]
        if plan.mode is Mode.NCHO:
            part = np.zeros((len(plan.loc.c_rows[pim]), plan.n), dtype=np.float64)
            for col in range(plan.n):
                mine = [k for k in ks if k.column == col]
                part[:, col] = _pim_partial(plan, A64, bufs, pim, mine, 1, col)[:, 0]
        else:
            part = _pim_partial(plan, A64, bufs, pim, ks, plan.n, -1)
        partials[pim] = part
    C = reduce_c(partials, plan.loc, geom.m_rows)
    return C.astype(np.float32), trace


# -- shapes that are not powers of two ----------------------------------------------

def decompose_non_pow2(x: int) -> list[int]:
    """Greedy binary decomposition, largest panel first."""
    if x < 1:
        raise ValueError("dimension must be >= 1")
    return [1 << b for b in range(x.bit_length() - 1, -1, -1) if x >> b & 1]


def next_pow2(x: int) -> int:
    return 1 << (x - 1).bit_length()


@dataclass
class Panel:
    row0: int
    col0: int
    geom: MatrixGeometry


def panels(m: int, k: int, elem_bytes: int = 4, base_addr: int = 0, pad: bool = False,
           min_k: int = 16) -> list[Panel]:
    """Power-of-two sub-matrices covering an m x k matrix, laid out at aligned bases.

    Columns narrower than one cache block are zero padded up to ``min_k``.
    """
    ms = [next_pow2(m)] if pad else decompose_non_pow2(m)
    ks = [max(next_pow2(k), min_k)] if pad else decompose_non_pow2(k)
    small = [kk for kk in ks if kk < min_k]
    if small:
        # the sub-block pieces add up to less than min_k: one padded panel covers them
        ks = [kk for kk in ks if kk >= min_k] + [min_k]
    out, cursor = [], base_addr
    shapes = []
    r = 0
    for mm in ms:
        c = 0
        for kk in ks:
            shapes.append((r, c, mm, kk))
            c += kk
        r += mm
    # place biggest first so each panel lands on a base aligned to its own size
    for r, c, mm, kk in sorted(shapes, key=lambda s: -s[2] * s[3]):
        size = mm * kk * elem_bytes
        cursor = -(-cursor // size) * size
        out.append(Panel(r, c, MatrixGeometry(mm, kk, elem_bytes, cursor)))
        cursor += size
    out.sort(key=lambda p: (p.row0, p.col0))
    return out


def gemm_any(A: np.ndarray, B: np.ndarray, mapping: AddressMapping, level, mode=Mode.STP,
             pad: bool = False, scratchpad: int | None = None) -> np.ndarray:
    """C = A x B for any shape, by serially executing power-of-two panels."""
    m, k = A.shape
    if B.shape[0] != k:
        raise ShapeMismatch(f"cannot multiply {A.shape} by {B.shape}")
    n = B.shape[1]
    C = np.zeros((m, n), dtype=np.float64)
    for p in panels(m, k, pad=pad):
        g = p.geom
        a = np.zeros((g.m_rows, g.k_cols), dtype=np.float32)
        sub = A[p.row0:p.row0 + g.m_rows, p.col0:p.col0 + g.k_cols]
        a[:sub.shape[0], :sub.shape[1]] = sub
        b = np.zeros((g.k_cols, n), dtype=np.float32)
        bsub = B[p.col0:p.col0 + g.k_cols]
        b[:bsub.shape[0]] = bsub
        plan = make_plan(mapping, g, n, level, mode, scratchpad)
        c, _ = run_gemm(a, b, plan)
        rows = min(g.m_rows, m - p.row0)
        C[p.row0:p.row0 + rows] += c[:rows]
    return C.astype(np.float32)
