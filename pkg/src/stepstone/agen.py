"""Memory-side address generation for one (PIM, group, partition) stream.

The targets (PIM ID bits, group ID bits and column-partition bits) are a set
of parity equations over the block-address bits of the matrix. After
elimination every equation owns one *pivot* bit, its lowest address bit, and
all of its other bits are free (non-pivot) bits above the pivot. A pivot is
therefore fixed by the free bits above it, so valid addresses are ordered
exactly like their free bits. The generator keeps the parity of every
equation intact as it advances:

* increment the block address;
* check: find the most significant pivot whose parity is broken;
* correct: if that pivot reads 0 it is set and the lower bits are rebuilt
  (no carry, done); if it reads 1 a carry is needed and is forwarded past
  the chain of pivot bits directly to the next free address bit.

Setting a pivot together with its adjacent partner (``01`` to ``11``) and
forwarding the carry over a run of parity-pinned bits are both handled by
the correction step. The naive generator simply increments until the
targets match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .addrmap import AddressMapping, parity, parity_array
from .grouping import GroupSpec, MatrixGeometry, log2


def _low(n: int) -> int:
    return (1 << n) - 1


@dataclass
class AgenStats:
    steps: int = 0
    iterations: int = 0
    instant_corrections: int = 0
    carries: int = 0
    forwarded_bits: int = 0


class AddressGenerator:
    """Generates the addresses of one (pim, group, row/col partition) in order."""

    def __init__(self, spec: GroupSpec, geom: MatrixGeometry, pim: int, group: int,
                 row_part: tuple[int, int] | None = None,
                 col_part: tuple[int, int] | None = None):
        self.spec, self.geom = spec, geom
        self.pim, self.group = pim, group
        bo = spec.block_offset_bits
        self.bo = bo
        self.nbits = spec.span_bits - bo
        self.full = _low(self.nbits)
        row_blocks = geom.row_blocks(1 << bo)
        self.row_part = row_part or (0, geom.m_rows)
        self.col_part = col_part or (0, row_blocks)
        r0, r1 = self.row_part
        if not 0 <= r0 <= r1 <= geom.m_rows:
            raise ValueError(f"row partition {self.row_part} outside 0..{geom.m_rows}")
        self.start = r0 * row_blocks
        self.end = r1 * row_blocks

        raw = []  # (local mask, target)
        for i, m in enumerate(spec.id_masks):
            raw.append(((m & spec.span_mask) >> bo, (pim >> i & 1) ^ spec.base_parities[i]))
        for j, g in enumerate(spec.group_bits):
            raw.append((g.mrow_mask >> bo, group >> j & 1))
        raw.extend(self._col_partition_equations(row_blocks))
        self.raw_equations = raw
        self.feasible, eqs = self._reduce(raw)
        eqs.sort(key=lambda e: e[0], reverse=True)
        self.pivots = [p for p, _, _ in eqs]          # descending
        self.free_masks = [fm for _, fm, _ in eqs]
        self.targets = [t for _, _, t in eqs]
        self.pivot_mask = sum(1 << p for p in self.pivots)
        self.free_mask = self.full & ~self.pivot_mask
        self.id_affecting_bits = bin(spec.id_affecting_mask).count("1")
        part_mask = 0
        for m, _ in raw[len(spec.id_masks) + len(spec.group_bits):]:
            part_mask |= m << bo
        # partition bits are carry-forwarded like ID bits, so they count toward the bound
        self.constrained_bits = bin(spec.id_affecting_mask | part_mask).count("1")
        self.stats = AgenStats()

    def _col_partition_equations(self, row_blocks: int) -> list[tuple[int, int]]:
        c0, c1 = self.col_part
        size = c1 - c0
        if (c0, c1) == (0, row_blocks):
            return []
        if size <= 0 or size & (size - 1) or c0 % size or c1 > row_blocks:
            raise ValueError(f"column partition {self.col_part} must be an aligned power-of-two range")
        col_bits = log2(row_blocks)
        return [(1 << b, c0 >> b & 1) for b in range(log2(size), col_bits)]

    @staticmethod
    def _reduce(raw):
        rows = [(m, t) for m, t in raw]
        done = []
        while rows:
            rows = [(m, t) for m, t in rows if m or t]
            if any(m == 0 for m, _ in rows):
                return False, []
            if not rows:
                break
            k = min(range(len(rows)), key=lambda i: rows[i][0] & -rows[i][0])
            pm, pt = rows.pop(k)
            low = pm & -pm
            rows = [((m ^ pm, t ^ pt) if m & low else (m, t)) for m, t in rows]
            done.append([pm, pt])
        # back-substitute so each equation contains exactly one pivot
        for i in range(len(done) - 1, -1, -1):
            low = done[i][0] & -done[i][0]
            for j in range(i):
                if done[j][0] & low:
                    done[j][0] ^= done[i][0]
                    done[j][1] ^= done[i][1]
        out = []
        for m, t in done:
            low = m & -m
            out.append((low.bit_length() - 1, m ^ low, t))
        return True, out

    # -- core ---------------------------------------------------------------
    def _fill(self, a: int) -> int:
        a &= ~self.pivot_mask
        for p, fm, t in zip(self.pivots, self.free_masks, self.targets):
            a |= (t ^ parity(a & fm)) << p
        return a

    def is_valid_local(self, a: int) -> bool:
        return self.feasible and all(parity(a & m) == t for m, t in self.raw_equations)

    def _ceil_valid(self, a: int) -> tuple[int | None, int]:
        """Smallest valid local block address >= a, and the iterations used."""
        if not self.feasible:
            return None, 1
        iters = 0
        st = self.stats
        while True:
            if a >= self.end:
                return None, max(iters, 1)
            iters += 1
            for p, fm, t in zip(self.pivots, self.free_masks, self.targets):
                if (a >> p & 1) != t ^ parity(a & fm):
                    break
            else:
                return a, iters
            if not a >> p & 1:
                # 0 -> 1: set the pivot, rebuild the lower bits; no carry
                st.instant_corrections += 1
                a = self._fill((a & ~_low(p)) | (1 << p))
                if a >= self.end:
                    return None, iters
                return a, iters
            # 1 -> 0 needs a carry; forward it over pivot bits to the next free bit
            st.carries += 1
            fm_hi = self.free_mask & ~_low(p + 1)
            y = ((a & fm_hi) | (self.full & ~fm_hi & ~_low(p + 1))) + (1 << (p + 1))
            if y >> self.nbits:
                return None, iters
            landing = (y & fm_hi & -(y & fm_hi)).bit_length() - 1
            st.forwarded_bits += bin(self.pivot_mask & _low(landing) & ~_low(p + 1)).count("1")
            a = self._fill(y & fm_hi)

    def _to_phys(self, local: int | None) -> int | None:
        return None if local is None else self.geom.base_addr + (local << self.bo)

    def _to_local(self, addr: int) -> int:
        return (addr - self.geom.base_addr) >> self.bo

    def first(self) -> int | None:
        local, _ = self._ceil_valid(self.start)
        return self._to_phys(local)

    def next(self, addr: int) -> tuple[int | None, int]:
        local, iters = self._ceil_valid(self._to_local(addr) + 1)
        self.stats.steps += 1
        self.stats.iterations += iters
        return self._to_phys(local), iters

    def naive_next(self, addr: int) -> tuple[int | None, int]:
        a = self._to_local(addr)
        count = 0
        while True:
            a += 1
            count += 1
            if a >= self.end:
                return None, count
            if self.is_valid_local(a):
                return self._to_phys(a), count

    def stream(self, naive: bool = False) -> tuple[list[int], list[int]]:
        """All addresses and the per-step iteration counts (first entry 0)."""
        addrs, costs = [], []
        a, last = self.first(), 0
        step = self.naive_next if naive else self.next
        while a is not None:
            addrs.append(a)
            costs.append(last)
            a, last = step(a)
        return addrs, costs

    def stream_array(self) -> np.ndarray:
        """Vectorised stream (identical contents to ``stream``), for bulk timing."""
        if not self.feasible or self.start >= self.end:
            return np.zeros(0, dtype=np.uint64)
        local = np.arange(self.start, self.end, dtype=np.uint64)
        ok = np.ones(local.shape, dtype=bool)
        for m, t in self.raw_equations:
            ok &= parity_array(local, m) == t
        return np.uint64(self.geom.base_addr) + (local[ok] << np.uint64(self.bo))


@dataclass
class AgenState:
    generator: AddressGenerator
    current_addr: int | None = None
    iter_count_last: int = 0
    exhausted: bool = False

    @property
    def target_pim(self) -> int:
        return self.generator.pim

    @property
    def target_group(self) -> int:
        return self.generator.group

    @property
    def row_partition(self) -> tuple[int, int]:
        return self.generator.row_part

    @property
    def col_partition(self) -> tuple[int, int]:
        return self.generator.col_part


def make_state(mapping: AddressMapping, spec: GroupSpec, geom: MatrixGeometry, pim: int,
               group: int, row_part=None, col_part=None) -> AgenState:
    mapping.require_valid()
    return AgenState(AddressGenerator(spec, geom, pim, group, row_part, col_part))


def first_address(mapping, spec, geom, pim, group, row_part=None, col_part=None) -> int | None:
    """Lowest matching block address, or None when the stream is empty."""
    return make_state(mapping, spec, geom, pim, group, row_part, col_part).generator.first()


def _advance(state: AgenState, naive: bool) -> int | None:
    gen = state.generator
    if state.exhausted:
        return None
    if state.current_addr is None:
        nxt, iters = gen.first(), 1
    elif naive:
        nxt, iters = gen.naive_next(state.current_addr)
    else:
        nxt, iters = gen.next(state.current_addr)
    state.iter_count_last = iters
    state.current_addr = nxt
    state.exhausted = nxt is None
    return nxt


def next_address(state: AgenState) -> int | None:
    return _advance(state, naive=False)


def naive_next_address(state: AgenState) -> tuple[int | None, int]:
    nxt = _advance(state, naive=True)
    return nxt, state.iter_count_last


def enumerate_addresses(mapping, spec, geom, pim, group, row_part=None, col_part=None,
                        naive: bool = False) -> list[int]:
    state = make_state(mapping, spec, geom, pim, group, row_part, col_part)
    out = []
    while (a := _advance(state, naive)) is not None:
        out.append(a)
    return out
