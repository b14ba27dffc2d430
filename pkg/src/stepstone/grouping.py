"""Block grouping of the weight matrix.

Cache blocks of A that land on one PIM and share the same B rows and C rows
form a block group. Groups are defined by the PIM ID bits whose XOR sources
touch both the matrix-column field (MCOL, low address bits inside a row) and
the matrix-row field (MROW); the parity of such an ID bit's MROW sources is
one group ID bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .addrmap import AddressMapping, PimLevel, bits_of, parity, parity_array
from .errors import (
    AddressOutsideMatrix,
    GeometryError,
    MatrixSmallerThanBlock,
    UnalignedAddress,
)


def is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def log2(x: int) -> int:
    return x.bit_length() - 1


@dataclass(frozen=True)
class MatrixGeometry:
    """Row-major M x K weight matrix at an aligned physical base address."""

    m_rows: int
    k_cols: int
    elem_bytes: int = 4
    base_addr: int = 0

    @property
    def row_bytes(self) -> int:
        return self.k_cols * self.elem_bytes

    @property
    def matrix_bytes(self) -> int:
        return self.m_rows * self.row_bytes

    @property
    def col_bits(self) -> int:
        return log2(self.row_bytes)

    @property
    def span_bits(self) -> int:
        return log2(self.matrix_bytes)

    def row_blocks(self, block_bytes: int = 64) -> int:
        return self.row_bytes // block_bytes

    def num_blocks(self, block_bytes: int = 64) -> int:
        return self.matrix_bytes // block_bytes

    def validate(self, block_bytes: int = 64) -> None:
        for name in ("m_rows", "k_cols", "elem_bytes"):
            if not is_pow2(getattr(self, name)):
                raise GeometryError(f"{name}={getattr(self, name)} is not a power of two")
        if self.row_bytes < block_bytes:
            raise MatrixSmallerThanBlock(
                f"a {self.k_cols}-element row ({self.row_bytes}B) is smaller than a {block_bytes}B block")
        if self.base_addr % self.matrix_bytes:
            raise GeometryError(
                f"base {self.base_addr:#x} is not aligned to the matrix size {self.matrix_bytes:#x}")

    def contains(self, addr: int) -> bool:
        return self.base_addr <= addr < self.base_addr + self.matrix_bytes

    def block_addr(self, row: int, col_block: int, block_bytes: int = 64) -> int:
        return self.base_addr + row * self.row_bytes + col_block * block_bytes


@dataclass(frozen=True)
class GroupBit:
    pim_bit: int
    field_name: str
    mrow_mask: int

    @property
    def mrow_sources(self) -> list[int]:
        return bits_of(self.mrow_mask)


@dataclass(frozen=True)
class GroupSpec:
    level: PimLevel
    block_offset_bits: int
    base_addr: int
    col_bits: int
    span_bits: int
    id_masks: tuple[int, ...]  # PIM ID bit 0 first
    id_names: tuple[str, ...]
    group_bits: tuple[GroupBit, ...]
    pinned_id_bits: dict[int, int]
    row_id_bits: tuple[int, ...]  # ID bits fed only by MROW (and constant) sources
    col_id_bits: tuple[int, ...]  # ID bits fed only by MCOL (and constant) sources
    active_pims: tuple[int, ...] = field(default=())

    @property
    def num_groups(self) -> int:
        return 1 << len(self.group_bits)

    @property
    def num_id_bits(self) -> int:
        return len(self.id_masks)

    @property
    def mcol_mask(self) -> int:
        return ((1 << self.col_bits) - 1) & ~((1 << self.block_offset_bits) - 1)

    @property
    def mrow_mask(self) -> int:
        return ((1 << self.span_bits) - 1) & ~((1 << self.col_bits) - 1)

    @property
    def span_mask(self) -> int:
        return self.mcol_mask | self.mrow_mask

    @cached_property
    def base_parities(self) -> tuple[int, ...]:
        """Constant contribution of address bits above the matrix to each ID bit."""
        return tuple(parity(self.base_addr & m) for m in self.id_masks)

    @property
    def id_affecting_mask(self) -> int:
        m = 0
        for mask in self.id_masks:
            m |= mask
        return m & self.span_mask

    def contains(self, addr: int) -> bool:
        return self.base_addr <= addr < self.base_addr + (1 << self.span_bits)

    def describe(self) -> dict:
        return {
            "level": self.level.value,
            "mcol_bits": [self.block_offset_bits, self.col_bits],
            "mrow_bits": [self.col_bits, self.span_bits],
            "group_bits": [
                {"pim_bit": g.pim_bit, "field": g.field_name,
                 "mrow_sources": g.mrow_sources} for g in self.group_bits
            ],
            "pinned_id_bits": {self.id_names[i]: v for i, v in sorted(self.pinned_id_bits.items())},
            "row_id_bits": [self.id_names[i] for i in self.row_id_bits],
            "col_id_bits": [self.id_names[i] for i in self.col_id_bits],
            "num_groups": self.num_groups,
            "active_pims": list(self.active_pims),
        }


def _affine_image(offset: int, vectors: list[int]) -> list[int]:
    basis: dict[int, int] = {}
    for v in vectors:
        while v:
            top = v.bit_length() - 1
            if top not in basis:
                basis[top] = v
                break
            v ^= basis[top]
    image = {offset}
    for b in basis.values():
        image |= {x ^ b for x in image}
    return sorted(image)


def derive_groups(mapping: AddressMapping, geom: MatrixGeometry, level: PimLevel) -> GroupSpec:
    mapping.require_valid()
    bo = mapping.block_offset_bits
    geom.validate(1 << bo)
    if geom.base_addr + geom.matrix_bytes > 1 << mapping.total_bits:
        raise GeometryError("matrix extends past the mapped address space")
    fields = mapping.id_fields(level)
    mcol = ((1 << geom.col_bits) - 1) & ~((1 << bo) - 1)
    mrow = ((1 << geom.span_bits) - 1) & ~((1 << geom.col_bits) - 1)
    group_bits, pinned, row_only, col_only = [], {}, [], []
    for i, f in enumerate(fields):
        m = f.mask
        in_col, in_row = m & mcol, m & mrow
        if in_col and in_row:
            group_bits.append(GroupBit(i, f.name, in_row))
        elif in_row:
            row_only.append(i)
        elif in_col:
            col_only.append(i)
        else:
            pinned[i] = parity(geom.base_addr & m)
    base_id = sum(parity(geom.base_addr & f.mask) << i for i, f in enumerate(fields))
    columns = []
    for j in bits_of(mcol | mrow):
        columns.append(sum(((f.mask >> j) & 1) << i for i, f in enumerate(fields)))
    spec = GroupSpec(
        level=level,
        block_offset_bits=bo,
        base_addr=geom.base_addr,
        col_bits=geom.col_bits,
        span_bits=geom.span_bits,
        id_masks=tuple(f.mask for f in fields),
        id_names=tuple(f.name for f in fields),
        group_bits=tuple(group_bits),
        pinned_id_bits=pinned,
        row_id_bits=tuple(row_only),
        col_id_bits=tuple(col_only),
        active_pims=tuple(_affine_image(base_id, columns)),
    )
    return spec


def _check_inside(spec: GroupSpec, addr: int) -> None:
    if not spec.contains(addr):
        raise AddressOutsideMatrix(f"address {addr:#x} is outside the matrix")


def group_id(spec: GroupSpec, addr: int) -> int:
    _check_inside(spec, addr)
    return sum(parity(addr & g.mrow_mask) << j for j, g in enumerate(spec.group_bits))


def operand_index(spec: GroupSpec, geom: MatrixGeometry, addr: int) -> tuple[int, int]:
    """(row index of A, column-block index of A) for a block address."""
    _check_inside(spec, addr)
    block = 1 << spec.block_offset_bits
    if addr % block:
        raise UnalignedAddress(f"address {addr:#x} is not block aligned")
    off = addr - geom.base_addr
    return off // geom.row_bytes, (off % geom.row_bytes) // block


# -- vectorised helpers ------------------------------------------------------

def block_addresses(geom: MatrixGeometry, block_bytes: int = 64) -> np.ndarray:
    return (np.uint64(geom.base_addr)
            + np.arange(geom.num_blocks(block_bytes), dtype=np.uint64) * np.uint64(block_bytes))


def pim_ids_of(spec: GroupSpec, addrs: np.ndarray) -> np.ndarray:
    out = np.zeros(addrs.shape, dtype=np.int64)
    for i, m in enumerate(spec.id_masks):
        out |= parity_array(addrs, m).astype(np.int64) << i
    return out


def group_ids_of(spec: GroupSpec, addrs: np.ndarray) -> np.ndarray:
    out = np.zeros(addrs.shape, dtype=np.int64)
    for j, g in enumerate(spec.group_bits):
        out |= parity_array(addrs, g.mrow_mask).astype(np.int64) << j
    return out


def _col_part_parity(spec: GroupSpec, geom: MatrixGeometry, mask: int) -> np.ndarray:
    block = 1 << spec.block_offset_bits
    offs = np.arange(geom.row_blocks(block), dtype=np.uint64) * np.uint64(block)
    return parity_array(offs, mask & spec.mcol_mask)


def _row_part_parity(spec: GroupSpec, geom: MatrixGeometry, mask: int) -> np.ndarray:
    offs = np.arange(geom.m_rows, dtype=np.uint64) * np.uint64(geom.row_bytes)
    return parity_array(offs, mask & spec.mrow_mask)


def owned_rows(spec: GroupSpec, geom: MatrixGeometry, pim: int, group: int) -> np.ndarray:
    """Indices of A rows holding at least one block of (pim, group)."""
    for i, v in spec.pinned_id_bits.items():
        if (pim >> i & 1) != v:
            return np.zeros(0, dtype=np.int64)
    ok = np.ones(geom.m_rows, dtype=bool)
    for j, g in enumerate(spec.group_bits):
        ok &= _row_part_parity(spec, geom, g.mrow_mask) == (group >> j & 1)
    for i in spec.row_id_bits:
        want = (pim >> i & 1) ^ spec.base_parities[i]
        ok &= _row_part_parity(spec, geom, spec.id_masks[i]) == want
    if not ok.any() or len(owned_col_blocks(spec, geom, pim, group)) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(ok)


def owned_col_blocks(spec: GroupSpec, geom: MatrixGeometry, pim: int, group: int) -> np.ndarray:
    """Column-block indices that (pim, group) owns in each of its rows."""
    ok = np.ones(geom.row_blocks(1 << spec.block_offset_bits), dtype=bool)
    gbit_of = {g.pim_bit: j for j, g in enumerate(spec.group_bits)}
    for i in list(gbit_of) + list(spec.col_id_bits):
        want = (pim >> i & 1) ^ spec.base_parities[i]
        if i in gbit_of:
            # base_parities covers bits above the span; the MROW part is the group bit
            want ^= group >> gbit_of[i] & 1
        ok &= _col_part_parity(spec, geom, spec.id_masks[i]) == want
    return np.flatnonzero(ok)


def pim_group_pairs(spec: GroupSpec, geom: MatrixGeometry) -> list[tuple[int, int]]:
    """Non-empty (pim, group) pairs in ascending order."""
    pairs = []
    for pim in spec.active_pims:
        for g in range(spec.num_groups):
            if len(owned_rows(spec, geom, pim, g)):
                pairs.append((pim, g))
    return pairs
