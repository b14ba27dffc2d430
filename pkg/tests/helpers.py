"""Shared builders and brute-force oracles for the test suite."""

import random

from stepstone.addrmap import AddressMapping, DramField
from stepstone.grouping import group_id


def random_mapping(rng: random.Random, total_bits: int = 16, bo: int = 6,
                   n_ch: int = 1, n_rk: int = 1, n_bg: int = 2, mixes: int = 12) -> AddressMapping:
    """An invertible mapping built from identity by random row XORs."""
    n = total_bits - bo
    rows = [1 << (bo + i) for i in range(n)]
    for _ in range(mixes):
        i, j = rng.sample(range(n), 2)
        rows[i] ^= rows[j]
    rng.shuffle(rows)
    names = ([f"CH{i}" for i in range(n_ch)] + [f"RK{i}" for i in range(n_rk)]
             + [f"BG{i}" for i in range(n_bg)])
    rest = n - len(names)
    n_col = rest // 2
    names += [f"COL{bo + i}" for i in range(n_col)] + [f"ROW{i}" for i in range(rest - n_col)]
    fields = [DramField(nm, frozenset(b for b in range(total_bits) if r >> b & 1))
              for nm, r in zip(names, rows)]
    return AddressMapping(fields, bo, total_bits, "random")


def brute_stream(mapping, spec, geom, pim, group, row_part=None, col_part=None):
    """Linear scan over every block of the matrix."""
    rb = geom.row_blocks(1 << mapping.block_offset_bits)
    r0, r1 = row_part or (0, geom.m_rows)
    c0, c1 = col_part or (0, rb)
    out = []
    for a in range(geom.base_addr, geom.base_addr + geom.matrix_bytes, 1 << mapping.block_offset_bits):
        r, c = divmod((a - geom.base_addr) >> mapping.block_offset_bits, rb)
        if (r0 <= r < r1 and c0 <= c < c1 and mapping.pim_id(a, spec.level).value == pim
                and group_id(spec, a) == group):
            out.append(a)
    return out
