import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_mapping
from stepstone.addrmap import PimLevel
from stepstone.errors import (
    AddressOutsideMatrix, GeometryError, MatrixSmallerThanBlock, UnalignedAddress,
)
from stepstone.grouping import (
    MatrixGeometry, block_addresses, derive_groups, group_id, group_ids_of, operand_index,
    owned_col_blocks, owned_rows, pim_group_pairs, pim_ids_of,
)


def sharing_classes(mapping, geom, level):
    """Count connected components of blocks linked by a shared row or column block, per PIM."""
    total = 0
    rb = geom.row_blocks()
    by_pim = {}
    for a in range(geom.base_addr, geom.base_addr + geom.matrix_bytes, 64):
        r, c = divmod((a - geom.base_addr) // 64, rb)
        by_pim.setdefault(mapping.pim_id(a, level).value, []).append((r, c))
    for blocks in by_pim.values():
        parent = {}

        def find(x):
            while parent.setdefault(x, x) != x:
                x = parent[x]
            return x
        for r, c in blocks:
            parent[find(("r", r))] = find(("c", c))
        total += len({find(("r", r)) for r, _ in blocks})
    return total


def test_skl_16x512(skl):
    g = MatrixGeometry(16, 512)
    s = derive_groups(skl, g, PimLevel.BANK_GROUP)
    assert [(b.field_name, b.mrow_sources) for b in s.group_bits] == [("BG0", [14]), ("CH", [12, 13])]
    assert s.num_groups == 4
    assert s.active_pims == (0, 1, 8, 9)
    assert sharing_classes(skl, g, PimLevel.BANK_GROUP) == 4 * len(s.active_pims)


def test_toy_16x64(toy):
    g = MatrixGeometry(16, 64)
    s = derive_groups(toy, g, PimLevel.DEVICE)
    assert [(b.field_name, b.mrow_sources) for b in s.group_bits] == [("RK0", [10]), ("RK1", [11])]
    assert s.num_groups == 4
    assert sharing_classes(toy, g, PimLevel.DEVICE) == 16


def test_toy_single_block(toy):
    s = derive_groups(toy, MatrixGeometry(1, 16), PimLevel.DEVICE)
    assert s.num_groups == 1


def test_group_id_examples(toy, skl):
    s = derive_groups(toy, MatrixGeometry(16, 64), PimLevel.DEVICE)
    assert group_id(s, 0x000) == 0
    assert group_id(s, 0x400) == 1
    s2 = derive_groups(skl, MatrixGeometry(16, 512), PimLevel.BANK_GROUP)
    assert group_id(s2, 1 << 14) == 0b01
    with pytest.raises(AddressOutsideMatrix):
        group_id(s, 0x1000)


def test_operand_index(toy):
    g = MatrixGeometry(16, 64)
    s = derive_groups(toy, g, PimLevel.DEVICE)
    assert operand_index(s, g, 0x140) == (1, 1)
    assert operand_index(s, g, 0) == (0, 0)
    assert operand_index(s, g, g.matrix_bytes - 64) == (15, 3)
    with pytest.raises(UnalignedAddress):
        operand_index(s, g, 0x141)
    with pytest.raises(AddressOutsideMatrix):
        operand_index(s, g, g.matrix_bytes)


def test_geometry_errors(toy):
    with pytest.raises(MatrixSmallerThanBlock):
        derive_groups(toy, MatrixGeometry(16, 8), PimLevel.DEVICE)
    with pytest.raises(GeometryError):
        derive_groups(toy, MatrixGeometry(16, 48), PimLevel.DEVICE)
    with pytest.raises(GeometryError):
        derive_groups(toy, MatrixGeometry(4, 16, base_addr=64), PimLevel.DEVICE)


def test_base_offset_pins(skl):
    g = MatrixGeometry(16, 512, base_addr=1 << 15)
    s = derive_groups(skl, g, PimLevel.BANK_GROUP)
    assert s.pinned_id_bits[s.id_names.index("BG1")] == 1
    addrs = block_addresses(g)
    assert set(pim_ids_of(s, addrs).tolist()) == set(s.active_pims)


def _check_partition(mapping, geom, level):
    s = derive_groups(mapping, geom, level)
    addrs = block_addresses(geom)
    pims = pim_ids_of(s, addrs)
    groups = group_ids_of(s, addrs)
    rb = geom.row_blocks()
    rows = np.arange(len(addrs)) // rb
    cols = np.arange(len(addrs)) % rb
    assert set(pims.tolist()) == set(s.active_pims)
    covered = 0
    for pim, grp in pim_group_pairs(s, geom):
        sel = (pims == pim) & (groups == grp)
        covered += int(sel.sum())
        assert set(rows[sel].tolist()) == set(owned_rows(s, geom, pim, grp).tolist())
        assert set(cols[sel].tolist()) == set(owned_col_blocks(s, geom, pim, grp).tolist())
        # every owned row holds every owned column block: the group is a full tile
        assert sel.sum() == len(owned_rows(s, geom, pim, grp)) * len(owned_col_blocks(s, geom, pim, grp))
    assert covered == len(addrs)
    # group invariance along rows
    s_mcol = s.mcol_mask
    for a in addrs[:: max(1, len(addrs) // 50)].tolist():
        row_start = a & ~s_mcol
        assert group_id(s, a) == group_id(s, row_start)
    return s


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(list(PimLevel)), st.integers(0, 6), st.integers(4, 8))
def test_partition_random(seed, level, lm, lk):
    rng = random.Random(seed)
    m = random_mapping(rng, total_bits=18)
    g = MatrixGeometry(1 << lm, 1 << lk)
    if g.matrix_bytes > 1 << 18:
        return
    span = g.matrix_bytes
    g = MatrixGeometry(g.m_rows, g.k_cols, base_addr=rng.randrange((1 << 18) // span) * span)
    s = _check_partition(m, g, level)
    assert sharing_classes(m, g, level) == len(pim_group_pairs(s, g))


@pytest.mark.parametrize("shape", [(16, 512), (64, 1024), (256, 256), (8, 4096)])
@pytest.mark.parametrize("level", list(PimLevel))
def test_partition_skl(skl, shape, level):
    _check_partition(skl, MatrixGeometry(*shape), level)


def test_describe(skl):
    d = derive_groups(skl, MatrixGeometry(16, 512), PimLevel.BANK_GROUP).describe()
    assert d["num_groups"] == 4 and d["pinned_id_bits"] == {"BG1": 0, "RK": 0}
