import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_mapping
from stepstone.addrmap import PimLevel
from stepstone.errors import MissingPartial, RegionTooSmall, ShapeMismatch
from stepstone.grouping import MatrixGeometry, derive_groups, group_id
from stepstone.localize import (
    PrivateRegion, default_regions, localize_b, plan_localization, reduce_c,
)


def ownership(mapping, geom, level):
    """(pim, group) -> col blocks and pim -> rows, by decoding every block of A."""
    spec = derive_groups(mapping, geom, level)
    rb = geom.row_blocks()
    cols, rows = {}, {}
    for a in range(geom.base_addr, geom.base_addr + geom.matrix_bytes, 64):
        r, c = divmod((a - geom.base_addr) // 64, rb)
        p = mapping.pim_id(a, level).value
        cols.setdefault((p, group_id(spec, a)), set()).add(c)
        rows.setdefault(p, set()).add(r)
    return spec, cols, rows


def toy_plan(toy, n=1, **kw):
    g = MatrixGeometry(16, 64)
    spec = derive_groups(toy, g, PimLevel.DEVICE)
    return g, spec, plan_localization(toy, spec, g, PimLevel.DEVICE, n=n, **kw)


def test_toy_replication_bytes(toy):
    _, _, plan = toy_plan(toy)
    assert len(plan.b_blocks) == 16
    assert all(len(v) == 1 for v in plan.b_blocks.values())
    assert plan.replication_bytes == 4 * 4 * 16 * 1 * 4


def test_toy_every_pim_needs_all_of_b(toy):
    # both rank bits mix a column and a row bit, the worst sharing case
    g, _, plan = toy_plan(toy)
    for p in plan.pims:
        assert plan.b_footprint(p) == g.k_cols * 1 * 4


def test_toy_pim0_group1_rows(toy):
    g, spec, plan = toy_plan(toy)
    B = np.arange(64, dtype=np.float32).reshape(64, 1)
    loc = localize_b(B, plan)
    # PIM 0 / group 1 owns column block 1 of A, i.e. B rows 16..31
    assert plan.b_blocks[(0, 1)] == [1]
    np.testing.assert_array_equal(loc.buffers[0][1][:, 0], np.arange(16, 32))


def test_fan_out_counts_one_read_per_block(toy):
    _, _, plan = toy_plan(toy)
    B = np.ones((64, 1), dtype=np.float32)
    loc = localize_b(B, plan)
    # each 64B block of B feeds 4 PIMs: one read, four writes
    assert loc.read_blocks == 4
    assert loc.write_blocks == 16
    assert loc.read_bytes == plan.distinct_b_bytes


def test_identity_plan_is_verbatim(skl):
    g = MatrixGeometry(1, 1 << 12)  # one 16KB row, sits inside a single PIM and group
    spec = derive_groups(skl, g, PimLevel.CHANNEL)
    plan = plan_localization(skl, spec, g, PimLevel.CHANNEL, n=2)
    B = np.random.default_rng(0).standard_normal((g.k_cols, 2)).astype(np.float32)
    src = B.copy()
    loc = localize_b(B, plan)
    for p, per_group in loc.buffers.items():
        rows = np.concatenate([plan.b_rows(p, gg) for gg in sorted(per_group)])
        np.testing.assert_array_equal(np.concatenate([per_group[gg] for gg in sorted(per_group)]), B[rows])
    np.testing.assert_array_equal(B, src)


def test_rejects_bad_inputs(toy):
    g = MatrixGeometry(16, 64)
    spec = derive_groups(toy, g, PimLevel.DEVICE)
    with pytest.raises(ValueError):
        plan_localization(toy, spec, g, PimLevel.DEVICE, n=0)
    _, _, plan = toy_plan(toy, n=2)
    with pytest.raises(ShapeMismatch):
        localize_b(np.zeros((64, 3), dtype=np.float32), plan)
    with pytest.raises(ShapeMismatch):
        localize_b(np.zeros((8, 2), dtype=np.float32), plan)


def test_region_too_small(skl):
    g = MatrixGeometry(64, 1024)
    spec = derive_groups(skl, g, PimLevel.BANK_GROUP)
    plan = plan_localization(skl, spec, g, PimLevel.BANK_GROUP, n=4)
    tiny = {p: PrivateRegion(skl, PimLevel.BANK_GROUP, p, 1) for p in plan.pims}
    with pytest.raises(RegionTooSmall):
        plan_localization(skl, spec, g, PimLevel.BANK_GROUP, n=4, regions=tiny)
    with pytest.raises(RegionTooSmall):
        PrivateRegion(skl, PimLevel.BANK_GROUP, 0, 1 << 40)


def test_default_regions_hold_plan_and_decode_to_owner(skl):
    g = MatrixGeometry(64, 1024)
    spec = derive_groups(skl, g, PimLevel.BANK_GROUP)
    plan = plan_localization(skl, spec, g, PimLevel.BANK_GROUP, n=4)
    regions = default_regions(skl, plan)
    plan2 = plan_localization(skl, spec, g, PimLevel.BANK_GROUP, n=4, regions=regions)
    for p, reg in plan2.regions.items():
        assert reg.length >= plan.b_footprint(p) + plan.c_footprint(p)
        addrs = reg.addresses()
        assert len(set(addrs)) == len(addrs)
        assert all(skl.pim_id(a, PimLevel.BANK_GROUP).value == p for a in addrs)


def test_scratchpad_direct_flag(toy):
    assert toy_plan(toy, scratchpad=1 << 20)[2].scratchpad_direct
    assert not toy_plan(toy, scratchpad=64)[2].scratchpad_direct


def test_reduce_single_and_zero(toy):
    g, _, plan = toy_plan(toy, n=2)
    zeros = {p: np.zeros((len(plan.c_rows[p]), 2)) for p in plan.pims}
    np.testing.assert_array_equal(reduce_c(zeros, plan, g.m_rows), np.zeros((16, 2)))
    with pytest.raises(MissingPartial):
        reduce_c({p: v for p, v in zeros.items() if p != plan.pims[0]}, plan, g.m_rows)
    bad = dict(zeros)
    bad[plan.pims[0]] = np.zeros((1, 2))
    with pytest.raises(ShapeMismatch):
        reduce_c(bad, plan, g.m_rows)


def test_reduce_matches_reference(toy):
    # each PIM's partial is A restricted to its own blocks times B
    g, _, plan = toy_plan(toy, n=3)
    rng = np.random.default_rng(1)
    A = rng.standard_normal((16, 64))
    B = rng.standard_normal((64, 3))
    partials = {}
    for p in plan.pims:
        mask = np.zeros_like(A)
        for a in range(0, g.matrix_bytes, 64):
            if toy.pim_id(a, PimLevel.DEVICE).value == p:
                r, c = divmod(a // 64, g.row_blocks())
                mask[r, c * 16:(c + 1) * 16] = 1
        partials[p] = ((A * mask) @ B)[plan.c_rows[p]]
    np.testing.assert_allclose(reduce_c(partials, plan, 16), A @ B, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m_log=st.integers(0, 5), k_log=st.integers(4, 8),
       n=st.integers(1, 5), level=st.sampled_from(list(PimLevel)))
def test_plan_matches_ownership_oracle(seed, m_log, k_log, n, level):
    mapping = random_mapping(random.Random(seed), total_bits=18, n_ch=1, n_rk=1, n_bg=2)
    g = MatrixGeometry(1 << m_log, 1 << k_log)
    if g.matrix_bytes < 64 or g.matrix_bytes > 1 << 18:
        return
    spec, cols, rows = ownership(mapping, g, level)
    plan = plan_localization(mapping, spec, g, level, n=n)
    assert {k: set(v) for k, v in plan.b_blocks.items()} == cols
    assert all(len(v) == len(set(v)) for v in plan.b_blocks.values())
    assert {p: set(r.tolist()) for p, r in plan.c_rows.items()} == rows
    assert plan.replication_bytes == sum(len(v) for v in cols.values()) * 16 * n * 4
    assert plan.reduction_bytes == sum(len(v) for v in rows.values()) * n * 4
    B = np.ones((g.k_cols, n), dtype=np.float32)
    loc = localize_b(B, plan)
    referenced = {c for v in cols.values() for c in v}
    # one B block holds 16 // n rows or fewer, so count blocks from the rows touched
    row_bytes = n * 4
    touched = set()
    for c in referenced:
        for r in range(c * 16, c * 16 + 16):
            touched.update(range(r * row_bytes // 64, ((r + 1) * row_bytes - 1) // 64 + 1))
    assert loc.read_blocks == len(touched)
