import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_mapping
from stepstone.addrmap import AddressMapping, DramField, PimLevel
from stepstone.agen import AddressGenerator
from stepstone.errors import Infeasible, PlanGeometryMismatch, ShapeMismatch
from stepstone.gemm import (
    C_ROW_GRANULE, Mode, build_trace, decompose_non_pow2, gemm_any, make_plan, panels,
    reconcile, run_gemm,
)
from stepstone.grouping import MatrixGeometry, owned_col_blocks, owned_rows, pim_group_pairs

MODES = list(Mode)


def toy_wide(total_bits=20):
    """TOY-R4's rank bits with pass-through rows, wide enough for a 128x256 matrix."""
    fields = [DramField("RK0", frozenset({6, 10})), DramField("RK1", frozenset({7, 11})),
              DramField("COL6", frozenset({6})), DramField("COL7", frozenset({7}))]
    rows = [8, 9] + list(range(12, total_bits))
    fields += [DramField(f"ROW{i}", frozenset({b})) for i, b in enumerate(rows)]
    return AddressMapping(fields, 6, total_bits, "toy_r4_wide")


def triple_loop(A, B):
    m, k = A.shape
    C = np.zeros((m, B.shape[1]))
    for i in range(m):
        for j in range(B.shape[1]):
            s = 0.0
            for t in range(k):
                s += float(A[i, t]) * float(B[t, j])
            C[i, j] = s
    return C


def footprint_oracle(plan):
    """Largest B+C bytes of any (pim, group, row part, col part) tile, by enumeration."""
    geom, n, eb = plan.geom, plan.n if plan.mode is not Mode.NCHO else 1, plan.geom.elem_bytes
    worst = 0
    for pim in plan.active_pims:
        for r0, r1 in plan.row_parts:
            rows = set()
            for g in plan.groups:
                rr = owned_rows(plan.spec, geom, pim, g)
                rows |= set(rr[(rr >= r0) & (rr < r1)].tolist())
            for c0, c1 in plan.col_parts:
                b = 0
                for g in plan.groups:
                    cb = owned_col_blocks(plan.spec, geom, pim, g)
                    b = max(b, int(np.count_nonzero((cb >= c0) & (cb < c1))))
                worst = max(worst, len(rows) * n * eb + b * 16 * n * eb)
    return worst


def test_identity_all_modes(skl):
    g = MatrixGeometry(64, 64)
    B = np.random.default_rng(0).standard_normal((64, 3)).astype(np.float32)
    for mode in MODES:
        plan = make_plan(skl, g, 3, PimLevel.BANK_GROUP, mode)
        C, _ = run_gemm(np.eye(64, dtype=np.float32), B, plan)
        np.testing.assert_array_equal(C, B)


def test_toy_128x256_stp_and_pei():
    m = toy_wide()
    g = MatrixGeometry(128, 256)
    rng = np.random.default_rng(3)
    A = rng.standard_normal((128, 256)).astype(np.float32)
    B = rng.standard_normal((256, 4)).astype(np.float32)
    ref = triple_loop(A, B)
    plan = make_plan(m, g, 4, PimLevel.DEVICE, Mode.STP)
    C, trace = run_gemm(A, B, plan)
    assert np.abs(C - ref).max() <= 1e-4 * np.abs(ref).max()
    pairs = len(pim_group_pairs(plan.spec, g))
    assert trace.counts()["kernel_launch"] == pairs * len(plan.row_parts) * len(plan.col_parts)
    pei = make_plan(m, g, 4, PimLevel.DEVICE, Mode.PEI)
    C2, t2 = run_gemm(A, B, pei)
    np.testing.assert_array_equal(C, C2)
    assert t2.counts()["command_packet"] == 128 * 256 * 4 // 64


def test_echo_one_kernel_per_row_and_ncho_restreams(skl):
    g = MatrixGeometry(64, 256)
    plan = make_plan(skl, g, 4, PimLevel.BANK_GROUP, Mode.ECHO)
    tr = build_trace(plan)
    for ks in tr.kernels.values():
        for k in ks:
            rows = {(int(a) - g.base_addr) // g.row_bytes for a in k.addrs}
            assert len(rows) == 1
    stp = build_trace(make_plan(skl, g, 4, PimLevel.BANK_GROUP, Mode.STP)).counts()
    ncho = build_trace(make_plan(skl, g, 4, PimLevel.BANK_GROUP, Mode.NCHO)).counts()
    assert ncho["dram_block_read"] == 4 * stp["dram_block_read"]


def test_plan_fits_and_prefers_rows(skl):
    g = MatrixGeometry(1024, 4096)
    plan = make_plan(skl, g, 4, PimLevel.BANK_GROUP, scratchpad=8 << 10)
    assert footprint_oracle(plan) == plan.tile_bytes <= 8 << 10
    assert all((r1 - r0) % C_ROW_GRANULE == 0 for r0, r1 in plan.row_parts)
    assert (len(plan.row_parts), len(plan.col_parts)) == (1, 4)
    tiny = make_plan(skl, MatrixGeometry(16, 16), 1, PimLevel.BANK_GROUP, scratchpad=8 << 10)
    assert (len(tiny.row_parts), len(tiny.col_parts)) == (1, 1)


def test_infeasible(skl):
    with pytest.raises(Infeasible):
        make_plan(skl, MatrixGeometry(16, 16), 512, PimLevel.BANK_GROUP, scratchpad=8 << 10)


def test_shape_errors(skl):
    plan = make_plan(skl, MatrixGeometry(16, 64), 2, PimLevel.BANK_GROUP)
    with pytest.raises(ShapeMismatch):
        run_gemm(np.zeros((16, 64), np.float32), np.zeros((32, 2), np.float32), plan)
    with pytest.raises(PlanGeometryMismatch):
        run_gemm(np.zeros((32, 32), np.float32), np.zeros((32, 2), np.float32), plan)


def test_trace_reconciles_with_agen(skl):
    g = MatrixGeometry(256, 1024)
    plan = make_plan(skl, g, 4, PimLevel.BANK_GROUP, scratchpad=8 << 10)
    tr = build_trace(plan)
    assert reconcile(tr, plan) == []
    # each B block of a tile loads once: fill bytes equal the plan's owned-block footprint
    for pim, ks in tr.kernels.items():
        for k in ks:
            c0, c1 = plan.col_parts[k.col_part]
            cb = np.asarray(plan.loc.b_blocks[(pim, k.group)])
            assert k.fill_b_bytes == int(np.count_nonzero((cb >= c0) & (cb < c1))) * 16 * 4 * 4
            gen = AddressGenerator(plan.spec, g, pim, k.group, plan.row_parts[k.row_part], (c0, c1))
            np.testing.assert_array_equal(k.addrs, gen.stream_array())


def test_decompose():
    assert decompose_non_pow2(2560) == [2048, 512]
    assert decompose_non_pow2(1600) == [1024, 512, 64]
    assert decompose_non_pow2(1024) == [1024]
    with pytest.raises(ValueError):
        decompose_non_pow2(0)


def test_panels_tile_and_align():
    ps = panels(2560, 512)
    assert sorted((p.geom.m_rows, p.geom.k_cols) for p in ps) == [(512, 512), (2048, 512)]
    for p in ps:
        assert p.geom.base_addr % p.geom.matrix_bytes == 0
    ends = sorted((p.geom.base_addr, p.geom.base_addr + p.geom.matrix_bytes) for p in ps)
    assert all(a[1] <= b[0] for a, b in zip(ends, ends[1:]))
    padded = panels(128, 1)
    assert [(p.geom.m_rows, p.geom.k_cols) for p in padded] == [(128, 16)]


@pytest.mark.parametrize("shape", [(48, 40, 3), (100, 48, 2), (128, 1, 4)])
def test_gemm_any(skl, shape):
    m, k, n = shape
    rng = np.random.default_rng(7)
    A = rng.standard_normal((m, k)).astype(np.float32)
    B = rng.standard_normal((k, n)).astype(np.float32)
    ref = A.astype(np.float64) @ B.astype(np.float64)
    for pad in (False, True):
        C = gemm_any(A, B, skl, PimLevel.DEVICE, pad=pad)
        assert C.shape == (m, n)
        assert np.abs(C - ref).max() <= 1e-4 * np.abs(ref).max()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m_log=st.integers(0, 6), k_log=st.integers(4, 8),
       n=st.integers(1, 6), level=st.sampled_from(list(PimLevel)))
def test_modes_bit_identical(seed, m_log, k_log, n, level):
    mapping = random_mapping(random.Random(seed), total_bits=18, n_ch=1, n_rk=1, n_bg=2)
    g = MatrixGeometry(1 << m_log, 1 << k_log)
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((g.m_rows, g.k_cols)).astype(np.float32)
    B = rng.standard_normal((g.k_cols, n)).astype(np.float32)
    ref = A.astype(np.float64) @ B.astype(np.float64)
    outs = []
    for mode in MODES:
        C, _ = run_gemm(A, B, make_plan(mapping, g, n, level, mode))
        outs.append(C)
    assert np.abs(outs[0] - ref).max() <= 1e-4 * max(np.abs(ref).max(), 1e-30)
    for C in outs[1:]:
        np.testing.assert_array_equal(C, outs[0])
