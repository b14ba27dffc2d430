"""Cycle-approximate timing of an execution trace.

Times are kept in DRAM clock cycles (1200 MHz for DDR4-2400); the PIM clock
is also 1.2 GHz, and any other ratio is converted when compute cycles are
charged. Each PIM walks its kernels in order. A kernel may have to wait for
its launch packet on the channel's command bus, pays the pipeline fill,
loads its scratchpad slices, then streams its A blocks. Streams are cut
into runs at row misses; every activate goes through a per-rank coordinator
that enforces tRRD_S/L, tFAW and tRC across all PIMs sharing the rank.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .addrmap import AddressMapping, PimLevel
from .errors import UnreconciledTrace


@dataclass(frozen=True)
class TimingParams:
    tBL: int = 4
    tCCDS: int = 4
    tCCDL: int = 6
    tRTRS: int = 2
    tCL: int = 16
    tRCD: int = 16
    tRP: int = 16
    tCWL: int = 12
    tRAS: int = 39
    tRC: int = 55
    tRTP: int = 9
    tWTRS: int = 3
    tWTRL: int = 9
    tWR: int = 18
    tRRDS: int = 4
    tRRDL: int = 6
    tFAW: int = 26
    data_rate_mts: int = 2400
    bus_bytes: int = 8
    device_width: int = 8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.tRC < self.tRAS + self.tRP:
            raise ValueError("tRC must cover tRAS + tRP")

    @property
    def clock_mhz(self) -> float:
        return self.data_rate_mts / 2

    @property
    def tck_ns(self) -> float:
        return 1e3 / self.clock_mhz

    @property
    def channel_bytes_per_cycle(self) -> float:
        return 2 * self.bus_bytes

    @property
    def channel_gbps(self) -> float:
        return self.data_rate_mts * self.bus_bytes / 1e3

    @property
    def devices_per_rank(self) -> int:
        return self.bus_bytes * 8 // self.device_width


# physical unit per level: (SIMD lanes, scratchpad bytes), one per device (BG per bank group)
UNIT = {PimLevel.BANK_GROUP: (8, 8 << 10), PimLevel.DEVICE: (32, 32 << 10),
        PimLevel.CHANNEL: (256, 256 << 10)}


@dataclass(frozen=True)
class PimTopology:
    level: PimLevel
    simd_width: int          # lanes of one logical PIM
    scratchpad: int          # bytes of one logical PIM
    channels: int = 2
    ranks: int = 2           # per channel
    bank_groups: int = 4     # per rank
    banks: int = 4           # per bank group
    devices_per_rank: int = 8
    clock_mhz: float = 1200.0
    pipeline_depth: int = 20

    def __post_init__(self):
        if self.simd_width <= 0 or self.scratchpad <= 0:
            raise ValueError("SIMD width and scratchpad must be positive")

    @classmethod
    def from_mapping(cls, mapping: AddressMapping, level: "PimLevel | str",
                     timing: TimingParams | None = None, **kw) -> "PimTopology":
        level = PimLevel.parse(level)
        timing = timing or TimingParams()
        dpr = timing.devices_per_rank
        lanes, sp = UNIT[level]
        gang = 1 if level is PimLevel.CHANNEL else dpr
        base = dict(level=level, simd_width=lanes * gang, scratchpad=sp * gang,
                    channels=mapping.count("CH"), ranks=mapping.count("RK"),
                    bank_groups=mapping.count("BG"), banks=mapping.count("BA"),
                    devices_per_rank=dpr)
        base.update(kw)
        return cls(**base)

    @property
    def num_pims(self) -> int:
        return {PimLevel.CHANNEL: self.channels,
                PimLevel.DEVICE: self.channels * self.ranks,
                PimLevel.BANK_GROUP: self.channels * self.ranks * self.bank_groups}[self.level]

    @property
    def devices(self) -> int:
        return self.channels * self.ranks * self.devices_per_rank

    def compute_cycles(self, batch: int, elems_per_block: int = 16) -> int:
        """PIM cycles to apply one A block to ``batch`` columns."""
        return -(-elems_per_block * batch // self.simd_width)

    def block_interval(self, timing: TimingParams) -> int:
        """DRAM cycles between consecutive blocks of one PIM's sequential stream."""
        return timing.tCCDL if self.level is PimLevel.BANK_GROUP else timing.tBL

    def peak_gflops(self, pims: int | None = None) -> float:
        return 2 * self.simd_width * (pims or self.num_pims) * self.clock_mhz / 1e3

    def peak_gbps(self, timing: TimingParams, pims: int | None = None, block_bytes: int = 64) -> float:
        per = block_bytes / (self.block_interval(timing) * timing.tck_ns)
        return per * (pims or self.num_pims)


@dataclass(frozen=True)
class ContentionProfile:
    background_util: float = 0.0
    packet_slots: int = 4

    def __post_init__(self):
        if not 0 <= self.background_util < 1:
            raise ValueError("background utilization must be in [0, 1)")
        if self.packet_slots <= 0:
            raise ValueError("packet cost must be positive")

    @property
    def packet_cycles(self) -> float:
        return self.packet_slots / (1 - self.background_util)


@dataclass
class SimReport:
    level: str
    mode: str
    phase_cycles: dict[str, float]
    total_cycles: float
    total_ns: float
    traffic_bytes: dict[str, int]
    counters: dict[str, int]
    stall_cycles: float = 0.0
    command_bus_wait: float = 0.0
    bandwidth_utilization: float = 0.0
    flops: int = 0
    roofline: dict[str, float] = field(default_factory=dict)
    act_log: dict[int, list[float]] = field(default_factory=dict, repr=False)

    @property
    def gflops(self) -> float:
        return self.flops / self.total_ns if self.total_ns else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("act_log")
        d["gflops"] = self.gflops
        return d


# -- per-rank activate coordinator --------------------------------------------------

class ActCoordinator:
    def __init__(self, timing: TimingParams):
        self.t = timing
        self.last: float = -math.inf
        self.last_bg = None
        self.window: deque[float] = deque(maxlen=4)
        self.bank_last: dict[int, float] = {}
        self.log: list[float] = []

    def request(self, when: float, bank: int, bg: int) -> float:
        t = self.t
        gap = t.tRRDL if bg == self.last_bg else t.tRRDS
        at = max(when, self.last + gap, self.bank_last.get(bank, -math.inf) + t.tRC)
        if len(self.window) == 4:
            at = max(at, self.window[0] + t.tFAW)
        at = max(at, self.log[-1] if self.log else -math.inf)
        self.last, self.last_bg = at, bg
        self.window.append(at)
        self.bank_last[bank] = at
        self.log.append(at)
        return at


# -- per-PIM stream preparation -------------------------------------------------------

@dataclass
class _Stream:
    cost: np.ndarray           # per-block cycles: max(dram, compute) + bubble
    dram: np.ndarray
    bubble: np.ndarray
    miss: np.ndarray           # bool: block needs an activate first
    precharge: np.ndarray      # bool: ...and a precharge of another row
    bank: np.ndarray
    bg: np.ndarray
    rank: np.ndarray
    kstart: np.ndarray         # kernel boundaries into the block arrays


def _prepare(trace, mapping: AddressMapping, topo: PimTopology, timing: TimingParams,
             pim: int, naive_agen: bool) -> _Stream:
    ks = trace.kernels[pim]
    sizes = np.array([k.blocks for k in ks], dtype=np.int64)
    kstart = np.concatenate([[0], np.cumsum(sizes)])
    nblk = int(kstart[-1])
    if nblk == 0:
        z = np.zeros(0, dtype=np.int64)
        return _Stream(z.astype(float), z, z, z.astype(bool), z.astype(bool), z, z, z, kstart)
    addrs = np.concatenate([k.addrs for k in ks])
    ch = mapping.dim_array(addrs, "CH")
    rk = mapping.dim_array(addrs, "RK")
    bg = mapping.dim_array(addrs, "BG")
    ba = mapping.dim_array(addrs, "BA")
    row = mapping.dim_array(addrs, "ROW")
    rank = ch * topo.ranks + rk
    bgid = rank * topo.bank_groups + bg
    bank = bgid * topo.banks + ba

    if topo.level is PimLevel.BANK_GROUP:
        dram = np.full(nblk, float(timing.tCCDL))
    else:
        dram = _windowed_bus(bgid, rank, topo, timing)

    ratio = timing.clock_mhz / topo.clock_mhz
    comp = np.repeat([topo.compute_cycles(k.batch) * ratio for k in ks], sizes)
    if naive_agen and trace.mode.value != "pei":
        gaps = np.concatenate([k.gaps for k in ks])
        bubble = np.maximum(gaps - 4, 0).astype(np.float64)
    else:
        bubble = np.zeros(nblk)
    cost = np.maximum(dram, comp) + bubble

    # open-page per bank; all banks of the PIM close when its group changes
    groups = np.array([k.group for k in ks])
    epoch_k = np.concatenate([[0], np.cumsum(groups[1:] != groups[:-1])])
    epoch = np.repeat(epoch_k, sizes)
    order = np.lexsort((np.arange(nblk), bank))
    b_s, r_s, e_s = bank[order], row[order], epoch[order]
    new_bank = np.concatenate([[True], b_s[1:] != b_s[:-1]])
    closed = new_bank | np.concatenate([[True], e_s[1:] != e_s[:-1]])
    other = ~closed & np.concatenate([[False], r_s[1:] != r_s[:-1]])
    miss = np.empty(nblk, bool)
    pre = np.empty(nblk, bool)
    miss[order] = closed | other
    pre[order] = other
    return _Stream(cost, dram, bubble, miss, pre, bank, bgid, rank, kstart)


def _windowed_bus(bgid: np.ndarray, rank: np.ndarray, topo: PimTopology,
                  timing: TimingParams) -> np.ndarray:
    """Data-bus cycles per block when the pipeline's outstanding reads are interleaved.

    Within each window of ``pipeline_depth`` consecutive blocks the reads are
    issued bank-group-interleaved: the window takes the longer of tCCD_S per
    block and tCCD_L per block of its busiest bank group, plus tRTRS per rank
    switch (channel PIMs only). The window's time is spread over its blocks.
    """
    n = len(bgid)
    w = max(1, topo.pipeline_depth)
    chunk = np.arange(n) // w
    nchunk = int(chunk[-1]) + 1
    size = np.bincount(chunk, minlength=nchunk)
    _, bg_dense = np.unique(bgid, return_inverse=True)
    nbg = int(bg_dense.max()) + 1
    per_bg = np.bincount(chunk * nbg + bg_dense, minlength=nchunk * nbg).reshape(nchunk, nbg)
    t = np.maximum(size * timing.tCCDS, per_bg.max(axis=1) * timing.tCCDL).astype(np.float64)
    if topo.level is PimLevel.CHANNEL:
        switch = np.concatenate([[0], (rank[1:] != rank[:-1]).astype(np.int64)])
        t += np.bincount(chunk, weights=switch, minlength=nchunk) * timing.tRTRS
    return (t / size)[chunk]


def _pei_arrivals(trace, pims: list[int], channel_of: dict[int, int], packet: float) -> dict[int, np.ndarray]:
    """Packet arrival times when the host streams per-block packets round-robin."""
    out = {}
    by_ch: dict[int, list[int]] = {}
    for p in pims:
        by_ch.setdefault(channel_of[p], []).append(p)
    for plist in by_ch.values():
        counts = [sum(k.blocks for k in trace.kernels[p]) for p in plist]
        keys_i = np.concatenate([np.arange(c) for c in counts]) if counts else np.zeros(0)
        keys_p = np.concatenate([np.full(c, j) for j, c in enumerate(counts)]) if counts else np.zeros(0)
        order = np.lexsort((keys_p, keys_i))
        pos = np.empty(len(order), dtype=np.int64)
        pos[order] = np.arange(len(order))
        start = 0
        for p, c in zip(plist, counts):
            out[p] = (pos[start:start + c] + 1) * packet
            start += c
    return out


def _pim_channel(mapping: AddressMapping, trace, pim: int) -> int:
    for k in trace.kernels[pim]:
        if k.blocks:
            return int(mapping.dim_array(k.addrs[:1], "CH")[0])
    return 0


def simulate(trace, mapping: AddressMapping, topo: PimTopology | None = None,
             timing: TimingParams | None = None, contention: ContentionProfile | None = None,
             naive_agen: bool = False, overlap_fill: bool = False, plan=None) -> SimReport:
    timing = timing or TimingParams()
    topo = topo or PimTopology.from_mapping(mapping, trace.level, timing)
    contention = contention or ContentionProfile()
    if plan is not None:
        from .gemm import reconcile
        problems = reconcile(trace, plan)
        if problems:
            raise UnreconciledTrace("; ".join(problems))
    block = trace.block_bytes
    bw = timing.channel_bytes_per_cycle * topo.channels
    ctl = trace.controller
    loc_cycles = (ctl.get("localize_read_bytes", 0) + ctl.get("localize_write_bytes", 0)) / bw
    red_cycles = (ctl.get("reduce_read_bytes", 0) + ctl.get("reduce_write_bytes", 0)) / bw
    direct = bool(ctl.get("scratchpad_direct", 0))
    fill_int = topo.block_interval(timing)
    packet = contention.packet_cycles
    pims = [p for p in trace.pims if trace.kernels[p]]

    streams = {p: _prepare(trace, mapping, topo, timing, p, naive_agen) for p in pims}
    channel_of = {p: _pim_channel(mapping, trace, p) for p in pims}
    arrivals = _pei_arrivals(trace, pims, channel_of, packet) if trace.mode.value == "pei" else {}
    coord: dict[int, ActCoordinator] = {}
    bus_free: dict[int, float] = {}

    acc = {p: dict.fromkeys(("fill", "drain", "stream", "compute_excess", "stall", "launch",
                             "bus_wait", "act"), 0.0) for p in pims}
    finish = {}
    counters = dict.fromkeys(("blocks", "kernels", "packets", "acts", "simd_ops",
                              "fill_blocks", "drain_blocks"), 0)
    # state: kernel index, next block index within the PIM stream, phase
    state = {p: [0, 0, "start"] for p in pims}
    heap = [(0.0, p) for p in pims]
    heapq.heapify(heap)
    while heap:
        t, p = heapq.heappop(heap)
        ki, bi, phase = state[p]
        ks, st, a = trace.kernels[p], streams[p], acc[p]
        if ki >= len(ks):
            finish[p] = t
            continue
        k = ks[ki]
        if phase == "start":
            counters["kernels"] += 1
            if k.launch:
                ch = channel_of[p]
                begin = max(t, bus_free.get(ch, 0.0))
                bus_free[ch] = begin + packet
                a["bus_wait"] += begin + packet - t
                t = begin + packet
                counters["packets"] += 1
            t += topo.pipeline_depth * timing.clock_mhz / topo.clock_mhz
            a["launch"] += topo.pipeline_depth * timing.clock_mhz / topo.clock_mhz
            fill_blocks = 0 if direct else -(-(k.fill_b_bytes + k.fill_c_bytes) // block)
            counters["fill_blocks"] += -(-(k.fill_b_bytes + k.fill_c_bytes) // block)
            if not overlap_fill:
                t += fill_blocks * fill_int
            a["fill"] += fill_blocks * fill_int
            state[p] = [ki, int(st.kstart[ki]), "run"]
            heapq.heappush(heap, (t, p))
            continue
        if phase == "run":
            end = int(st.kstart[ki + 1])
            if bi < end:
                if st.miss[bi]:
                    rank = int(st.rank[bi])
                    c = coord.setdefault(rank, ActCoordinator(timing))
                    want = t + (timing.tRP if st.precharge[bi] else 0)
                    at = c.request(want, int(st.bank[bi]), int(st.bg[bi]))
                    counters["acts"] += 1
                    a["act"] += at + timing.tRCD - t
                    t = at + timing.tRCD
                nxt = bi + 1
                if nxt < end:
                    rel = np.flatnonzero(st.miss[nxt:end])
                    nxt = nxt + int(rel[0]) if len(rel) else end
                seg = slice(bi, nxt)
                counters["blocks"] += nxt - bi
                counters["simd_ops"] += (nxt - bi) * topo.compute_cycles(k.batch)
                cost = st.cost[seg]
                a["stream"] += float(st.dram[seg].sum())
                a["compute_excess"] += float((np.maximum(cost - st.bubble[seg], st.dram[seg]) - st.dram[seg]).sum())
                a["stall"] += float(st.bubble[seg].sum())
                if p in arrivals:
                    arr = arrivals[p][seg]
                    csum = np.cumsum(cost)
                    prev = np.concatenate([[0.0], csum[:-1]])
                    done = csum[-1] + max(t, float(np.max(arr - prev)))
                    a["bus_wait"] += max(0.0, done - (t + csum[-1]))
                    counters["packets"] += nxt - bi
                    t = done
                else:
                    t += float(cost.sum())
                state[p] = [ki, nxt, "run"]
                heapq.heappush(heap, (t, p))
                continue
            drain = 0 if direct else -(-k.drain_c_bytes // block)
            counters["drain_blocks"] += -(-k.drain_c_bytes // block)
            t += drain * fill_int
            a["drain"] += drain * fill_int
            state[p] = [ki + 1, end, "start"]
            heapq.heappush(heap, (t, p))

    exec_cycles = max(finish.values(), default=0.0)
    crit = max(finish, key=finish.get) if finish else None
    phases = {"localization": loc_cycles, "execution": exec_cycles, "reduction": red_cycles}
    if crit is not None:
        phases.update({f"pim_{k}": v for k, v in acc[crit].items()})
    total = loc_cycles + exec_cycles + red_cycles
    traffic = {
        "a_stream": counters["blocks"] * block,
        "buffer_fill": counters["fill_blocks"] * block,
        "buffer_drain": counters["drain_blocks"] * block,
        "localize_read": ctl.get("localize_read_bytes", 0),
        "localize_write": ctl.get("localize_write_bytes", 0),
        "reduce_read": ctl.get("reduce_read_bytes", 0),
        "reduce_write": ctl.get("reduce_write_bytes", 0),
    }
    counters["scratchpad_accesses"] = counters["simd_ops"] + counters["fill_blocks"] + counters["drain_blocks"]
    elems = block // trace.elem_bytes
    flops = sum(2 * elems * k.batch * k.blocks for ks in trace.kernels.values() for k in ks)
    stream_bytes = traffic["a_stream"]
    peak = topo.peak_gbps(timing, len(pims) or None, block) * timing.tck_ns  # bytes per cycle
    util = stream_bytes / (exec_cycles * peak) if exec_cycles and peak else 0.0
    # measured point on the roofline: flops per byte moved, achieved GFLOP/s
    moved = stream_bytes + traffic["localize_write"] + traffic["reduce_read"]
    point = {"x": flops / moved if moved else 0.0,
             "y": flops / (total * timing.tck_ns) if total else 0.0}
    report = SimReport(
        level=trace.level.value, mode=trace.mode.value, phase_cycles=phases,
        total_cycles=total, total_ns=total * timing.tck_ns, traffic_bytes=traffic,
        counters=counters,
        stall_cycles=acc[crit]["stall"] if crit is not None else 0.0,
        command_bus_wait=acc[crit]["bus_wait"] if crit is not None else 0.0,
        bandwidth_utilization=util, flops=flops, roofline=point,
        act_log={r: c.log for r, c in coord.items()},
    )
    return report


# -- analytic models ------------------------------------------------------------------

def roofline(topo: PimTopology, timing: TimingParams, geom, n: int, loc=None,
             pims: int | None = None) -> tuple[float, float]:
    """(flops per byte, attainable GFLOP/s) for one GEMM at this level."""
    pims = pims or topo.num_pims
    a_bytes = geom.matrix_bytes
    if loc is not None:
        b_bytes, c_bytes = loc.replication_bytes, loc.reduction_bytes
    else:
        b_bytes = pims * geom.k_cols * n * geom.elem_bytes
        c_bytes = pims * geom.m_rows * n * geom.elem_bytes
    flops = 2 * geom.m_rows * geom.k_cols * n
    intensity = flops / (a_bytes + b_bytes + c_bytes)
    bound = min(topo.peak_gflops(pims), intensity * topo.peak_gbps(timing, pims))
    return intensity, bound


def estimate(plan, topo: PimTopology | None = None, timing: TimingParams | None = None,
             contention: ContentionProfile | None = None) -> dict[str, float]:
    """Closed-form cycle estimate of a plan: traffic over bandwidth plus the SIMD bound."""
    timing = timing or TimingParams()
    topo = topo or PimTopology.from_mapping(plan.mapping, plan.level, timing)
    contention = contention or ContentionProfile()
    loc, geom = plan.loc, plan.geom
    block = 1 << plan.mapping.block_offset_bits
    bw = timing.channel_bytes_per_cycle * topo.channels
    accelerated = plan.mode.value == "stp"
    loc_read = loc.distinct_b_bytes if accelerated else loc.replication_bytes
    loc_cycles = (loc_read + loc.replication_bytes + loc.reduction_bytes) / bw
    red_cycles = (loc.reduction_bytes + loc.c_bytes) / bw
    interval = topo.block_interval(timing)
    batch = 1 if plan.mode.value == "ncho" else plan.n
    passes = plan.n if plan.mode.value == "ncho" else 1
    comp = topo.compute_cycles(batch) * timing.clock_mhz / topo.clock_mhz
    per_block = max(interval, comp)
    total_blocks = geom.num_blocks(block)
    pims = max(len(plan.active_pims), 1)
    blocks = total_blocks / pims * passes
    fill = 0.0 if loc.scratchpad_direct else \
        (max(loc.b_footprint(p) for p in loc.pims) + 2 * max(loc.c_footprint(p) for p in loc.pims)) / block * interval
    kernels = plan.tiles_per_pim * passes
    launch = kernels * (topo.pipeline_depth + contention.packet_cycles)
    exec_cycles = blocks * per_block + fill + launch
    return {"localization": loc_cycles, "execution": exec_cycles, "reduction": red_cycles,
            "total": loc_cycles + exec_cycles + red_cycles}
