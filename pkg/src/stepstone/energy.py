"""Energy and power from the traffic and operation counters of a SimReport."""

from __future__ import annotations

from dataclasses import dataclass, field

from .addrmap import PimLevel
from .timing import UNIT, PimTopology, SimReport


@dataclass(frozen=True)
class EnergyParams:
    in_device_pj_per_bit: float = 11.3
    off_chip_pj_per_bit: float = 25.7
    simd_nj_per_op: float = 11.3
    scratchpad_nj: dict = field(default_factory=lambda: {
        PimLevel.CHANNEL: 0.03, PimLevel.DEVICE: 0.1, PimLevel.BANK_GROUP: 0.3})

    def __post_init__(self):
        vals = [self.in_device_pj_per_bit, self.off_chip_pj_per_bit, self.simd_nj_per_op,
                *self.scratchpad_nj.values()]
        if any(v <= 0 for v in vals):
            raise ValueError("energy constants must be positive")

    def access_pj_per_bit(self, level: PimLevel) -> float:
        """PIM-side DRAM access: bank-group PIMs never leave the device."""
        return self.in_device_pj_per_bit if level is PimLevel.BANK_GROUP else self.off_chip_pj_per_bit


def block_energy_nj(level: "PimLevel | str", params: EnergyParams | None = None, block_bytes: int = 64) -> float:
    params = params or EnergyParams()
    return block_bytes * 8 * params.access_pj_per_bit(PimLevel.parse(level)) / 1e3


def units_per_pim(topo: PimTopology) -> int:
    return max(1, topo.simd_width // UNIT[topo.level][0])


def energy(report: SimReport, params: EnergyParams | None = None, level=None,
           topo: PimTopology | None = None, devices: int | None = None) -> dict:
    """Joules per component, pJ per flop and average watts per DRAM device."""
    params = params or EnergyParams()
    level = PimLevel.parse(level or report.level)
    gang = units_per_pim(topo) if topo is not None else 1
    devices = devices or (topo.devices if topo is not None else 32)
    tb = report.traffic_bytes
    pim_bits = 8 * (tb.get("a_stream", 0) + tb.get("buffer_fill", 0) + tb.get("buffer_drain", 0))
    host_bits = 8 * (tb.get("localize_read", 0) + tb.get("localize_write", 0))
    red_bits = 8 * (tb.get("reduce_read", 0) + tb.get("reduce_write", 0))
    c = report.counters
    parts = {
        "dram_pim": pim_bits * params.access_pj_per_bit(level) * 1e-12,
        "localization": host_bits * params.off_chip_pj_per_bit * 1e-12,
        "reduction": red_bits * params.off_chip_pj_per_bit * 1e-12,
        "simd": c.get("simd_ops", 0) * gang * params.simd_nj_per_op * 1e-9,
        "scratchpad": c.get("scratchpad_accesses", 0) * gang * params.scratchpad_nj[level] * 1e-9,
    }
    total = sum(parts.values())
    seconds = report.total_ns * 1e-9
    return {
        "joules": parts,
        "total_joules": total,
        "pj_per_flop": total * 1e12 / report.flops if report.flops else 0.0,
        "watts_per_device": total / seconds / devices if seconds else 0.0,
    }
