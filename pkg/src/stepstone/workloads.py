"""Built-in DL inference layer chains and end-to-end estimation.

Each layer is a weight matrix A of M x K multiplied by a batch of N
activation columns. Repeated transformer blocks are simulated once and
multiplied by their count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addrmap import PimLevel
from .config import SimConfig
from .errors import ConfigError
from .gemm import build_trace, panels
from .planner import Subset, choose_level, evaluate, half_subset
from .timing import PimTopology, simulate

N_RULES = ("batch", "batch_seq", "seq_grow")


@dataclass(frozen=True)
class Layer:
    name: str
    m: int
    k: int
    cpu_other_ns: float | None = None  # None falls back to the workload default

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ConfigError(f"layer {self.name}: dims must be >= 1, got {self.m}x{self.k}")


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    layers: tuple[Layer, ...]
    batch: int = 4
    seq_len: int = 1
    repeat: int = 1             # e.g. transformer blocks
    n_rule: str = "batch"
    cpu_other_ns: float = 0.0

    def __post_init__(self):
        if self.n_rule not in N_RULES:
            raise ConfigError(f"{self.name}: n_rule must be one of {N_RULES}")
        if self.batch < 1 or self.seq_len < 1 or self.repeat < 1:
            raise ConfigError(f"{self.name}: batch, seq_len and repeat must be >= 1")
        if not self.layers:
            raise ConfigError(f"{self.name}: no layers")

    def batch_sizes(self) -> list[int]:
        """Effective N of each iteration over the layer chain."""
        if self.n_rule == "batch":
            return [self.batch]
        if self.n_rule == "batch_seq":
            return [self.batch * self.seq_len]
        return [self.batch * s for s in range(1, self.seq_len + 1)]

    def with_args(self, **kw) -> "WorkloadSpec":
        known = {"batch", "seq_len", "cpu_other_ns"}
        bad = set(kw) - known
        if bad:
            raise ConfigError(f"unknown workload argument(s) {sorted(bad)}")
        vals = {k: (int(v) if k != "cpu_other_ns" else float(v)) for k, v in kw.items()}
        return WorkloadSpec(self.name, self.layers, vals.get("batch", self.batch),
                            vals.get("seq_len", self.seq_len), self.repeat, self.n_rule,
                            vals.get("cpu_other_ns", self.cpu_other_ns))


BUILTIN_WORKLOADS = {
    "dlrm": WorkloadSpec("dlrm", (Layer("bottom0", 2560, 512), Layer("bottom1", 512, 32),
                                  Layer("top0", 512, 128), Layer("top1", 128, 1)), batch=4),
    "bert": WorkloadSpec("bert", (Layer("mlp_in", 1024, 4096), Layer("mlp_out", 4096, 1024),
                                  Layer("proj", 1024, 1024)),
                         batch=4, seq_len=8, repeat=24, n_rule="batch_seq"),
    "gpt2": WorkloadSpec("gpt2", (Layer("mlp_in", 1600, 6400), Layer("mlp_out", 6400, 1600),
                                  Layer("proj", 1600, 1600)), batch=4, repeat=48),
    "xlm": WorkloadSpec("xlm", (Layer("mlp_in", 2048, 8192), Layer("mlp_out", 8192, 2048)),
                        batch=4, seq_len=8, repeat=12, n_rule="seq_grow"),
}


def get_workload(name: str) -> WorkloadSpec:
    try:
        return BUILTIN_WORKLOADS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown workload {name!r}; built-ins: {sorted(BUILTIN_WORKLOADS)}") from None


@dataclass
class LayerResult:
    layer: str
    m: int
    k: int
    n: int
    level: str
    subset: str
    panels: int
    gemm_ns: float
    cpu_other_ns: float
    repeat: int

    @property
    def total_ns(self) -> float:
        return (self.gemm_ns + self.cpu_other_ns) * self.repeat


@dataclass
class WorkloadReport:
    workload: str
    layers: list[LayerResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def gemm_ns(self) -> float:
        return sum(r.gemm_ns * r.repeat for r in self.layers)

    @property
    def cpu_other_ns(self) -> float:
        return sum(r.cpu_other_ns * r.repeat for r in self.layers)

    @property
    def total_ns(self) -> float:
        return sum(r.total_ns for r in self.layers)

    def to_json(self) -> dict:
        return {"workload": self.workload,
                "layers": [{**r.__dict__, "total_ns": r.total_ns} for r in self.layers],
                "gemm_ns": self.gemm_ns, "cpu_other_ns": self.cpu_other_ns,
                "total_ns": self.total_ns, "config": self.config}


def candidate_totals(m: int, k: int, n: int, cfg: SimConfig, mapping=None):
    """Summed planner estimates per (level, subset) over the panels of one GEMM.

    A candidate infeasible for any panel maps to None.
    """
    mapping = mapping or cfg.mapping()
    levels = [cfg.level] if cfg.level else None
    pieces = panels(m, k)
    sums: dict[tuple[str, str], list | None] = {}
    for p in pieces:
        choice = choose_level(mapping, p.geom, n, levels=levels, subsets=cfg.subsets, mode=cfg.mode,
                              timing=cfg.timing, contention=cfg.contention,
                              topo_overrides=cfg.topology or None, spread=cfg.spread)
        for row in choice.table:
            key = (row["level"], row["subset"])
            if "error" in row:
                sums[key] = None
            elif key not in sums or sums[key] is not None:
                acc = sums.setdefault(key, [0.0, 0])
                acc[0] += row["total"]
                acc[1] = max(acc[1], row["pims"])
    return sums, pieces


def choose_for_gemm(m: int, k: int, n: int, cfg: SimConfig, mapping=None):
    """Planner choice for a whole (possibly non power of two) GEMM.

    The candidate tables of every panel are summed, so the same level and
    subset run all panels.
    """
    sums, pieces = candidate_totals(m, k, n, cfg, mapping)
    coarse = {"ch": 0, "dv": 1, "bg": 2}
    ok = [(round(v[0], 6), v[1], coarse[lv], lv, sub) for (lv, sub), v in sums.items() if v]
    if not ok:
        raise ConfigError(f"no feasible level for {m}x{k} N={n}")
    _, _, _, lv, sub = min(ok)
    return PimLevel.parse(lv), sub, pieces


def _subset(mapping, level, kind):
    return Subset(level) if kind == "all" else half_subset(mapping, level)


def gemm_time_ns(m: int, k: int, n: int, cfg: SimConfig, mapping=None, cache: dict | None = None):
    """(ns, level, subset, panel count) for one GEMM under the planner's choice."""
    mapping = mapping or cfg.mapping()
    level, kind, pieces = choose_for_gemm(m, k, n, cfg, mapping)
    subset = _subset(mapping, level, kind)
    total = 0.0
    tck = cfg.timing.tck_ns
    for p in pieces:
        g = p.geom
        key = (g.m_rows, g.k_cols, g.base_addr, n, level, kind, cfg.fidelity)
        if cache is not None and key in cache:
            total += cache[key]
            continue
        mm, plan, est = evaluate(mapping, g, n, level, subset, cfg.mode, cfg.timing, cfg.contention,
                                 topo_overrides=cfg.topology or None, spread=cfg.spread)
        if cfg.fidelity == "simulate":
            topo = PimTopology.from_mapping(mm, level, cfg.timing, **cfg.topology)
            rep = simulate(build_trace(plan), mm, topo, cfg.timing, cfg.contention)
            ns = rep.total_ns
        else:
            ns = est["total"] * tck
        if cache is not None:
            cache[key] = ns
        total += ns
    return total, level, kind, len(pieces)


def run_workload(spec: WorkloadSpec, cfg: SimConfig | None = None) -> WorkloadReport:
    cfg = cfg or SimConfig()
    mapping = cfg.mapping()
    report = WorkloadReport(spec.name, config=cfg.to_json())
    cache: dict = {}
    for n in spec.batch_sizes():
        for layer in spec.layers:
            try:
                ns, level, kind, npanels = gemm_time_ns(layer.m, layer.k, n, cfg, mapping, cache)
            except Exception as exc:
                raise ConfigError(f"{spec.name}/{layer.name} (N={n}): {exc}") from exc
            other = spec.cpu_other_ns if layer.cpu_other_ns is None else layer.cpu_other_ns
            report.layers.append(LayerResult(layer.name, layer.m, layer.k, n, level.value, kind,
                                             npanels, ns, other, spec.repeat))
    return report
