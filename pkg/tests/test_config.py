import json

import pytest

from stepstone.addrmap import PimLevel
from stepstone.config import SimConfig, build_config, load_config, parse_overrides, read_config
from stepstone.errors import ConfigError
from stepstone.gemm import Mode


def test_defaults():
    cfg = SimConfig()
    assert cfg.mapping_name == "skl_ddr4" and cfg.level is None and cfg.mode is Mode.STP
    assert cfg.timing.tFAW == 26 and cfg.contention.background_util == 0
    assert cfg.mapping().name == "skl_ddr4"


def test_include_and_override(tmp_path):
    (tmp_path / "base.cfg").write_text("mapping = skl_ddr4_4rk\ntiming.tCCDL = 7  # slower\nseed = 3\n")
    (tmp_path / "run.cfg").write_text("include = base.cfg\n\nseed = 9\nlevel = dv\n"
                                      "contention.background_util = 0.5\nenergy.scratchpad_nj.bg = 0.5\n"
                                      "topology.pipeline_depth = 30\nworkload.batch = 8\n")
    raw = read_config(tmp_path / "run.cfg")
    assert raw["seed"] == "9" and raw["timing.tCCDL"] == "7"
    cfg = load_config(tmp_path / "run.cfg", {"mode": "pei"})
    assert cfg.mapping_name == "skl_ddr4_4rk" and cfg.seed == 9 and cfg.level is PimLevel.DEVICE
    assert cfg.timing.tCCDL == 7 and cfg.mode is Mode.PEI
    assert cfg.contention.background_util == 0.5
    assert cfg.energy.scratchpad_nj[PimLevel.BANK_GROUP] == 0.5
    assert cfg.topology == {"pipeline_depth": 30} and cfg.workload_args == {"batch": 8}


def test_include_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        read_config(tmp_path / "a.cfg")


@pytest.mark.parametrize("values", [
    {"bogus": "1"}, {"timing.tXYZ": "3"}, {"timing.tRC": "10"}, {"level": "bank"},
    {"mode": "fast"}, {"fidelity": "exact"}, {"topology.lanes": "4"},
    {"contention.background_util": "1.0"}, {"energy.simd_nj_per_op": "-1"},
])
def test_bad_keys_and_values(values):
    with pytest.raises(ConfigError):
        build_config(values)


def test_bad_file_lines(tmp_path):
    (tmp_path / "x.cfg").write_text("just words\n")
    with pytest.raises(ConfigError, match="x.cfg:1"):
        read_config(tmp_path / "x.cfg")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    with pytest.raises(ConfigError):
        build_config({"mapping": "no_such_mapping"}).mapping()


def test_json_lists_every_default():
    js = SimConfig().to_json()
    assert json.loads(json.dumps(js)) == js
    assert set(js["timing"]) >= {"tBL", "tCCDL", "tFAW", "data_rate_mts"}
    assert js["energy"]["scratchpad_nj"] == {"ch": 0.03, "dv": 0.1, "bg": 0.3}
    assert js["level"] is None and js["mode"] == "stp"
