import csv
import io
import json

import numpy as np
import pytest

from stepstone import cli
from stepstone.addrmap import PimLevel
from stepstone.agen import AddressGenerator
from stepstone.grouping import MatrixGeometry, derive_groups


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_mapping(capsys, tmp_path):
    code, out, _ = run(capsys, "validate-mapping", "skl_ddr4")
    assert code == 0 and json.loads(out)["ok"]
    bad = tmp_path / "bad.map"
    bad.write_text("BLOCK_OFFSET_BITS 6\nTOTAL_BITS 8\nFIELD BG0 = XOR(b6)\nFIELD COL6 = XOR(b6)\n")
    code, out, _ = run(capsys, "validate-mapping", str(bad))
    assert code == 2 and not json.loads(out)["invertible"]
    code, _, err = run(capsys, "validate-mapping", str(tmp_path / "missing.map"))
    assert code == 1 and "error" in err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 1
    assert run(capsys, "plan", "--matrix", "64x64")[0] == 1          # neither --level nor --choose
    assert run(capsys, "run", "--matrix", "64x", "--level", "bg")[0] == 1
    assert run(capsys, "run", "--m", "64", "--k", "64", "--level", "xx")[0] == 1
    assert run(capsys, "run", "--m", "64", "--k", "64", "--n", "0")[0] == 1
    assert run(capsys, "run", "--m", "64", "--k", "64", "--set", "bogus=1")[0] == 1


def test_plan_choose_and_dump(capsys, tmp_path):
    code, out, _ = run(capsys, "plan", "--matrix", "1024x4096", "--n", "1", "--choose")
    assert code == 0
    assert out.splitlines()[0] == "chosen: level=bg subset=all"
    assert "dv/all" in out and "ch/half" in out
    dump = tmp_path / "plan.json"
    code, out, _ = run(capsys, "plan", "--matrix", "64x256", "--level", "bg", "--dump-plan", str(dump))
    assert code == 0
    js = json.loads(dump.read_text())
    assert js["level"] == "bg" and js["panels"]
    assert json.loads(out)["level"] == "bg"


def test_agen_trace_matches_generator(capsys, skl):
    code, out, _ = run(capsys, "agen-trace", "--matrix", "16x512", "--level", "bg",
                       "--pim", "2", "--group", "1")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    g = MatrixGeometry(16, 512)
    gen = AddressGenerator(derive_groups(skl, g, PimLevel.BANK_GROUP), g, 2, 1)
    assert [int(r["addr"], 16) for r in rows] == [int(a) for a in gen.stream_array()]
    assert all(int(r["iterations"]) <= 2 for r in rows)


def test_run_verify_and_deterministic_report(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        code, out, _ = run(capsys, "run", "--matrix", "256x1024", "--batch", "4", "--level", "bg",
                           "--seed", "5", "--verify", "-O", str(path))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert rep["summary"]["verify_rel_err"] <= 1e-4
    panel = rep["panels"][0]
    for key in ("phase_cycles", "total_ns", "traffic_bytes", "bandwidth_utilization",
                "stall_cycles", "command_bus_wait", "roofline", "energy"):
        assert key in panel
    assert rep["config"]["seed"] == 5


def test_run_non_pow2_and_trace_csv(capsys, tmp_path):
    tr = tmp_path / "trace.csv"
    code, out, _ = run(capsys, "run", "--matrix", "100x48", "--n", "3", "--level", "dv",
                       "--verify", "--trace-csv", str(tr))
    assert code == 0 and json.loads(out)["verify_rel_err"] <= 1e-4
    rows = list(csv.DictReader(tr.open()))
    assert rows and list(rows[0]) == cli.TRACE_COLUMNS
    assert len({r["panel"] for r in rows}) > 1


def test_verification_failure_exit_2(capsys, monkeypatch):
    real = cli.run_gemm

    def broken(A, B, plan):
        C, t = real(A, B, plan)
        return C + 1.0, t
    monkeypatch.setattr(cli, "run_gemm", broken)
    code, out, _ = run(capsys, "run", "--matrix", "64x256", "--level", "bg", "--verify")
    assert code == 2 and json.loads(out)["verify_rel_err"] > 1e-4


def test_sweep_keeps_config_order(capsys, tmp_path):
    path = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", "--m", "64,128", "--k", "256", "--n", "1,4",
                     "--levels", "bg,dv", "--jobs", "2", "-O", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == cli.SWEEP_COLUMNS
    got = [(int(r["m"]), int(r["n"]), r["level"]) for r in rows]
    assert got == [(m, n, lv) for m in (64, 128) for n in (1, 4) for lv in ("bg", "dv")]
    code, out, _ = run(capsys, "sweep", "--m", "64,128", "--k", "256", "--n", "1,4",
                       "--levels", "bg,dv")
    assert list(csv.DictReader(io.StringIO(out))) == rows


def test_roofline_plot_data(capsys, tmp_path):
    path = tmp_path / "roof.csv"
    code, _, _ = run(capsys, "roofline", "--n", "1,64", "--emit-plot-data", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 6
    n1 = [float(r["intensity_flop_per_byte"]) for r in rows if r["n"] == "1"]
    assert np.allclose(n1, 0.5, rtol=0.05)


def test_run_workload(capsys, tmp_path):
    path = tmp_path / "w.json"
    code, out, _ = run(capsys, "run-workload", "bert", "--set", "fidelity=estimate", "-O", str(path))
    assert code == 0
    js = json.loads(path.read_text())
    assert {r["n"] for r in js["layers"]} == {32}
    code, out, _ = run(capsys, "run-workload", "dlrm", "--set", "fidelity=estimate", "--batch", "8")
    assert code == 0 and {r["n"] for r in json.loads(out)["layers"]} == {8}
    assert run(capsys, "run-workload", "nope")[0] == 1
