import csv
import json
from pathlib import Path

import pytest

from dopf.cli import (
    ISOCP_TRACE_COLUMNS,
    PSLP_TRACE_COLUMNS,
    Scenario,
    main,
    place_dg_fleet,
    run_scenario,
)
from dopf.feeder import parse_feeder

from conftest import fixture_path


def run_cli(argv):
    return main(argv)


def test_run_writes_full_report(tmp_path):
    out = tmp_path / "out"
    code = run_cli(
        ["run", "--feeder", str(fixture_path("case4")), "--out", str(out)]
    )
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["scenario"]["algo"] == "both"
    assert payload["feeder"]["buses"] == 4
    assert set(payload["algorithms"]) == {"pslp", "isocp"}
    for algo in ("pslp", "isocp"):
        block = payload["algorithms"][algo]
        assert block["converged"] is True
        assert block["validated_mw"] > 0.0
        assert abs(block["final_eps"]) < 1e-4
        assert list(block["dispatch"]) == ["end.a"]
    timing = json.loads((out / "timing.json").read_text())
    assert set(timing) == {"pslp", "isocp"}
    assert all(t >= 0.0 for t in timing.values())


def test_trace_csvs_reparse(tmp_path):
    out = tmp_path / "out"
    assert run_cli(["run", "--feeder", str(fixture_path("case6")), "--out", str(out)]) == 0
    with (out / "pslp_trace.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == PSLP_TRACE_COLUMNS
    assert [int(r["k"]) for r in rows] == list(range(1, len(rows) + 1))
    assert all(float(r["solve_time"]) >= 0.0 for r in rows)
    with (out / "isocp_trace.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == ISOCP_TRACE_COLUMNS
    assert [int(r["k"]) for r in rows] == list(range(1, len(rows) + 1))
    eps = [float(r["eps"]) for r in rows]
    assert eps[-1] < 1e-4


def test_reports_are_deterministic(tmp_path):
    args = ["run", "--feeder", str(fixture_path("case13")),
            "--dg-penetration", "0.4", "--seed", "7"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out", str(a)]) == 0
    assert run_cli(args + ["--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_seed_changes_fleet(tmp_path):
    base = ["run", "--feeder", str(fixture_path("case13")), "--algo", "isocp",
            "--dg-penetration", "0.4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(base + ["--seed", "1", "--out", str(a)]) == 0
    assert run_cli(base + ["--seed", "2", "--out", str(b)]) == 0
    da = json.loads((a / "report.json").read_text())["algorithms"]["isocp"]["dispatch"]
    db = json.loads((b / "report.json").read_text())["algorithms"]["isocp"]["dispatch"]
    assert da != db


def test_zero_penetration_matches_baseline(tmp_path):
    out = tmp_path / "out"
    code = run_cli(["run", "--feeder", str(fixture_path("case4")),
                    "--dg-penetration", "0.0", "--out", str(out)])
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["feeder"]["dg_sites"] == 0
    for block in payload["algorithms"].values():
        assert block["dispatch"] == {}
        assert abs(block["reduction_pct"]) < 1e-2


def test_dg_list_placement(tmp_path):
    listing = tmp_path / "fleet.json"
    listing.write_text(json.dumps([
        {"bus": "end", "phase": "a", "p_w": 60000, "s_va": 72000},
    ]))
    out = tmp_path / "out"
    code = run_cli(["run", "--feeder", str(fixture_path("case4")), "--algo", "pslp",
                    "--dg-list", str(listing), "--out", str(out)])
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["feeder"]["dg_sites"] == 1
    assert payload["feeder"]["dg_rating_mva"] == pytest.approx(0.072)
    assert list(payload["algorithms"]["pslp"]["dispatch"]) == ["end.a"]


def test_settings_override_reaches_solver(tmp_path):
    code = run_cli(["run", "--feeder", str(fixture_path("case6")), "--algo", "isocp",
                    "--set", "max_iters=1", "--out", str(tmp_path / "o")])
    assert code == 2
    payload = json.loads((tmp_path / "o" / "report.json").read_text())
    block = payload["algorithms"]["isocp"]
    assert block["converged"] is False
    assert block["iterations"] == 1


def test_unknown_setting_rejected(capsys):
    code = run_cli(["run", "--feeder", str(fixture_path("case4")),
                    "--set", "warp_factor=9"])
    assert code == 64
    assert "warp_factor" in capsys.readouterr().err


def test_missing_feeder_is_io_error():
    assert run_cli(["run", "--feeder", "/nonexistent/f.feeder"]) == 3


def test_malformed_feeder_is_parse_error(tmp_path):
    bad = tmp_path / "bad.feeder"
    bad.write_text("[bases]\npower 1000000\n")
    assert run_cli(["run", "--feeder", str(bad)]) == 4


def test_bad_algo_is_usage_error():
    with pytest.raises(SystemExit) as err:
        run_cli(["run", "--feeder", "x", "--algo", "simplex"])
    assert err.value.code == 64


def test_sweep_levels_validated(tmp_path):
    feeder = str(fixture_path("case4"))
    assert run_cli(["sweep", "--feeder", feeder, "--levels", "0.3,0.1"]) == 64
    assert run_cli(["sweep", "--feeder", feeder, "--levels", "1.5"]) == 64
    assert run_cli(["sweep", "--feeder", feeder, "--levels", "abc"]) == 64


def test_sweep_writes_summary(tmp_path):
    out = tmp_path / "sw"
    code = run_cli(["sweep", "--feeder", str(fixture_path("case13")),
                    "--algo", "isocp", "--levels", "0.2,0.6", "--out", str(out)])
    assert code == 0
    for tag in ("pen_020", "pen_060"):
        assert (out / tag / "report.json").exists()
    with (out / "sweep_summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["penetration"]) for r in rows] == [0.2, 0.6]
    reductions = [float(r["isocp_reduction_pct"]) for r in rows]
    assert reductions[0] < reductions[1]  # more capacity, more relief
    assert all(r["isocp_converged"] == "True" for r in rows)


def test_validate_clean_and_violating(tmp_path, capsys):
    feeder = str(fixture_path("case4"))
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps({"end.a": 0.0}))
    assert run_cli(["validate", "--feeder", feeder, "--dispatch", str(ok)]) == 0
    assert "no violations" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"end.a": -0.5}))
    assert run_cli(["validate", "--feeder", feeder, "--dispatch", str(bad)]) == 2
    assert "violation" in capsys.readouterr().out

    garbled = tmp_path / "g.json"
    garbled.write_text(json.dumps({"no-phase-here": 0.0}))
    assert run_cli(["validate", "--feeder", feeder, "--dispatch", str(garbled)]) == 64


def test_scenario_validation():
    with pytest.raises(Exception):
        Scenario(feeder="f", load_scale=-1.0)
    with pytest.raises(Exception):
        Scenario(feeder="f", dg_penetration=2.0)
    with pytest.raises(Exception):
        Scenario(feeder="f", algo="newton")


def test_fleet_placement_replaces_and_scales():
    g = parse_feeder(Path(fixture_path("case13")).read_text())
    fleet = place_dg_fleet(g, penetration=0.5, seed=3)
    total_p = sum(
        ld.p0 for bus in g.buses.values() for ld in bus.loads.values()
    ) * g.s_base
    active_rating = sum(
        dg.s_rated / 1.2 for bus in fleet.buses.values() for dg in bus.dgs.values()
    ) * fleet.s_base
    # integer unit count rounds the target; one unit of slack either way
    assert abs(active_rating - 0.5 * total_p) <= 40000.0
    for bus in fleet.buses.values():
        for dg in bus.dgs.values():
            assert dg.p_out == pytest.approx(dg.s_rated / 1.2 * 0.5)
    sites = {
        (b, p) for b, bus in fleet.buses.items() for p in bus.dgs
    }
    loaded = {
        (b, p) for b, bus in g.buses.items() for p in bus.loads
    }
    assert sites <= loaded


def test_run_scenario_api(tmp_path):
    scen = Scenario(feeder=str(fixture_path("case4")), algo="pslp")
    rep = run_scenario(scen)
    assert rep.all_converged
    assert rep.outcomes["pslp"].objective_mw == pytest.approx(0.7255529, abs=1e-5)
    assert rep.baseline_mw > rep.outcomes["pslp"].validated_mw
