import csv

import numpy as np
import pytest

from hevcs.baselines import evaluate_fixed_schedule, uncontrolled_schedule
from hevcs.devices import AggregatorNode, EvbProfile, EvSession
from hevcs.grid import Bus, Line, build_network
from hevcs.metrics import (
    REPORT_FILES,
    charging_cost,
    emit,
    energy_balance,
    feeder_apparent_power,
    feeder_peak,
    loss_table,
    voltage_report,
)
from hevcs.results import Scenario
from hevcs.scenario import desk_scenario

from helpers import small_scenario


def _one_ev_case(price):
    net = build_network([Bus("r", is_root=True), Bus("a", has_agg=True)], [Line("r", "a", 0.01, 0.03)])
    n = price.size
    s = EvSession("e", "a", 0, n, 0.0, 40.0, capacity=60.0, p_max=10.0)
    node = AggregatorNode("a", "a", None, [s], [EvbProfile(np.zeros(n), np.zeros(n))])
    z = np.zeros((2, n))
    return Scenario(net, [node], price, 0.5, z, z), s


def test_cost_examples():
    sc, s = _one_ev_case(np.zeros(8))
    p = np.full((1, 8), 10.0)           # 8 steps * 0.5 h * 10 kW = 40 kWh
    res = evaluate_fixed_schedule(sc, {"a": p})
    assert charging_cost(res)[1] == 0.0
    sc, s = _one_ev_case(np.full(20, 0.1))
    res = evaluate_fixed_schedule(sc, {"a": np.full((1, 20), 10.0)})     # 100 kWh
    assert charging_cost(res)[1] == pytest.approx(10.0, rel=1e-12)
    multi = uncontrolled_schedule(small_scenario(n=8))
    per, total = charging_cost(multi)
    assert sum(per.values()) == pytest.approx(total, rel=1e-14)


def test_reactive_losses_use_reactance():
    sc, _ = _one_ev_case(np.zeros(8))
    res = evaluate_fixed_schedule(sc, {"a": np.full((1, 8), 10.0)})
    kwh, kvarh = loss_table(res)["fixed"]
    # the line has x = 3 r
    assert kvarh[0] == pytest.approx(3.0 * kwh[0], rel=1e-12)
    assert kwh[0] > 0


def test_feeder_power_definition():
    res = uncontrolled_schedule(small_scenario(n=8))
    s = feeder_apparent_power(res)
    root = res.scenario.net.root_lines[0]
    expect = np.sqrt(res.state.P[root] ** 2 + res.state.Q[root] ** 2) * res.scenario.net.s_base
    assert np.allclose(s, expect, rtol=1e-14)
    assert feeder_peak(res) == pytest.approx(expect.max())
    sc, _ = _one_ev_case(np.zeros(4))
    idle = evaluate_fixed_schedule(sc, {"a": np.zeros((1, 4))})
    assert feeder_peak(idle) == 0.0


def test_root_voltage_is_reference():
    res = uncontrolled_schedule(small_scenario(n=8))
    vr = voltage_report(res)
    root = res.scenario.net.root
    assert vr.v_min[root] == vr.v_max[root] == 1.0


def test_energy_accounting_on_exact_flows():
    for sc in (small_scenario(n=8), desk_scenario()):
        res = uncontrolled_schedule(sc)
        bal = energy_balance(res)
        served = bal["ev"] + bal["bes"] + bal["uncontrollable"] + bal["fixed"] + bal["losses"]
        assert abs(bal["feeder"] - served) <= 1e-6 * abs(bal["feeder"])
        assert bal["mismatch"] == pytest.approx(bal["feeder"] - served)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_report_files_parse_back(tmp_path):
    sc = small_scenario(n=8)
    res = uncontrolled_schedule(sc)
    paths = emit(res, tmp_path)
    assert [p.name for p in paths] == list(REPORT_FILES)
    assert all(p.exists() for p in paths)

    rows = _rows(tmp_path / "losses.csv")
    assert rows[0] == ["method", "unit", "r-a", "a-b", "total"]
    kwh, kvarh = loss_table(res)["ucc"]
    assert rows[1][:2] == ["ucc", "kWh"]
    assert np.array_equal([float(x) for x in rows[1][2:4]], kwh)
    assert np.array_equal([float(x) for x in rows[2][2:4]], kvarh)

    per, total = charging_cost(res)
    costs = {r[1]: float(r[2]) for r in _rows(tmp_path / "costs.csv")[1:]}
    assert costs == {**per, "total": total}

    volts = _rows(tmp_path / "voltages.csv")[1:]
    mag = np.sqrt(res.state.V)
    for method, bus, step, v in volts:
        assert float(v) == mag[sc.net.index(bus), int(step)]

    feeder = _rows(tmp_path / "feeder.csv")[1:]
    assert np.array_equal([float(r[4]) for r in feeder], feeder_apparent_power(res))
    assert "losses:" in (tmp_path / "summary.txt").read_text()


def test_trace_columns_and_timing_flag(tmp_path):
    from hevcs.admm import AdmmConfig, run

    res = run(small_scenario(n=8), AdmmConfig(max_outer=2))
    emit(res, tmp_path / "a")
    emit(res, tmp_path / "b", timing=True)
    a = _rows(tmp_path / "a" / "trace.csv")
    b = _rows(tmp_path / "b" / "trace.csv")
    assert a[0][-1] == "objective" and b[0][-1] == "wall_time_s"
    outer = [r for r in a[1:] if r[1] == "outer"]
    assert [float(r[5]) for r in outer] == [rec.primal for rec in res.trace if rec.level == "outer"]


def test_controlled_run_lowers_high_loss_lines(ieee13_cc1, ieee13_ucc):
    cc1 = loss_table(ieee13_cc1)["cc1"][0]
    ucc = loss_table(ieee13_ucc)["ucc"][0]
    for line in (1, 4, 8):
        assert cc1[line - 1] / ucc[line - 1] <= 1.0
    assert voltage_report(ieee13_cc1).ok
    assert not voltage_report(ieee13_ucc).ok
