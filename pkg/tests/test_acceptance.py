"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even without ``-s``)
before asserting, so ``pytest tests/test_acceptance.py`` doubles as a report.
"""

import time

import numpy as np
import pytest

from hevcs.admm import AdmmConfig, AggregatorAgent, HierarchicalAdmm, run
from hevcs.conic import solve_conic
from hevcs.grid import socp_gap
from hevcs.metrics import charging_cost, emit, energy_balance, feeder_peak, loss_table, voltage_report
from hevcs.scenario import desk_scenario
from hevcs.subproblems import solve_centralized

from oracles import aggregator_cvxpy
from test_conic import _random_ball, _random_box, _random_eq, _random_soc


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return report


def _rel(a, b):
    return abs(a - b) / abs(b)


@pytest.fixture(scope="module")
def desk():
    return desk_scenario()


@pytest.fixture(scope="module")
def desk_runs(desk):
    t0 = time.perf_counter()
    admm = run(desk, AdmmConfig())
    elapsed = time.perf_counter() - t0
    return admm, solve_centralized(desk), elapsed


@pytest.fixture(scope="session")
def ieee13_central(ieee13):
    return solve_centralized(ieee13)


def test_distributed_matches_centralized(desk_runs, verdict):
    admm, central, elapsed = desk_runs
    gap = _rel(admm.objective, central.objective)
    ok = admm.converged and gap <= 1e-3 and elapsed < 300
    verdict(1, "distributed vs centralized (desk)", ok,
            f"objective {admm.objective:.6f} vs {central.objective:.6f}, rel gap {gap:.2e}, "
            f"{admm.iterations} outer iterations, {elapsed:.1f} s")


def test_sharing_loop_matches_direct_solve(verdict):
    sc = desk_scenario(ev_per_agg=1)
    cfg = AdmmConfig()
    worst, most = 0.0, 0
    for seed, node in enumerate(sc.nodes):
        agent = AggregatorAgent(node, sc, cfg)
        rng = np.random.default_rng(seed)
        P, Q = agent.bus_load()
        n = sc.horizon
        P_k, Q_k = P + rng.uniform(-20, 20, n), Q + rng.uniform(-5, 5, n)
        v, u = rng.normal(size=n), rng.normal(size=n)
        rep = agent.inner_loop(P_k, Q_k, v, u)
        rp, rq = cfg.penalty(cfg.rho_p), cfg.penalty(cfg.rho_q)
        P, Q = agent.bus_load()
        got = sc.t_h * sc.price @ P + rp / 2 * np.sum((P - P_k + v) ** 2) + rq / 2 * np.sum((Q - Q_k + u) ** 2)
        ref = aggregator_cvxpy(node, sc, P_k, Q_k, v, u, rp, rq)[0]
        worst = max(worst, _rel(got, ref))
        most = max(most, rep.iterations if rep.converged else 10**9)
    verdict(2, "sharing ADMM vs direct aggregator solve", worst <= 1e-3 and most <= 500,
            f"worst rel gap {worst:.2e}, at most {most} inner iterations")


def test_relaxation_is_tight(desk_runs, ieee13_cc1, ieee13_cc2, ieee13_central, verdict):
    admm, central, _ = desk_runs
    gaps = {
        "desk cc1": socp_gap(admm.scenario.net, admm.state).max(),
        "desk central": socp_gap(central.scenario.net, central.state).max(),
        "ieee13 cc1": socp_gap(ieee13_cc1.scenario.net, ieee13_cc1.state).max(),
        "ieee13 cc2": socp_gap(ieee13_cc2.scenario.net, ieee13_cc2.state).max(),
        "ieee13 central": socp_gap(ieee13_central.scenario.net, ieee13_central.state).max(),
    }
    worst = max(gaps.values())
    verdict(3, "SOC relaxation tight", worst <= 1e-5,
            ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()))


def test_losses_and_costs_ordering(ieee13_ucc, ieee13_cc1, ieee13_cc2, verdict):
    loss = {r.method: loss_table(r)[r.method][0].sum() for r in (ieee13_ucc, ieee13_cc1, ieee13_cc2)}
    cost = {r.method: charging_cost(r)[1] for r in (ieee13_ucc, ieee13_cc1, ieee13_cc2)}
    ok = (ieee13_cc1.converged and ieee13_cc2.converged
          and loss["cc1"] <= 0.99 * loss["ucc"]
          and cost["cc1"] <= 0.99 * cost["cc2"] and cost["cc2"] <= 0.99 * cost["ucc"])
    verdict(4, "loss and cost ordering (IEEE-13)", ok,
            "loss kWh " + ", ".join(f"{m} {v:.2f}" for m, v in loss.items())
            + "; cost $ " + ", ".join(f"{m} {v:.2f}" for m, v in cost.items()))


def test_voltage_feasibility(ieee13_ucc, ieee13_cc1, ieee13_cc2, verdict):
    rep = {r.method: voltage_report(r) for r in (ieee13_ucc, ieee13_cc1, ieee13_cc2)}
    ok = rep["cc1"].ok and rep["cc2"].ok and len(rep["ucc"].violations) >= 1
    verdict(5, "voltage limits", ok,
            ", ".join(f"{m} min {r.v_min.min():.4f} max {r.v_max.max():.4f} ({len(r.violations)} violations)"
                      for m, r in rep.items()))


def test_feeder_peak_reduction(ieee13_ucc, ieee13_cc1, verdict):
    a, b = feeder_peak(ieee13_cc1), feeder_peak(ieee13_ucc)
    verdict(6, "feeder peak", a < b, f"cc1 {a:.1f} kVA vs ucc {b:.1f} kVA")


def test_property_suites(ieee13_ucc, desk, tmp_path, verdict):
    notes = []
    bal = energy_balance(ieee13_ucc)
    e_rel = abs(bal["mismatch"]) / abs(bal["feeder"])
    notes.append(f"energy mismatch {e_rel:.1e}")

    driver = HierarchicalAdmm(desk, AdmmConfig())
    exact = True
    for k in (1, 2, 3):
        old = driver.state
        inner_before = [a.state for a in driver.agents]
        driver.outer_iterate(k)
        st = driver.state
        exact &= np.array_equal(st.v, old.v + (st.P_agg - st.P_dso))
        exact &= np.array_equal(st.u, old.u + (st.Q_agg - st.Q_dso))
        for agent, before in zip(driver.agents, inner_before):
            mean = np.zeros_like(agent.state.copy)
            for row in agent.state.p_ev:
                mean = mean + row
            exact &= np.allclose(mean / agent.node.n_ev, agent.state.mean, rtol=0, atol=1e-12)
            exact &= np.array_equal(agent.state.p_ev.mean(axis=0), agent.state.mean)
    # one more inner step checked against its own pre-state
    agent = driver.agents[0]
    st0 = agent.state
    agent.inner_iterate(driver.state.P_dso[0], driver.state.Q_dso[0], driver.state.v[0], driver.state.u[0])
    exact &= np.array_equal(agent.state.dual, st0.dual + (agent.state.mean - agent.state.copy))
    notes.append(f"dual/mean identities {'exact' if exact else 'broken'}")

    outputs = []
    for workers in (1, 3):
        res = run(desk, AdmmConfig(workers=workers))
        out = tmp_path / f"w{workers}"
        emit(res, out)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    notes.append(f"worker outputs {'identical' if same else 'differ'}")

    worst = 0.0
    makers = (_random_box, _random_soc, _random_ball, _random_eq)
    for seed in range(24):
        rng = np.random.default_rng(1000 + seed)
        problem, ref = makers[seed % 4](rng, int(rng.integers(2, 6)))
        sol = solve_conic(problem, tol=1e-10)
        worst = max(worst, abs(sol.objective - ref) / max(1.0, abs(ref)))
    notes.append(f"conic vs oracles worst {worst:.1e} over 24")

    ok = e_rel <= 1e-6 and exact and same and worst <= 1e-6
    verdict(7, "property suites", ok, "; ".join(notes))


def test_storage_follows_price(ieee13_cc1, verdict):
    sc = ieee13_cc1.scenario
    price = sc.price
    cheap = price <= np.quantile(price, 0.25)
    dear = price >= np.quantile(price, 0.75)
    p_bes = sum(ieee13_cc1.p_bes.values())
    charged = float(p_bes[cheap].sum()) * sc.t_h
    discharged = -float(p_bes[dear].sum()) * sc.t_h
    verdict(8, "storage charges cheap, discharges dear", charged > 0 and discharged > 0,
            f"net charge in cheapest quartile {charged:.1f} kWh, net discharge in dearest {discharged:.1f} kWh")
