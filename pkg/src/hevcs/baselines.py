"""Reference schedules: uncontrolled charging and controlled charging without storage.

Fixed schedules are evaluated with an exact AC power flow (backward/forward
sweep) instead of the relaxed optimisation, so voltage violations show up as
they would on the feeder.
"""

from __future__ import annotations

import numpy as np

from .admm import AdmmConfig, run
from .devices import bus_injection, check_session, uncontrolled_charging
from .grid import NetworkState, RadialNetwork
from .results import Scenario, ScheduleResult, objective_value


class PowerFlowDiverged(RuntimeError):
    pass


def power_flow_sweep(net: RadialNetwork, p_load, q_load, tol: float = 1e-12,
                     max_iter: int = 100) -> NetworkState:
    """Exact branch flows for per-unit bus loads of shape (n_bus, N).

    Returns the state in squared quantities, with ``P``/``Q`` the sending-end
    line flows, so it satisfies the branch-flow equations with equality.
    """
    p_load = np.asarray(p_load, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    if p_load.shape != q_load.shape or p_load.shape[0] != net.n_bus:
        raise ValueError(f"loads must have shape ({net.n_bus}, N)")
    n = p_load.shape[1]
    s_load = p_load + 1j * q_load
    z = net.r + 1j * net.x
    v0 = np.sqrt(net.buses[net.root].v_ref_sq)
    volt = np.full((net.n_bus, n), v0, dtype=complex)
    cur = np.zeros((net.n_line, n), dtype=complex)
    # lines ordered so that every line comes after its parent
    order = [net.parent_line[b] for b in net.order if b != net.root]
    for _ in range(max_iter):
        cur_new = np.zeros_like(cur)
        for k in reversed(order):
            j = net.line_to[k]
            cur_new[k] = np.conj(s_load[j] / volt[j])
            for c in net.child_lines[j]:
                cur_new[k] += cur_new[c]
        new = volt.copy()
        for k in order:
            new[net.line_to[k]] = new[net.line_from[k]] - z[k] * cur_new[k]
        delta = np.max(np.abs(new - volt)) if volt.size else 0.0
        volt, cur = new, cur_new
        if delta < tol:
            break
    else:
        raise PowerFlowDiverged(f"sweep did not converge in {max_iter} iterations")
    send = volt[net.line_from] * np.conj(cur)
    return NetworkState(V=np.abs(volt) ** 2, I=np.abs(cur) ** 2, P=send.real.copy(), Q=send.imag.copy())


def evaluate_fixed_schedule(scenario: Scenario, p_ev: dict, p_bes: dict | None = None,
                            q_bes: dict | None = None, method: str = "fixed",
                            loss_weight: float = 1.0) -> ScheduleResult:
    """Run the exact power flow for given EV (and optional storage) schedules."""
    n = scenario.horizon
    p_bes = p_bes or {}
    q_bes = q_bes or {}
    P_agg, Q_agg, pb, qb = {}, {}, {}, {}
    for node in scenario.nodes:
        a = node.agg_id
        pb[a] = np.asarray(p_bes.get(a, np.zeros(n)), dtype=float)
        qb[a] = np.asarray(q_bes.get(a, np.zeros(n)), dtype=float)
        P_agg[a], Q_agg[a] = bus_injection(node, p_ev[a], pb[a], qb[a])
    res = ScheduleResult(method=method, scenario=scenario, state=None, p_ev=p_ev, p_bes=pb, q_bes=qb,
                         P_agg=P_agg, Q_agg=Q_agg, objective=float("nan"), loss_weight=loss_weight)
    p, q = res.bus_loads
    sb = scenario.net.s_base
    res.state = power_flow_sweep(scenario.net, p / sb, q / sb)
    res.objective = objective_value(scenario, res.state, P_agg, loss_weight)
    return res


def uncontrolled_schedule(scenario: Scenario, loss_weight: float = 1.0) -> ScheduleResult:
    """Every EV charges at full rate from plug-in; storage stays idle."""
    n, t_h = scenario.horizon, scenario.t_h
    p_ev = {}
    for node in scenario.nodes:
        for s in node.sessions:
            check_session(s, n, t_h)
        p_ev[node.agg_id] = np.array([uncontrolled_charging(s, n, t_h) for s in node.sessions]).reshape(node.n_ev, n)
    return evaluate_fixed_schedule(scenario, p_ev, method="ucc", loss_weight=loss_weight)


def run_without_bes(scenario: Scenario, config: AdmmConfig | None = None, **kwargs) -> ScheduleResult:
    """Controlled charging with every storage unit removed."""
    result = run(scenario.without_bes(), config, **kwargs)
    result.method = "cc2"
    return result
