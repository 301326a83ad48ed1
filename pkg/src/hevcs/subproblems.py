"""Convex subproblems of the two-level ADMM and the centralized reference problem.

Every problem is expressible in :mod:`hevcs.conic` canonical form. The EV update,
which runs once per EV per inner iteration, additionally has an active-set fast
path (a Euclidean projection onto the EV's feasible charging set).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import quadprog

from .conic import ConicBuilder, ReusableSolver, solve_conic
from .devices import BesUnit, EvSession, SessionError, check_session, ev_energy_bounds, ev_power_bounds
from .grid import NetworkState, RadialNetwork
from .results import Scenario, ScheduleResult, objective_value

SUBPROBLEM_TOL = 1e-8


class InfeasibleSession(SessionError):
    pass


# ---------------------------------------------------------------------------
# EV update

def _check(session: EvSession, horizon: int, t_h: float):
    try:
        check_session(session, horizon, t_h)
    except SessionError as exc:
        raise InfeasibleSession(str(exc)) from exc


@lru_cache(maxsize=4096)
def _ev_constraints(session: EvSession, t_h: float):
    n = session.n_window
    step = t_h * session.eta
    rows = [np.full(n, step)]
    rhs = [session.c_target - session.c0]
    eye = np.eye(n)
    rows += [eye, -eye]
    rhs += [np.full(n, session.p_min), np.full(n, -session.p_max)]
    if n > 1:
        cum = np.tril(np.ones((n - 1, n))) * step
        rows += [cum, -cum]
        rhs += [np.full(n - 1, -session.c0), np.full(n - 1, session.c0 - session.capacity)]
    C = np.vstack([np.atleast_2d(r) for r in rows]).T.copy()
    b = np.concatenate([np.atleast_1d(r) for r in rhs])
    return C, b


def project_ev(session: EvSession, y: np.ndarray, t_h: float) -> np.ndarray:
    """Closest feasible charging trajectory to ``y`` (dual active-set QP)."""
    y = np.asarray(y, dtype=float)
    _check(session, y.size, t_h)
    C, b = _ev_constraints(session, t_h)
    n = session.n_window
    try:
        sol = quadprog.solve_qp(np.eye(n), y[session.window].copy(), C, b, 1)[0]
    except ValueError as exc:
        raise InfeasibleSession(f"{session.ev_id}: {exc}") from exc
    p = np.zeros_like(y)
    p[session.window] = np.clip(sol, session.p_min, session.p_max)
    return p


def ev_objective(p, price, t_h, rho, target) -> float:
    return float(t_h * price @ p + 0.5 * rho * np.sum((p - target) ** 2))


def build_ev_problem(session: EvSession, price, t_h, rho, target):
    """Canonical conic form of the EV update; returns ``(problem, p_index)``."""
    price = np.asarray(price, dtype=float)
    n = price.size
    b = ConicBuilder()
    p = b.var(n)
    c = _add_ev(b, session, p, t_h)
    b.linear(p, t_h * price)
    b.square([(p, 1.0)], -np.asarray(target, dtype=float), rho)
    return b.build(), p


def solve_ev_subproblem(session: EvSession, price, prev, rho: float, t_h: float, *,
                        mean=None, copy=None, dual=None, broadcast=None,
                        method: str = "active-set") -> np.ndarray:
    """Minimise ``t_h * price'p + rho/2 ||p - prev + mean - copy + dual||^2`` over
    the EV's feasible trajectories.

    Pass either ``broadcast`` (``dual + mean - copy``) or the three separate
    terms; the target only depends on their combination.
    """
    if broadcast is None:
        broadcast = np.asarray(dual) + np.asarray(mean) - np.asarray(copy)
    price = np.asarray(price, dtype=float)
    target = np.asarray(prev, dtype=float) - broadcast
    if method == "active-set":
        return project_ev(session, target - t_h * price / rho, t_h)
    if method == "conic":
        _check(session, price.size, t_h)
        problem, idx = build_ev_problem(session, price, t_h, rho, target)
        return solve_conic(problem, tol=SUBPROBLEM_TOL).x[idx]
    raise ValueError(f"unknown method {method!r}")


def _add_ev(b: ConicBuilder, session: EvSession, p, t_h):
    n = len(p)
    lo, hi = ev_power_bounds(session, n)
    b.bounds(p, lo, hi)
    c = b.var(n + 1)
    b.eq([(c[1:], 1.0), (c[:-1], -1.0), (p, -t_h * session.eta)], np.zeros(n))
    elo, ehi = ev_energy_bounds(session, n)
    b.eq([(c[:1], 1.0)], [session.c0])
    b.bounds(c[1:], elo[1:], ehi[1:])
    return c


def _add_bes(b: ConicBuilder, bes: BesUnit, n: int, t_h: float):
    p = b.var(n)
    q = b.var(n)
    c = b.var(n + 1)
    b.eq([(c[1:], 1.0), (c[:-1], -1.0), (p, -t_h * bes.eta)], np.zeros(n))
    b.eq([(c[:1], 1.0)], [bes.c0])
    b.bounds(c[1:], bes.c_min, bes.c_max)
    if bes.terminal == "cyclic":
        b.bounds(c[-1:], lo=bes.c0)
    b.soc(([], np.full(n, bes.s_rating)), [([(p, 1.0)], 0.0), ([(q, 1.0)], 0.0)])
    return p, q, c


# ---------------------------------------------------------------------------
# Aggregator update

@dataclass
class AggUpdate:
    copy: np.ndarray        # aggregator copy of the mean EV power
    p_bes: np.ndarray
    q_bes: np.ndarray
    objective: float


class AggSubproblem:
    """Aggregator update with its conic structure factorised once.

    Minimises over (copy m, p_bes, q_bes)::

        t_h * price'(p_uc + p_bes)
        + rho_p/2 ||n_ev m + p_uc + p_bes - P_k + v||^2
        + rho_q/2 ||q_uc + q_bes - Q_k + u||^2
        + n_ev rho_j/2 ||m - mean - dual||^2

    subject to the BES dynamics, energy limits and converter rating.
    """

    def __init__(self, bes: BesUnit | None, n_ev: int, horizon: int, t_h: float,
                 rho_p: float, rho_q: float, rho_j: float):
        self.bes = bes
        self.n_ev = n_ev
        self.n = horizon
        self.t_h = t_h
        self.rho_p, self.rho_q, self.rho_j = rho_p, rho_q, rho_j
        self._solver = None
        if bes is not None:
            b = ConicBuilder()
            self._m = b.var(horizon) if n_ev else None
            self._p, self._q, self._c = _add_bes(b, bes, horizon, t_h)
            N = n_ev
            if N:
                b.square([(self._m, float(N)), (self._p, 1.0)], 0.0, rho_p)
                b.square([(self._m, 1.0)], 0.0, N * rho_j)
            else:
                b.square([(self._p, 1.0)], 0.0, rho_p)
            b.square([(self._q, 1.0)], 0.0, rho_q)
            self.problem = b.build()
            self._solver = ReusableSolver(self.problem, tol=SUBPROBLEM_TOL)

    def _terms(self, p_uc, q_uc, P_k, Q_k, v, u, mean, dual):
        d1 = p_uc - P_k + v
        d2 = mean + dual
        d3 = q_uc - Q_k + u
        return d1, d2, d3

    def objective(self, m, p_bes, q_bes, price, p_uc, q_uc, P_k, Q_k, v, u, mean, dual) -> float:
        d1, d2, d3 = self._terms(p_uc, q_uc, P_k, Q_k, v, u, mean, dual)
        N = self.n_ev
        val = self.t_h * price @ (p_uc + p_bes)
        val += 0.5 * self.rho_p * np.sum((N * m + p_bes + d1) ** 2)
        val += 0.5 * self.rho_q * np.sum((q_bes + d3) ** 2)
        if N:
            val += 0.5 * N * self.rho_j * np.sum((m - d2) ** 2)
        return float(val)

    def solve(self, price, p_uc, q_uc, P_k, Q_k, v, u, mean, dual) -> AggUpdate:
        d1, d2, d3 = self._terms(p_uc, q_uc, P_k, Q_k, v, u, mean, dual)
        N = self.n_ev
        rp, rq, rj = self.rho_p, self.rho_q, self.rho_j
        if self.bes is None:
            # copy has a closed form; no storage means p_bes = q_bes = 0
            m = (rj * d2 - rp * d1) / (rp * N + rj) if N else np.zeros(self.n)
            z = np.zeros(self.n)
            obj = self.objective(m, z, z, price, p_uc, q_uc, P_k, Q_k, v, u, mean, dual)
            return AggUpdate(m, z, z.copy(), obj)
        q = np.zeros(self.problem.n)
        q[self._p] = self.t_h * price + rp * d1
        q[self._q] = rq * d3
        if N:
            q[self._m] = rp * N * d1 - N * rj * d2
        sol = self._solver.solve(q=q)
        x = sol.x
        m = x[self._m] if N else np.zeros(self.n)
        p_bes, q_bes = x[self._p], x[self._q]
        obj = self.objective(m, p_bes, q_bes, price, p_uc, q_uc, P_k, Q_k, v, u, mean, dual)
        return AggUpdate(m, p_bes, q_bes, obj)


def solve_agg_subproblem(bes, p_uc, q_uc, n_ev, P_k, Q_k, v, u, mean, dual, price, t_h,
                         rho_p, rho_q, rho_j) -> AggUpdate:
    sub = AggSubproblem(bes, n_ev, len(price), t_h, rho_p, rho_q, rho_j)
    return sub.solve(np.asarray(price, float), p_uc, q_uc, P_k, Q_k, v, u, mean, dual)


# ---------------------------------------------------------------------------
# Network (DSO) update

def _add_network(b: ConicBuilder, net: RadialNetwork, n: int, fixed_p, fixed_q, agg_vars: dict):
    """Relaxed branch-flow constraints. ``agg_vars`` maps a bus index to the
    ``(P, Q)`` variable indices [kW, kVar] of the aggregator load there."""
    L, B = net.n_line, net.n_bus
    P = b.var(L * n).reshape(L, n)
    Q = b.var(L * n).reshape(L, n)
    I = b.var(L * n).reshape(L, n)
    V = b.var(B * n).reshape(B, n)
    sb = net.s_base
    for k, line in enumerate(net.lines):
        j = net.line_to[k]
        i = net.line_from[k]
        r, x = line.r, line.x
        kids = net.child_lines[j]
        tp = [(P[k], 1.0), (I[k], -r)] + [(P[c], -1.0) for c in kids]
        tq = [(Q[k], 1.0), (I[k], -x)] + [(Q[c], -1.0) for c in kids]
        if j in agg_vars:
            pa, qa = agg_vars[j]
            tp.append((pa, -1.0 / sb))
            tq.append((qa, -1.0 / sb))
        b.eq(tp, fixed_p[j] / sb)
        b.eq(tq, fixed_q[j] / sb)
        b.eq([(V[i], 1.0), (V[j], -1.0), (P[k], -2 * r), (Q[k], -2 * x), (I[k], r * r + x * x)],
             np.zeros(n))
        b.rsoc(([(V[i], 1.0)], 0.0), ([(I[k], 1.0)], 0.0), [([(P[k], 1.0)], 0.0), ([(Q[k], 1.0)], 0.0)])
    vmin, vmax = net.v_bounds_sq()
    for bus in range(B):
        if bus == net.root:
            b.eq([(V[bus], 1.0)], np.full(n, net.buses[bus].v_ref_sq))
        else:
            b.bounds(V[bus], vmin[bus], vmax[bus])
    b.bounds(I.ravel(), lo=0.0)
    return P, Q, I, V


def _state_from(x, P, Q, I, V) -> NetworkState:
    return NetworkState(V=x[V].copy(), I=x[I].copy(), P=x[P].copy(), Q=x[Q].copy())


@dataclass
class DsoUpdate:
    state: NetworkState
    P: np.ndarray     # (n_agg, N) DSO copies [kW]
    Q: np.ndarray
    objective: float


class DsoSubproblem:
    """Network operator update: minimise weighted line losses plus the consensus
    penalties toward the aggregators' bus loads, under the relaxed branch flow."""

    def __init__(self, net: RadialNetwork, agg_buses, horizon: int, t_h: float,
                 fixed_p, fixed_q, rho_p: float, rho_q: float, loss_weight: float = 1.0):
        self.net = net
        self.agg_buses = [net.index(bid) for bid in agg_buses]
        self.n = horizon
        self.rho_p, self.rho_q = rho_p, rho_q
        b = ConicBuilder()
        na = len(self.agg_buses)
        self._Pa = b.var(na * horizon).reshape(na, horizon)
        self._Qa = b.var(na * horizon).reshape(na, horizon)
        agg_vars = {bus: (self._Pa[a], self._Qa[a]) for a, bus in enumerate(self.agg_buses)}
        self._vars = _add_network(b, net, horizon, fixed_p, fixed_q, agg_vars)
        I = self._vars[2]
        b.linear(I, (loss_weight * t_h * net.s_base * net.r)[:, None] * np.ones((1, horizon)))
        b.square([(self._Pa.ravel(), 1.0)], 0.0, rho_p)
        b.square([(self._Qa.ravel(), 1.0)], 0.0, rho_q)
        self.problem = b.build()
        self._q0 = self.problem.q.copy()
        self._solver = ReusableSolver(self.problem, tol=SUBPROBLEM_TOL)

    def solve(self, P_jc, Q_jc, v, u) -> DsoUpdate:
        tp = np.asarray(P_jc) + np.asarray(v)
        tq = np.asarray(Q_jc) + np.asarray(u)
        q = self._q0.copy()
        q[self._Pa] -= self.rho_p * tp
        q[self._Qa] -= self.rho_q * tq
        const = 0.5 * self.rho_p * np.sum(tp**2) + 0.5 * self.rho_q * np.sum(tq**2)
        sol = self._solver.solve(q=q, const=const)
        x = sol.x
        state = _state_from(x, *self._vars)
        return DsoUpdate(state, x[self._Pa], x[self._Qa], sol.objective)


def solve_dso_subproblem(scenario: Scenario, P_jc, Q_jc, v, u, rho_p, rho_q,
                         loss_weight: float = 1.0) -> DsoUpdate:
    sub = DsoSubproblem(scenario.net, [nd.bus_id for nd in scenario.nodes], scenario.horizon,
                        scenario.t_h, scenario.fixed_p, scenario.fixed_q, rho_p, rho_q, loss_weight)
    return sub.solve(P_jc, Q_jc, v, u)


# ---------------------------------------------------------------------------
# Centralized reference

def build_centralized(scenario: Scenario, loss_weight: float = 1.0):
    """Joint relaxed problem; returns ``(problem, index map)``."""
    net, n, t_h = scenario.net, scenario.horizon, scenario.t_h
    b = ConicBuilder()
    idx = {"ev": {}, "bes": {}, "agg": {}}
    agg_vars = {}
    for node in scenario.nodes:
        p_uc, q_uc = scenario.uncontrollable(node)
        Pa, Qa = b.var(n), b.var(n)
        tp = [(Pa, 1.0)]
        tq = [(Qa, 1.0)]
        evs = []
        for s in node.sessions:
            check_session(s, n, t_h)
            p = b.var(n)
            _add_ev(b, s, p, t_h)
            tp.append((p, -1.0))
            evs.append(p)
        if node.bes is not None:
            pb, qb, _ = _add_bes(b, node.bes, n, t_h)
            tp.append((pb, -1.0))
            tq.append((qb, -1.0))
            idx["bes"][node.agg_id] = (pb, qb)
        b.eq(tp, p_uc)
        b.eq(tq, q_uc)
        b.linear(Pa, t_h * scenario.price)
        idx["ev"][node.agg_id] = evs
        idx["agg"][node.agg_id] = (Pa, Qa)
        k = net.index(node.bus_id)
        if k in agg_vars:
            raise ValueError(f"two aggregators on bus {node.bus_id}")
        agg_vars[k] = (Pa, Qa)
    net_vars = _add_network(b, net, n, scenario.fixed_p, scenario.fixed_q, agg_vars)
    I = net_vars[2]
    b.linear(I, (loss_weight * t_h * net.s_base * net.r)[:, None] * np.ones((1, n)))
    idx["net"] = net_vars
    return b.build(), idx


def solve_centralized(scenario: Scenario, loss_weight: float = 1.0, tol: float = SUBPROBLEM_TOL) -> ScheduleResult:
    """Global optimum of the relaxed joint scheduling problem."""
    problem, idx = build_centralized(scenario, loss_weight)
    sol = solve_conic(problem, tol=tol)
    x = sol.x
    n = scenario.horizon
    p_ev, p_bes, q_bes, P_agg, Q_agg = {}, {}, {}, {}, {}
    for node in scenario.nodes:
        a = node.agg_id
        p_ev[a] = np.array([x[p] for p in idx["ev"][a]]).reshape(node.n_ev, n)
        if a in idx["bes"]:
            pb, qb = idx["bes"][a]
            p_bes[a], q_bes[a] = x[pb], x[qb]
        else:
            p_bes[a], q_bes[a] = np.zeros(n), np.zeros(n)
        Pa, Qa = idx["agg"][a]
        P_agg[a], Q_agg[a] = x[Pa], x[Qa]
    state = _state_from(x, *idx["net"])
    return ScheduleResult(
        method="central", scenario=scenario, state=state, p_ev=p_ev, p_bes=p_bes, q_bes=q_bes,
        P_agg=P_agg, Q_agg=Q_agg, objective=objective_value(scenario, state, P_agg, loss_weight),
        loss_weight=loss_weight, converged=True, iterations=sol.iterations,
        info={"solver_objective": sol.objective},
    )
