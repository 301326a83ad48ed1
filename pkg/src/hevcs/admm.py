"""Two-level ADMM scheduler.

Outer level: consensus between the network operator, which owns the branch
flows, and each aggregator, which owns its bus load. Inner level: a sharing
problem between an aggregator and its EVs, where every EV only sees the price
and a broadcast correction signal.

All agent quantities are in kW; the network update works in per-unit
internally. Both loops run at least one iteration and stop once the primal and
dual residual norms drop below ``tol * sqrt(dimension)``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .devices import AggregatorNode, bus_injection, check_session, uncontrolled_charging
from .results import Scenario, ScheduleResult, TraceRecord, objective_value
from .subproblems import AggSubproblem, DsoSubproblem, solve_ev_subproblem


class DidNotConverge(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class AdmmConfig:
    rho_p: float = 0.1
    rho_q: float = 0.1
    rho_j: float = 1.0
    outer_tol: float = 1e-3
    inner_tol: float = 1e-3
    max_outer: int = 500
    max_inner: int = 500
    loss_weight: float = 1.0
    # objective units per dollar (100: cents); the penalties act on the scaled objective
    objective_scale: float = 100.0
    # keep the inner multipliers between outer iterations (warm start)
    reset_inner_duals: bool = False
    workers: int = 1
    trace_inner: bool = False
    ev_method: str = "active-set"

    def __post_init__(self):
        for name in ("rho_p", "rho_q", "rho_j", "outer_tol", "inner_tol", "objective_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ev_method not in ("active-set", "conic"):
            raise ValueError(f"unknown ev_method {self.ev_method!r}")
        if self.max_outer < 1 or self.max_inner < 1 or self.workers < 1:
            raise ValueError("iteration caps and workers must be at least 1")

    def penalty(self, rho: float) -> float:
        """Penalty weight against the objective in dollars."""
        return rho / self.objective_scale


@dataclass
class ResidualPair:
    primal: float
    dual: float
    primal_tol: float
    dual_tol: float

    @property
    def converged(self) -> bool:
        return self.primal <= self.primal_tol and self.dual <= self.dual_tol


def residuals(primal_vec, dual_vec, tol: float) -> ResidualPair:
    primal_vec = np.ravel(primal_vec)
    dual_vec = np.ravel(dual_vec)
    return ResidualPair(
        float(np.linalg.norm(primal_vec)), float(np.linalg.norm(dual_vec)),
        tol * np.sqrt(primal_vec.size), tol * np.sqrt(dual_vec.size),
    )


@dataclass
class InnerState:
    """Sharing-problem iterate of one aggregator."""

    p_ev: np.ndarray        # (n_ev, N)
    copy: np.ndarray        # aggregator copy of the mean EV power
    dual: np.ndarray        # scaled multiplier of mean == copy
    p_bes: np.ndarray
    q_bes: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.p_ev.mean(axis=0) if self.p_ev.shape[0] else np.zeros_like(self.copy)

    @property
    def broadcast(self) -> np.ndarray:
        return self.dual + self.mean - self.copy


@dataclass
class InnerReport:
    iterations: int
    converged: bool
    residual: ResidualPair
    records: list = field(default_factory=list)


@dataclass
class OuterState:
    P_agg: np.ndarray       # (n_agg, N) aggregator-side bus loads
    Q_agg: np.ndarray
    P_dso: np.ndarray       # network-side copies
    Q_dso: np.ndarray
    v: np.ndarray           # scaled multipliers
    u: np.ndarray
    net_state: object = None


class AggregatorAgent:
    """An aggregator together with its EVs, running the sharing ADMM."""

    def __init__(self, node: AggregatorNode, scenario: Scenario, config: AdmmConfig):
        self.node = node
        self.price = scenario.price
        self.t_h = scenario.t_h
        n = scenario.horizon
        for s in node.sessions:
            check_session(s, n, self.t_h)
        self.p_uc, self.q_uc = scenario.uncontrollable(node)
        self.config = config
        self.sub = AggSubproblem(node.bes, node.n_ev, n, self.t_h, config.penalty(config.rho_p),
                                 config.penalty(config.rho_q), config.penalty(config.rho_j))
        p0 = np.array([uncontrolled_charging(s, n, self.t_h) for s in node.sessions]).reshape(node.n_ev, n)
        mean = p0.mean(axis=0) if node.n_ev else np.zeros(n)
        self.state = InnerState(p0, mean.copy(), np.zeros(n), np.zeros(n), np.zeros(n))

    def bus_load(self) -> tuple[np.ndarray, np.ndarray]:
        st = self.state
        return bus_injection(self.node, st.p_ev, st.p_bes, st.q_bes)

    def inner_iterate(self, P_k, Q_k, v, u) -> ResidualPair:
        st = self.state
        cfg = self.config
        rho = cfg.penalty(cfg.rho_j)
        old_p, old_mean, old_copy = st.p_ev, st.mean, st.copy
        lam_bar = st.broadcast
        p_new = np.empty_like(old_p)
        for i, s in enumerate(self.node.sessions):
            p_new[i] = solve_ev_subproblem(s, self.price, old_p[i], rho, self.t_h,
                                           broadcast=lam_bar, method=cfg.ev_method)
        mean = p_new.mean(axis=0) if self.node.n_ev else np.zeros_like(old_mean)
        upd = self.sub.solve(self.price, self.p_uc, self.q_uc, P_k, Q_k, v, u, mean, st.dual)
        dual = st.dual + (mean - upd.copy)
        self.state = InnerState(p_new, upd.copy, dual, upd.p_bes, upd.q_bes)
        primal = mean - upd.copy
        dual_res = cfg.rho_j * ((p_new - old_p) - (mean - old_mean) + (upd.copy - old_copy))
        return residuals(primal, dual_res, cfg.inner_tol)

    def inner_loop(self, P_k, Q_k, v, u, outer: int = 0, clock=None) -> InnerReport:
        cfg = self.config
        if cfg.reset_inner_duals:
            self.state.dual = np.zeros_like(self.state.dual)
        records = []
        for it in range(1, cfg.max_inner + 1):
            res = self.inner_iterate(P_k, Q_k, v, u)
            done = res.converged or self.node.n_ev == 0
            if cfg.trace_inner or done or it == cfg.max_inner:
                records.append(TraceRecord("inner", outer, it, self.node.agg_id, res.primal, res.dual,
                                           float("nan"), clock() if clock else 0.0))
            if done:
                return InnerReport(it, True, res, records)
        return InnerReport(cfg.max_inner, False, res, records)


class HierarchicalAdmm:
    """Stateful driver; :func:`run` is the usual entry point."""

    def __init__(self, scenario: Scenario, config: AdmmConfig | None = None):
        self.scenario = scenario
        self.config = config or AdmmConfig()
        cfg = self.config
        self.agents = [AggregatorAgent(nd, scenario, cfg) for nd in scenario.nodes]
        self.dso = DsoSubproblem(scenario.net, [nd.bus_id for nd in scenario.nodes], scenario.horizon,
                                 scenario.t_h, scenario.fixed_p, scenario.fixed_q,
                                 cfg.penalty(cfg.rho_p), cfg.penalty(cfg.rho_q), cfg.loss_weight)
        P0 = np.array([a.bus_load()[0] for a in self.agents]).reshape(len(self.agents), scenario.horizon)
        Q0 = np.array([a.bus_load()[1] for a in self.agents]).reshape(len(self.agents), scenario.horizon)
        zeros = np.zeros_like(P0)
        self.state = OuterState(P0.copy(), Q0.copy(), P0.copy(), Q0.copy(), zeros, zeros.copy())
        self.trace: list[TraceRecord] = []
        self.inner_unconverged = 0
        self.inner_iterations = 0
        self._t0 = time.perf_counter()
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def _clock(self) -> float:
        return time.perf_counter() - self._t0

    def _run_agents(self, outer: int):
        st = self.state

        def work(k):
            return self.agents[k].inner_loop(st.P_dso[k], st.Q_dso[k], st.v[k], st.u[k], outer, self._clock)

        idx = range(len(self.agents))
        if self._pool is None:
            return [work(k) for k in idx]
        # results are gathered in aggregator order, so runs are reproducible
        return list(self._pool.map(work, idx))

    def outer_iterate(self, outer: int) -> ResidualPair:
        st = self.state
        reports = self._run_agents(outer)
        for rep in reports:
            self.trace.extend(rep.records)
            self.inner_iterations += rep.iterations
            self.inner_unconverged += not rep.converged
        loads = [a.bus_load() for a in self.agents]
        P_agg = np.array([l[0] for l in loads]).reshape(st.P_agg.shape)
        Q_agg = np.array([l[1] for l in loads]).reshape(st.Q_agg.shape)
        upd = self.dso.solve(P_agg, Q_agg, st.v, st.u)
        v = st.v + (P_agg - upd.P)
        u = st.u + (Q_agg - upd.Q)
        cfg = self.config
        res = residuals(
            np.concatenate([(P_agg - upd.P).ravel(), (Q_agg - upd.Q).ravel()]),
            np.concatenate([(cfg.rho_p * (upd.P - st.P_dso)).ravel(), (cfg.rho_q * (upd.Q - st.Q_dso)).ravel()]),
            cfg.outer_tol,
        )
        self.state = OuterState(P_agg, Q_agg, upd.P, upd.Q, v, u, upd.state)
        obj = objective_value(self.scenario, upd.state, self._agg_dict(P_agg), cfg.loss_weight)
        self.trace.append(TraceRecord("outer", outer, 0, "", res.primal, res.dual, obj, self._clock()))
        return res

    def _agg_dict(self, arr) -> dict:
        return {a.node.agg_id: arr[k] for k, a in enumerate(self.agents)}

    def result(self, converged: bool, iterations: int) -> ScheduleResult:
        st = self.state
        sc = self.scenario
        return ScheduleResult(
            method="admm", scenario=sc, state=st.net_state,
            p_ev={a.node.agg_id: a.state.p_ev.copy() for a in self.agents},
            p_bes={a.node.agg_id: a.state.p_bes.copy() for a in self.agents},
            q_bes={a.node.agg_id: a.state.q_bes.copy() for a in self.agents},
            P_agg=self._agg_dict(st.P_agg), Q_agg=self._agg_dict(st.Q_agg),
            objective=objective_value(sc, st.net_state, self._agg_dict(st.P_agg), self.config.loss_weight),
            loss_weight=self.config.loss_weight, converged=converged, iterations=iterations,
            trace=self.trace,
            info={"inner_iterations": self.inner_iterations, "inner_unconverged": self.inner_unconverged,
                  "P_dso": self._agg_dict(st.P_dso), "Q_dso": self._agg_dict(st.Q_dso),
                  "wall_time": self._clock()},
        )

    def run(self) -> ScheduleResult:
        converged = False
        k = 0
        try:
            for k in range(1, self.config.max_outer + 1):
                if self.outer_iterate(k).converged:
                    converged = True
                    break
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        return self.result(converged, k)


def run(scenario: Scenario, config: AdmmConfig | None = None, *, raise_on_fail: bool = False) -> ScheduleResult:
    """Schedule all EVs and storage units with the two-level ADMM.

    The returned network state is the operator's last update; ``objective`` is
    its weighted line loss plus the aggregators' energy cost. With
    ``raise_on_fail`` a :class:`DidNotConverge` carrying the partial result is
    raised when the outer iteration cap is hit.
    """
    result = HierarchicalAdmm(scenario, config).run()
    if raise_on_fail and not result.converged:
        raise DidNotConverge(f"no convergence after {result.iterations} outer iterations", result)
    return result
