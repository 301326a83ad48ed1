"""EV+building units, battery storage and aggregator bus injections.

Powers are in kW / kVar, energies in kWh, positive power means consumption.
Energy trajectories have ``N + 1`` entries: ``c[t]`` is the stored energy at
the start of step ``t`` and ``c[N]`` at the end of the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SessionError(ValueError):
    pass


@dataclass(frozen=True)
class EvSession:
    """One EV plug-in session. The EV can exchange power during steps
    ``arrival .. departure - 1`` and must hold ``c_target`` at ``departure``."""

    ev_id: str
    agg_id: str
    arrival: int
    departure: int
    c0: float
    c_target: float
    capacity: float = 40.0
    eta: float = 1.0
    p_min: float = -4.0
    p_max: float = 4.0

    def __post_init__(self):
        if not 0 <= self.c0 <= self.c_target <= self.capacity:
            raise SessionError(f"{self.ev_id}: need 0 <= c0 <= c_target <= capacity")
        if not 0 <= self.arrival < self.departure:
            raise SessionError(f"{self.ev_id}: arrival must precede departure")
        if not self.p_min <= 0 <= self.p_max:
            raise SessionError(f"{self.ev_id}: need p_min <= 0 <= p_max")
        if not 0 < self.eta <= 1:
            raise SessionError(f"{self.ev_id}: efficiency must lie in (0, 1]")

    @property
    def window(self) -> slice:
        return slice(self.arrival, self.departure)

    @property
    def n_window(self) -> int:
        return self.departure - self.arrival

    def is_reachable(self, t_h: float) -> bool:
        return self.c_target - self.c0 <= self.eta * self.p_max * t_h * self.n_window + 1e-9


def check_session(session: EvSession, horizon: int, t_h: float) -> None:
    if session.departure > horizon:
        raise SessionError(f"{session.ev_id}: departure step {session.departure} beyond horizon {horizon}")
    if not session.is_reachable(t_h):
        raise SessionError(f"{session.ev_id}: target energy unreachable at maximum charger power")


@dataclass(frozen=True)
class EvbProfile:
    p_uc: np.ndarray
    q_uc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_uc", np.asarray(self.p_uc, dtype=float))
        object.__setattr__(self, "q_uc", np.asarray(self.q_uc, dtype=float))
        if self.p_uc.shape != self.q_uc.shape:
            raise ValueError("p_uc and q_uc must have the same length")

    def __hash__(self):
        return id(self)


def evb_net_load(profile: EvbProfile, p_ev: np.ndarray) -> np.ndarray:
    """Net active demand of an EV+building unit."""
    return profile.p_uc + p_ev


@dataclass(frozen=True)
class BesUnit:
    c0: float = 5.0
    c_min: float = 5.0
    c_max: float = 55.0
    eta: float = 1.0
    s_rating: float = 50.0
    # end-of-horizon energy must be at least c0 ("cyclic") or is left free
    terminal: str = "cyclic"

    def __post_init__(self):
        if not 0 <= self.c_min <= self.c0 <= self.c_max:
            raise ValueError("need 0 <= c_min <= c0 <= c_max")
        if self.s_rating < 0:
            raise ValueError("s_rating must be non-negative")
        if self.terminal not in ("cyclic", "free"):
            raise ValueError("terminal must be 'cyclic' or 'free'")


@dataclass(frozen=True, eq=False)
class AggregatorNode:
    agg_id: str
    bus_id: str
    bes: BesUnit | None = None
    sessions: tuple = ()
    profiles: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.sessions) != len(self.profiles):
            raise ValueError(f"aggregator {self.agg_id}: sessions and profiles must align")

    @property
    def n_ev(self) -> int:
        return len(self.sessions)

    def without_bes(self) -> "AggregatorNode":
        return AggregatorNode(self.agg_id, self.bus_id, None, self.sessions, self.profiles)


@dataclass
class FeasibilityReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _simulate(p, c0, eta, t_h):
    p = np.asarray(p, dtype=float)
    c = np.empty(p.size + 1)
    c[0] = c0
    c[1:] = c0 + np.cumsum(t_h * eta * p)
    return c


def ev_power_bounds(session: EvSession, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.zeros(horizon)
    hi = np.zeros(horizon)
    lo[session.window] = session.p_min
    hi[session.window] = session.p_max
    return lo, hi


def ev_energy_bounds(session: EvSession, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Time-varying energy bounds over ``N + 1`` instants.

    Before arrival the energy is pinned at ``c0`` and after departure at
    ``c_target`` (no power exchange while unplugged); while plugged it may range
    over ``[0, capacity]``; at departure it must equal ``c_target``.
    """
    lo = np.empty(horizon + 1)
    hi = np.empty(horizon + 1)
    a, d = session.arrival, session.departure
    lo[:a] = hi[:a] = session.c0
    lo[a:d] = 0.0
    hi[a:d] = session.capacity
    lo[d:] = hi[d:] = session.c_target
    return lo, hi


def simulate_ev(p_ev, session: EvSession, t_h: float) -> np.ndarray:
    return _simulate(p_ev, session.c0, session.eta, t_h)


def ev_feasible(p_ev, session: EvSession, t_h: float, tol: float = 1e-6) -> FeasibilityReport:
    p = np.asarray(p_ev, dtype=float)
    n = p.size
    report = FeasibilityReport()
    outside = np.ones(n, dtype=bool)
    outside[session.window] = False
    if np.any(np.abs(p[outside]) > tol):
        report.violations.append("outside window")
    inside = p[session.window]
    if np.any(inside < session.p_min - tol) or np.any(inside > session.p_max + tol):
        report.violations.append("power bounds")
    c = simulate_ev(p, session, t_h)
    lo, hi = ev_energy_bounds(session, n)
    d = session.departure
    if abs(c[d] - session.c_target) > tol:
        report.violations.append("terminal energy")
    mid = slice(session.arrival, d)
    if np.any(c[mid] < lo[mid] - tol) or np.any(c[mid] > hi[mid] + tol):
        report.violations.append("energy bounds")
    return report


def simulate_bes(p_bes, bes: BesUnit, t_h: float) -> np.ndarray:
    return _simulate(p_bes, bes.c0, bes.eta, t_h)


def bes_feasible(p_bes, q_bes, bes: BesUnit, t_h: float, tol: float = 1e-6) -> FeasibilityReport:
    p = np.asarray(p_bes, dtype=float)
    q = np.asarray(q_bes, dtype=float)
    report = FeasibilityReport()
    if np.any(np.hypot(p, q) > bes.s_rating + tol):
        report.violations.append("apparent power")
    c = simulate_bes(p, bes, t_h)
    if np.any(c < bes.c_min - tol) or np.any(c > bes.c_max + tol):
        report.violations.append("energy bounds")
    if bes.terminal == "cyclic" and c[-1] < bes.c0 - tol:
        report.violations.append("terminal energy")
    return report


def aggregate_uncontrollable(node: AggregatorNode, horizon: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not node.profiles:
        if horizon is None:
            raise ValueError("horizon required for an aggregator without profiles")
        return np.zeros(horizon), np.zeros(horizon)
    p = np.sum([pr.p_uc for pr in node.profiles], axis=0)
    q = np.sum([pr.q_uc for pr in node.profiles], axis=0)
    return p, q


def bus_injection(node: AggregatorNode, p_evs, p_bes, q_bes) -> tuple[np.ndarray, np.ndarray]:
    """Aggregator bus load ``(P, Q)``: BES plus every EV+building unit."""
    p_bes = np.asarray(p_bes, dtype=float)
    q_bes = np.asarray(q_bes, dtype=float)
    p = p_bes.copy()
    q = q_bes.copy()
    p_evs = np.asarray(p_evs, dtype=float).reshape(node.n_ev, -1) if node.n_ev else ()
    for p_ev, prof in zip(p_evs, node.profiles):
        p += p_ev + prof.p_uc
        q += prof.q_uc
    return p, q


def uncontrolled_charging(session: EvSession, horizon: int, t_h: float) -> np.ndarray:
    """Charge at full rate from arrival until the target is met; the last
    charging step is shortened so the target is hit exactly."""
    p = np.zeros(horizon)
    need = session.c_target - session.c0
    per_step = session.eta * session.p_max * t_h
    for t in range(session.arrival, session.departure):
        if need <= 1e-12:
            break
        take = min(per_step, need)
        p[t] = take / (session.eta * t_h)
        need -= take
    return p
