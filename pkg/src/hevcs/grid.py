"""Radial distribution network model in squared-variable (branch flow) form.

All network quantities are per-unit on ``s_base`` / ``v_base``. Bus voltages and
line currents are stored squared (``V = |v|^2``, ``I = |i|^2``) and line flows
are sending-end values. Bus loads are positive for consumption.
"""

from __future__ import annotations

import shlex
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np


class NetworkError(ValueError):
    """Invalid network topology or data."""


class CycleDetected(NetworkError):
    pass


class Disconnected(NetworkError):
    pass


class MultipleRoots(NetworkError):
    pass


class NoRoot(NetworkError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: str
    is_root: bool = False
    v_min_sq: float = 0.97**2
    v_max_sq: float = 1.03**2
    v_ref_sq: float = 1.0
    has_agg: bool = False
    # peak fixed load [kW, kVar], scaled by the scenario's load shape
    p_load_kw: float = 0.0
    q_load_kvar: float = 0.0

    def __post_init__(self):
        if not self.v_min_sq < self.v_max_sq:
            raise NetworkError(f"bus {self.id}: v_min_sq must be below v_max_sq")


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus}: negative impedance")


@dataclass(frozen=True, eq=False)
class RadialNetwork:
    """A validated radial network. Build with :func:`build_network`.

    Lines are stored directed away from the root. ``parent_line[b]`` is the index
    of the line feeding bus ``b`` (-1 for the root) and ``child_lines[b]`` lists
    the lines leaving it.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    s_base: float = 1000.0
    v_base: float = 4.16
    bus_index: dict = field(default_factory=dict, repr=False)
    root: int = 0
    line_from: np.ndarray = field(default=None, repr=False)
    line_to: np.ndarray = field(default=None, repr=False)
    parent_line: np.ndarray = field(default=None, repr=False)
    child_lines: tuple = field(default=(), repr=False)
    order: tuple = field(default=(), repr=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines])

    @property
    def x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines])

    @property
    def agg_buses(self) -> list[str]:
        return [b.id for b in self.buses if b.has_agg]

    @property
    def root_lines(self) -> list[int]:
        return list(self.child_lines[self.root])

    def index(self, bus_id) -> int:
        return self.bus_index[str(bus_id)]

    def line_index(self, from_bus, to_bus) -> int:
        f, t = self.index(from_bus), self.index(to_bus)
        for k in range(self.n_line):
            if self.line_from[k] == f and self.line_to[k] == t:
                return k
        raise KeyError((from_bus, to_bus))

    def v_bounds_sq(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.v_min_sq for b in self.buses]),
                np.array([b.v_max_sq for b in self.buses]))


def build_network(buses, lines, s_base: float = 1000.0, v_base: float = 4.16) -> RadialNetwork:
    """Validate a bus/line set as a tree and orient every line away from the root."""
    buses = tuple(buses)
    lines = tuple(lines)
    index = {}
    for k, b in enumerate(buses):
        if b.id in index:
            raise NetworkError(f"duplicate bus id {b.id!r}")
        index[b.id] = k
    roots = [k for k, b in enumerate(buses) if b.is_root]
    if not roots:
        raise NoRoot("no bus is flagged as root")
    if len(roots) > 1:
        raise MultipleRoots(f"{len(roots)} buses flagged as root")
    for ln in lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in index:
                raise NetworkError(f"line endpoint {end!r} is not a bus")
        if ln.from_bus == ln.to_bus:
            raise CycleDetected(f"self-loop at bus {ln.from_bus!r}")
    if len(lines) > len(buses) - 1:
        raise CycleDetected(f"{len(lines)} lines for {len(buses)} buses")

    adj = [[] for _ in buses]
    for k, ln in enumerate(lines):
        adj[index[ln.from_bus]].append((index[ln.to_bus], k))
        adj[index[ln.to_bus]].append((index[ln.from_bus], k))

    root = roots[0]
    parent_line = np.full(len(buses), -1, dtype=int)
    seen = {root}
    order = [root]
    oriented = [None] * len(lines)
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j, k in adj[i]:
            if oriented[k] is not None:
                continue
            if j in seen:
                raise CycleDetected(f"cycle through bus {buses[j].id!r}")
            ln = lines[k]
            oriented[k] = Line(buses[i].id, buses[j].id, ln.r, ln.x)
            parent_line[j] = k
            seen.add(j)
            order.append(j)
            queue.append(j)
    if len(seen) != len(buses):
        missing = sorted(b.id for k, b in enumerate(buses) if k not in seen)
        raise Disconnected(f"buses unreachable from root: {missing}")

    line_from = np.array([index[ln.from_bus] for ln in oriented], dtype=int)
    line_to = np.array([index[ln.to_bus] for ln in oriented], dtype=int)
    child_lines = tuple(tuple(int(k) for k in np.flatnonzero(line_from == b)) for b in range(len(buses)))
    return RadialNetwork(
        buses=buses, lines=tuple(oriented), s_base=float(s_base), v_base=float(v_base),
        bus_index=index, root=root, line_from=line_from, line_to=line_to,
        parent_line=parent_line, child_lines=child_lines, order=tuple(order),
    )


@dataclass
class NetworkState:
    """Squared voltages ``V`` (n_bus, N), squared currents ``I`` and sending-end
    flows ``P``, ``Q`` (n_line, N). Per-unit."""

    V: np.ndarray
    I: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    @property
    def horizon(self) -> int:
        return self.V.shape[1]

    @classmethod
    def flat(cls, net: RadialNetwork, horizon: int) -> "NetworkState":
        v_ref = net.buses[net.root].v_ref_sq
        z = np.zeros((net.n_line, horizon))
        return cls(np.full((net.n_bus, horizon), v_ref), z.copy(), z.copy(), z.copy())


def _check_state(net: RadialNetwork, state: NetworkState):
    n = state.V.shape[1] if state.V.ndim == 2 else -1
    shapes = {"V": (net.n_bus, n), "I": (net.n_line, n), "P": (net.n_line, n), "Q": (net.n_line, n)}
    for name, shape in shapes.items():
        if getattr(state, name).shape != shape:
            raise DimensionMismatch(f"{name} has shape {getattr(state, name).shape}, expected {shape}")


class DistFlowResidual(NamedTuple):
    """Absolute residuals per line and timestep, each (n_line, N)."""

    active: np.ndarray
    reactive: np.ndarray
    voltage: np.ndarray
    current: np.ndarray

    def max_per_step(self) -> dict[str, np.ndarray]:
        return {k: v.max(axis=0) if v.size else np.zeros(0) for k, v in self._asdict().items()}


def _children_sum(net: RadialNetwork, flow: np.ndarray) -> np.ndarray:
    # total flow on lines leaving the receiving bus of each line
    out = np.zeros((net.n_bus, flow.shape[1]))
    np.add.at(out, net.line_from, flow)
    return out[net.line_to]


def distflow_residual(net: RadialNetwork, state: NetworkState, p_load: np.ndarray,
                      q_load: np.ndarray) -> DistFlowResidual:
    """Residuals of the branch-flow equations for per-bus loads (p.u., (n_bus, N)).

    The ``current`` entry is ``|V_i I_ij - P_ij^2 - Q_ij^2|``; under the conic
    relaxation use :func:`socp_gap` instead.
    """
    _check_state(net, state)
    if p_load.shape != state.V.shape or q_load.shape != state.V.shape:
        raise DimensionMismatch("load arrays must be (n_bus, N)")
    r = net.r[:, None]
    x = net.x[:, None]
    f, t = net.line_from, net.line_to
    active = p_load[t] - (state.P - r * state.I - _children_sum(net, state.P))
    reactive = q_load[t] - (state.Q - x * state.I - _children_sum(net, state.Q))
    voltage = (state.V[f] - state.V[t]) - (2 * (r * state.P + x * state.Q) - (r**2 + x**2) * state.I)
    current = state.V[f] * state.I - (state.P**2 + state.Q**2)
    return DistFlowResidual(np.abs(active), np.abs(reactive), np.abs(voltage), np.abs(current))


def socp_gap(net: RadialNetwork, state: NetworkState) -> np.ndarray:
    """``V_i I_ij - (P_ij^2 + Q_ij^2)`` per line and step; >= 0 under the relaxation,
    zero where it is tight."""
    _check_state(net, state)
    return state.V[net.line_from] * state.I - (state.P**2 + state.Q**2)


def line_losses(net: RadialNetwork, state: NetworkState, t_h: float) -> tuple[np.ndarray, np.ndarray]:
    """Active [kWh] and reactive [kVarh] energy losses per line over the horizon."""
    _check_state(net, state)
    energy = state.I.sum(axis=1) * t_h * net.s_base
    return net.r * energy, net.x * energy


def voltage_magnitudes(state: NetworkState) -> np.ndarray:
    return np.sqrt(np.maximum(state.V, 0.0))


# ---------------------------------------------------------------------------
# Grid file format
#
#   base <s_base_kva> <v_base_kv>
#   bus <id> [root] [agg] [vmin=..] [vmax=..] [vref=..] [p_kw=..] [q_kvar=..]
#   line <from> <to> r=<pu> x=<pu>
#
# Voltage keys are magnitudes in p.u.; they are squared on load.

def parse_grid(text: str) -> RadialNetwork:
    s_base, v_base = 1000.0, 4.16
    buses, lines = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        raw = raw.split("#", 1)[0].strip()
        if not raw:
            continue
        tokens = shlex.split(raw)
        kind, args = tokens[0], tokens[1:]
        flags = {a for a in args if "=" not in a}
        kv = dict(a.split("=", 1) for a in args if "=" in a)
        try:
            if kind == "base":
                s_base, v_base = float(args[0]), float(args[1])
            elif kind == "bus":
                bus_id = args[0]
                flags.discard(bus_id)
                buses.append(Bus(
                    id=bus_id,
                    is_root="root" in flags,
                    v_min_sq=float(kv.get("vmin", 0.97)) ** 2,
                    v_max_sq=float(kv.get("vmax", 1.03)) ** 2,
                    v_ref_sq=float(kv.get("vref", 1.0)) ** 2,
                    has_agg="agg" in flags,
                    p_load_kw=float(kv.get("p_kw", 0.0)),
                    q_load_kvar=float(kv.get("q_kvar", 0.0)),
                ))
            elif kind == "line":
                lines.append(Line(args[0], args[1], float(kv["r"]), float(kv["x"])))
            else:
                raise NetworkError(f"unknown record {kind!r}")
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"grid file line {lineno}: cannot parse {raw!r}") from exc
    return build_network(buses, lines, s_base, v_base)


def read_grid(path) -> RadialNetwork:
    return parse_grid(Path(path).read_text())


def format_grid(net: RadialNetwork) -> str:
    out = [f"base {net.s_base!r} {net.v_base!r}"]
    for b in net.buses:
        parts = ["bus", b.id]
        if b.is_root:
            parts.append("root")
        if b.has_agg:
            parts.append("agg")
        parts += [f"vmin={float(np.sqrt(b.v_min_sq))!r}", f"vmax={float(np.sqrt(b.v_max_sq))!r}",
                  f"vref={float(np.sqrt(b.v_ref_sq))!r}"]
        if b.p_load_kw or b.q_load_kvar:
            parts += [f"p_kw={b.p_load_kw!r}", f"q_kvar={b.q_load_kvar!r}"]
        out.append(" ".join(parts))
    for ln in net.lines:
        out.append(f"line {ln.from_bus} {ln.to_bus} r={ln.r!r} x={ln.x!r}")
    return "\n".join(out) + "\n"


def ieee13_modified() -> RadialNetwork:
    """Single-phase equivalent of the IEEE 13-bus feeder with aggregators at
    buses 634, 646, 675, 680, 652 and 611 (see ``data/ieee13.grid``)."""
    text = resources.files("hevcs").joinpath("data/ieee13.grid").read_text()
    return parse_grid(text)
