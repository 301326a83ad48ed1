"""Problem instance and schedule result containers shared by all solvers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .devices import AggregatorNode, aggregate_uncontrollable
from .grid import NetworkState, RadialNetwork, line_losses


@dataclass(eq=False)
class Scenario:
    """Everything a scheduling method needs: grid, aggregators, price [$/kWh],
    step length [h] and the fixed per-bus loads [kW, kVar] of shape (n_bus, N)."""

    net: RadialNetwork
    nodes: tuple
    price: np.ndarray
    t_h: float
    fixed_p: np.ndarray
    fixed_q: np.ndarray
    name: str = "scenario"

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.price = np.asarray(self.price, dtype=float)
        n = self.price.size
        for arr in (self.fixed_p, self.fixed_q):
            if arr.shape != (self.net.n_bus, n):
                raise ValueError(f"fixed loads must be ({self.net.n_bus}, {n})")
        for node in self.nodes:
            if node.bus_id not in self.net.bus_index:
                raise ValueError(f"aggregator {node.agg_id} sits on unknown bus {node.bus_id}")

    @property
    def horizon(self) -> int:
        return self.price.size

    def node(self, agg_id) -> AggregatorNode:
        for nd in self.nodes:
            if nd.agg_id == agg_id:
                return nd
        raise KeyError(agg_id)

    def uncontrollable(self, node: AggregatorNode) -> tuple[np.ndarray, np.ndarray]:
        return aggregate_uncontrollable(node, self.horizon)

    def without_bes(self) -> "Scenario":
        return replace(self, nodes=tuple(nd.without_bes() for nd in self.nodes),
                       name=self.name + "-nobes")


@dataclass
class TraceRecord:
    level: str          # "inner" or "outer"
    outer: int
    inner: int
    agg: str
    primal: float
    dual: float
    objective: float
    wall_time: float


@dataclass(eq=False)
class ScheduleResult:
    """Per-entity trajectories of one scheduling method plus its network state.

    ``P_agg`` / ``Q_agg`` are aggregator bus loads [kW, kVar]; ``state`` is in
    per-unit. ``objective`` is weighted loss [kWh] plus energy cost [$].
    """

    method: str
    scenario: Scenario = field(repr=False)
    state: NetworkState = field(repr=False)
    p_ev: dict
    p_bes: dict
    q_bes: dict
    P_agg: dict
    Q_agg: dict
    objective: float
    loss_weight: float = 1.0
    converged: bool = True
    iterations: int = 0
    trace: list = field(default_factory=list, repr=False)
    info: dict = field(default_factory=dict, repr=False)

    @property
    def bus_loads(self) -> tuple[np.ndarray, np.ndarray]:
        """Total load per bus [kW, kVar], fixed plus aggregator."""
        sc = self.scenario
        p = sc.fixed_p.copy()
        q = sc.fixed_q.copy()
        for node in sc.nodes:
            k = sc.net.index(node.bus_id)
            p[k] += self.P_agg[node.agg_id]
            q[k] += self.Q_agg[node.agg_id]
        return p, q


def objective_value(scenario: Scenario, state: NetworkState, P_agg: dict, loss_weight: float = 1.0) -> float:
    """Weighted line energy loss [kWh] plus aggregator energy cost [$]."""
    loss_kwh, _ = line_losses(scenario.net, state, scenario.t_h)
    cost = sum(float(scenario.price @ P_agg[nd.agg_id]) * scenario.t_h for nd in scenario.nodes)
    return loss_weight * float(loss_kwh.sum()) + cost
