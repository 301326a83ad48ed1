"""Small hand-built instances shared by several test modules."""

import numpy as np

from hevcs.devices import AggregatorNode, BesUnit, EvbProfile, EvSession
from hevcs.grid import Bus, Line, build_network
from hevcs.results import Scenario


def small_scenario(n=8, bes=True, n_ev=2, fixed_kw=200.0, price=None):
    """Three buses in a chain, aggregators at the middle and far bus."""
    net = build_network(
        [Bus("r", is_root=True), Bus("a", has_agg=True, p_load_kw=fixed_kw, q_load_kvar=fixed_kw / 2),
         Bus("b", has_agg=True)],
        [Line("r", "a", 0.02, 0.04), Line("a", "b", 0.03, 0.02)],
    )
    if price is None:
        price = 0.05 + 0.04 * np.sin(np.linspace(0, 2 * np.pi, n, endpoint=False))
    unit = BesUnit(c0=5, c_min=5, c_max=25, s_rating=20) if bes else None
    nodes = []
    for a, bus in enumerate(("a", "b")):
        sessions = [EvSession(f"{bus}{i}", bus, arrival=1 + i, departure=n - i, c0=8.0 + i,
                              c_target=12.0 + a) for i in range(n_ev)]
        profiles = [EvbProfile(np.full(n, 1.0 + 0.5 * i), np.full(n, 0.3)) for i in range(n_ev)]
        nodes.append(AggregatorNode(bus, bus, unit, sessions, profiles))
    shape = 0.6 + 0.4 * np.cos(np.linspace(0, 2 * np.pi, n, endpoint=False))
    fp = np.array([b.p_load_kw for b in net.buses])[:, None] * shape
    fq = np.array([b.q_load_kvar for b in net.buses])[:, None] * shape
    return Scenario(net, nodes, np.asarray(price, float), 0.5, fp, fq, name="small")
