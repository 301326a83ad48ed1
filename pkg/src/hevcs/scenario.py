"""Experiment inputs: EV fleets, EV+building netload, prices and fixed bus loads.

CSV formats (header row required, extra columns ignored):

* price:    ``step, usd_per_kwh``
* netload:  ``[evb,] step, p_uc_kw, q_uc_kvar`` (one block of rows per ``evb``)
* shape:    ``step, factor`` (fixed-load daily shape, scales bus peak loads)
* fleet:    ``ev_id, agg_id, arrival, departure, c0, c_target, capacity, eta, p_min, p_max``

Files with an integer multiple of the horizon length are averaged down in
consecutive groups; any other length is rejected.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .devices import AggregatorNode, BesUnit, EvbProfile, EvSession
from .grid import Bus, Line, RadialNetwork, build_network, ieee13_modified
from .results import Scenario


class ScenarioError(ValueError):
    pass


class ParseError(ScenarioError):
    pass


class WrongHorizon(ScenarioError):
    pass


class ConfigInvalid(ScenarioError):
    pass


def _clock(text: str) -> int:
    hh, mm = text.strip().split(":")
    return int(hh) * 60 + int(mm)


@dataclass
class ScenarioConfig:
    ev_per_agg: int = 20
    c0_range: tuple = (8.0, 10.0)
    target_range: tuple = (22.0, 25.0)
    arrival_window: tuple = ("16:30", "20:30")
    departure_window: tuple = ("06:00", "09:30")
    horizon: int = 48
    t_h: float = 0.5
    anchor: str = "12:00"
    capacity: float = 40.0
    eta: float = 1.0
    p_min: float = -4.0
    p_max: float = 4.0
    seed: int = 0
    agg_ids: tuple = field(default_factory=tuple)

    def validate(self):
        lo, hi = self.c0_range
        tlo, thi = self.target_range
        if not (0 <= lo <= hi and tlo <= thi and hi <= tlo and thi <= self.capacity):
            raise ConfigInvalid("energy ranges must be ordered: c0 <= target <= capacity")
        if self.ev_per_agg < 0 or self.horizon < 1 or self.t_h <= 0:
            raise ConfigInvalid("ev_per_agg, horizon and t_h must be positive")
        if not self.p_min <= 0 < self.p_max:
            raise ConfigInvalid("need p_min <= 0 < p_max")
        span = self.horizon * self.t_h * 60
        for name, (a, b) in (("arrival", self.arrival_window), ("departure", self.departure_window)):
            ra, rb = self.minutes_after_anchor(a), self.minutes_after_anchor(b)
            if not ra <= rb or rb > span:
                raise ConfigInvalid(f"{name} window {a}-{b} does not fit the horizon")

    def minutes_after_anchor(self, clock: str) -> int:
        return (_clock(clock) - _clock(self.anchor)) % 1440


def _window_sample(rng, lo, hi, size):
    # normal with mean at the window centre and 2 sigma at its edges, clipped
    mu, sigma = 0.5 * (lo + hi), (hi - lo) / 4.0
    return np.clip(rng.normal(mu, sigma, size), lo, hi)


def sample_fleet(config: ScenarioConfig, agg_ids, rng=None) -> list[EvSession]:
    """Seeded EV sessions for each aggregator, ``config.ev_per_agg`` apiece."""
    config.validate()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    step_min = config.t_h * 60
    a_lo, a_hi = (config.minutes_after_anchor(t) for t in config.arrival_window)
    d_lo, d_hi = (config.minutes_after_anchor(t) for t in config.departure_window)
    sessions = []
    for agg in agg_ids:
        for i in range(config.ev_per_agg):
            c0 = rng.uniform(*config.c0_range)
            target = rng.uniform(*config.target_range)
            for _ in range(100):
                arr_min = _window_sample(rng, a_lo, a_hi, 1)[0]
                dep_min = _window_sample(rng, d_lo, d_hi, 1)[0]
                # plugged from the first full step after arrival until the step containing departure
                arrival = int(np.ceil(arr_min / step_min - 1e-9))
                departure = min(int(np.floor(dep_min / step_min)), config.horizon)
                need = target - c0
                if arrival < departure and need <= config.eta * config.p_max * config.t_h * (departure - arrival):
                    break
            else:
                raise ConfigInvalid("could not sample a feasible session; widen the windows")
            sessions.append(EvSession(
                ev_id=f"{agg}-ev{i:02d}", agg_id=str(agg), arrival=arrival, departure=departure,
                c0=float(c0), c_target=float(target), capacity=config.capacity, eta=config.eta,
                p_min=config.p_min, p_max=config.p_max,
            ))
    return sessions


# ---------------------------------------------------------------------------
# CSV input

def _read_rows(path, required):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    for col in required:
        if col not in header:
            raise ParseError(f"{path}: missing column {col!r}")
    rows = []
    for k, row in enumerate(reader, 2):
        row = {key.strip(): (val or "").strip() for key, val in row.items() if key is not None}
        rows.append((k, row))
    return rows


def _float(path, lineno, row, col):
    try:
        return float(row[col])
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: column {col!r} is not a number: {row[col]!r}") from exc


def _resample(values: np.ndarray, horizon: int, path) -> np.ndarray:
    if values.shape[0] == horizon:
        return values
    if values.shape[0] % horizon:
        raise WrongHorizon(f"{path}: {values.shape[0]} rows cannot be averaged to {horizon} steps")
    k = values.shape[0] // horizon
    return values.reshape(horizon, k, *values.shape[1:]).mean(axis=1)


def load_price_csv(path, horizon: int = 48) -> np.ndarray:
    rows = _read_rows(path, ["step", "usd_per_kwh"])
    rows.sort(key=lambda kr: _float(path, kr[0], kr[1], "step"))
    vals = np.array([_float(path, k, r, "usd_per_kwh") for k, r in rows])
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"{path}: non-finite price")
    return _resample(vals, horizon, path)


def load_shape_csv(path, horizon: int = 48) -> np.ndarray:
    rows = _read_rows(path, ["step", "factor"])
    rows.sort(key=lambda kr: _float(path, kr[0], kr[1], "step"))
    return _resample(np.array([_float(path, k, r, "factor") for k, r in rows]), horizon, path)


def load_netload_csv(path, horizon: int = 48) -> list[EvbProfile]:
    rows = _read_rows(path, ["step", "p_uc_kw", "q_uc_kvar"])
    groups: dict[str, list] = {}
    for k, r in rows:
        groups.setdefault(r.get("evb", "0"), []).append(
            (_float(path, k, r, "step"), _float(path, k, r, "p_uc_kw"), _float(path, k, r, "q_uc_kvar")))
    profiles = []
    for key in groups:
        data = np.array(sorted(groups[key]))
        pq = _resample(data[:, 1:], horizon, path)
        profiles.append(EvbProfile(pq[:, 0].copy(), pq[:, 1].copy()))
    return profiles


FLEET_COLUMNS = ["ev_id", "agg_id", "arrival", "departure", "c0", "c_target", "capacity", "eta", "p_min", "p_max"]


def write_fleet_csv(sessions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLEET_COLUMNS)
        for s in sessions:
            w.writerow([s.ev_id, s.agg_id, s.arrival, s.departure]
                       + [repr(float(x)) for x in (s.c0, s.c_target, s.capacity, s.eta, s.p_min, s.p_max)])


def read_fleet_csv(path) -> list[EvSession]:
    rows = _read_rows(path, FLEET_COLUMNS)
    out = []
    for k, r in rows:
        try:
            out.append(EvSession(
                ev_id=r["ev_id"], agg_id=r["agg_id"], arrival=int(r["arrival"]),
                departure=int(r["departure"]),
                **{c: _float(path, k, r, c) for c in FLEET_COLUMNS[4:]},
            ))
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{path}:{k}: {exc}") from exc
    return out


def write_series_csv(path, columns, *series) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in zip(*series):
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Shipped data and scenario assembly

def data_path(name: str) -> Path:
    return Path(str(resources.files("hevcs").joinpath("data").joinpath(name)))


def assign_profiles(sessions, archetypes, rng) -> list[EvbProfile]:
    """One building profile per EV: a random archetype scaled by U[0.8, 1.2]."""
    out = []
    for _ in sessions:
        base = archetypes[int(rng.integers(len(archetypes)))]
        scale = rng.uniform(0.8, 1.2)
        out.append(EvbProfile(base.p_uc * scale, base.q_uc * scale))
    return out


def build_scenario(net: RadialNetwork, sessions, profiles, price, t_h: float, shape,
                   bes: BesUnit | None = None, name: str = "scenario") -> Scenario:
    """Group sessions by aggregator bus and attach fixed loads ``peak * shape``."""
    price = np.asarray(price, dtype=float)
    nodes = []
    for bus_id in net.agg_buses:
        idx = [k for k, s in enumerate(sessions) if s.agg_id == bus_id]
        nodes.append(AggregatorNode(
            agg_id=bus_id, bus_id=bus_id, bes=bes,
            sessions=[sessions[k] for k in idx], profiles=[profiles[k] for k in idx],
        ))
    known = set(net.agg_buses)
    stray = {s.agg_id for s in sessions} - known
    if stray:
        raise ConfigInvalid(f"sessions reference unknown aggregators {sorted(stray)}")
    shape = np.asarray(shape, dtype=float)
    fixed_p = np.array([b.p_load_kw for b in net.buses])[:, None] * shape[None, :]
    fixed_q = np.array([b.q_load_kvar for b in net.buses])[:, None] * shape[None, :]
    return Scenario(net=net, nodes=tuple(nodes), price=price, t_h=t_h,
                    fixed_p=fixed_p, fixed_q=fixed_q, name=name)


def ieee13_scenario(config: ScenarioConfig | None = None, bes: BesUnit | None = BesUnit(),
                    net: RadialNetwork | None = None, price=None, netload=None, shape=None) -> Scenario:
    """The shipped IEEE-13 case with a seeded fleet (20 EVs per aggregator by default)."""
    config = config or ScenarioConfig()
    net = net or ieee13_modified()
    n = config.horizon
    price = load_price_csv(data_path("price.csv"), n) if price is None else price
    archetypes = load_netload_csv(data_path("netload.csv"), n) if netload is None else netload
    shape = load_shape_csv(data_path("load_shape.csv"), n) if shape is None else shape
    rng = np.random.default_rng(config.seed)
    sessions = sample_fleet(config, net.agg_buses, rng)
    profiles = assign_profiles(sessions, archetypes, rng)
    return build_scenario(net, sessions, profiles, price, config.t_h, shape, bes,
                          name=f"ieee13-seed{config.seed}")


def desk_network() -> RadialNetwork:
    """Four-bus test feeder: root 0, junction 1 (fixed load), aggregators at 2 and 3."""
    buses = [
        Bus("0", is_root=True),
        Bus("1", p_load_kw=300.0, q_load_kvar=150.0),
        Bus("2", has_agg=True),
        Bus("3", has_agg=True),
    ]
    lines = [Line("0", "1", 0.02, 0.04), Line("1", "2", 0.03, 0.03), Line("1", "3", 0.04, 0.02)]
    return build_network(buses, lines, s_base=1000.0, v_base=4.16)


def desk_scenario(seed: int = 0, ev_per_agg: int = 3, bes: BesUnit | None = BesUnit(),
                  horizon: int = 48) -> Scenario:
    net = desk_network()
    config = ScenarioConfig(ev_per_agg=ev_per_agg, seed=seed, horizon=horizon)
    sc = ieee13_scenario(config, bes=bes, net=net)
    sc.name = f"desk-seed{seed}"
    return sc
