"""Experiment configuration file (TOML).

Every key is optional; omitted keys take the default simulation parameters.
Relative paths are resolved against the directory of the config file. The
grid and data entries also accept ``"builtin"`` (the shipped IEEE-13 case and
synthetic curves) or, for the grid, ``"desk"`` (the four-bus test feeder).

    [grid]
    file = "builtin"
    v_min = 0.97            # overrides every non-root bus limit when set
    v_max = 1.03

    [scenario]
    seed = 0
    ev_per_agg = 20
    horizon = 48
    step_hours = 0.5
    anchor = "12:00"        # wall-clock time of step 0
    c0_range = [8.0, 10.0]
    target_range = [22.0, 25.0]
    arrival_window = ["16:30", "20:30"]
    departure_window = ["06:00", "09:30"]

    [ev]
    capacity_kwh = 40.0
    efficiency = 1.0
    p_min_kw = -4.0
    p_max_kw = 4.0

    [bes]
    enabled = true
    c0_kwh = 5.0
    c_min_kwh = 5.0
    c_max_kwh = 55.0
    efficiency = 1.0
    rating_kva = 50.0
    terminal = "cyclic"     # or "free"

    [data]
    price = "builtin"
    netload = "builtin"
    load_shape = "builtin"
    fleet = ""              # optional fleet CSV, replaces sampling

    [admm]
    rho_p = 0.1
    rho_q = 0.1
    rho_j = 1.0
    th1 = 1e-3
    th2 = 1e-3
    max_outer = 500
    max_inner = 500
    loss_weight = 1.0
    objective_scale = 100.0
    reset_inner_duals = false
    workers = 1
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .admm import AdmmConfig
from .devices import BesUnit
from .grid import RadialNetwork, build_network, ieee13_modified, read_grid
from .results import Scenario
from .scenario import (
    ConfigInvalid,
    ScenarioConfig,
    assign_profiles,
    build_scenario,
    data_path,
    desk_network,
    load_netload_csv,
    load_price_csv,
    load_shape_csv,
    read_fleet_csv,
    sample_fleet,
)

_SCHEMA = {
    "grid": {"file": str, "v_min": float, "v_max": float},
    "scenario": {"seed": int, "ev_per_agg": int, "horizon": int, "step_hours": float, "anchor": str,
                 "c0_range": list, "target_range": list, "arrival_window": list, "departure_window": list},
    "ev": {"capacity_kwh": float, "efficiency": float, "p_min_kw": float, "p_max_kw": float},
    "bes": {"enabled": bool, "c0_kwh": float, "c_min_kwh": float, "c_max_kwh": float,
            "efficiency": float, "rating_kva": float, "terminal": str},
    "data": {"price": str, "netload": str, "load_shape": str, "fleet": str},
    "admm": {"rho_p": float, "rho_q": float, "rho_j": float, "th1": float, "th2": float,
             "max_outer": int, "max_inner": int, "loss_weight": float, "objective_scale": float,
             "reset_inner_duals": bool, "workers": int},
}


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    def get(self, section, key, default):
        return self.raw.get(section, {}).get(key, default)

    def _path(self, section, key, default="builtin"):
        val = self.get(section, key, default)
        if val in ("", None):
            return None
        if val == "builtin":
            return "builtin"
        p = Path(val)
        return p if p.is_absolute() else self.base_dir / p

    def network(self) -> RadialNetwork:
        name = self.get("grid", "file", "builtin")
        if name == "builtin":
            net = ieee13_modified()
        elif name == "desk":
            net = desk_network()
        else:
            net = read_grid(self._path("grid", "file"))
        v_min, v_max = self.get("grid", "v_min", None), self.get("grid", "v_max", None)
        if v_min is None and v_max is None:
            return net
        buses = [b if b.is_root else replace(
            b, v_min_sq=(v_min**2 if v_min is not None else b.v_min_sq),
            v_max_sq=(v_max**2 if v_max is not None else b.v_max_sq)) for b in net.buses]
        return build_network(buses, net.lines, net.s_base, net.v_base)

    def scenario_config(self, seed: int | None = None) -> ScenarioConfig:
        g = lambda k, d: self.get("scenario", k, d)  # noqa: E731
        e = lambda k, d: self.get("ev", k, d)  # noqa: E731
        d = ScenarioConfig()
        return ScenarioConfig(
            ev_per_agg=g("ev_per_agg", d.ev_per_agg), c0_range=tuple(g("c0_range", d.c0_range)),
            target_range=tuple(g("target_range", d.target_range)),
            arrival_window=tuple(g("arrival_window", d.arrival_window)),
            departure_window=tuple(g("departure_window", d.departure_window)),
            horizon=g("horizon", d.horizon), t_h=float(g("step_hours", d.t_h)), anchor=g("anchor", d.anchor),
            capacity=float(e("capacity_kwh", d.capacity)), eta=float(e("efficiency", d.eta)),
            p_min=float(e("p_min_kw", d.p_min)), p_max=float(e("p_max_kw", d.p_max)),
            seed=g("seed", d.seed) if seed is None else seed,
        )

    def bes(self) -> BesUnit | None:
        b = lambda k, d: self.get("bes", k, d)  # noqa: E731
        if not b("enabled", True):
            return None
        d = BesUnit()
        try:
            return BesUnit(c0=float(b("c0_kwh", d.c0)), c_min=float(b("c_min_kwh", d.c_min)),
                           c_max=float(b("c_max_kwh", d.c_max)), eta=float(b("efficiency", d.eta)),
                           s_rating=float(b("rating_kva", d.s_rating)), terminal=b("terminal", d.terminal))
        except ValueError as exc:
            raise ConfigInvalid(f"[bes] {exc}") from exc

    def admm(self, workers: int | None = None) -> AdmmConfig:
        a = lambda k, d: self.get("admm", k, d)  # noqa: E731
        d = AdmmConfig()
        try:
            return AdmmConfig(
                rho_p=float(a("rho_p", d.rho_p)), rho_q=float(a("rho_q", d.rho_q)), rho_j=float(a("rho_j", d.rho_j)),
                outer_tol=float(a("th1", d.outer_tol)), inner_tol=float(a("th2", d.inner_tol)),
                max_outer=a("max_outer", d.max_outer), max_inner=a("max_inner", d.max_inner),
                loss_weight=float(a("loss_weight", d.loss_weight)),
                objective_scale=float(a("objective_scale", d.objective_scale)),
                reset_inner_duals=a("reset_inner_duals", d.reset_inner_duals),
                workers=a("workers", d.workers) if workers is None else workers,
            )
        except ValueError as exc:
            raise ConfigInvalid(f"[admm] {exc}") from exc

    def scenario(self, seed: int | None = None) -> Scenario:
        net = self.network()
        cfg = self.scenario_config(seed)
        cfg.validate()
        n = cfg.horizon

        def series(key, loader, default_name):
            p = self._path("data", key)
            return loader(data_path(default_name) if p == "builtin" else p, n)

        price = series("price", load_price_csv, "price.csv")
        archetypes = series("netload", load_netload_csv, "netload.csv")
        shape = series("load_shape", load_shape_csv, "load_shape.csv")
        rng = np.random.default_rng(cfg.seed)
        fleet = self._path("data", "fleet", "")
        if fleet is None:
            sessions = sample_fleet(cfg, net.agg_buses, rng)
        else:
            sessions = read_fleet_csv(fleet)
        profiles = assign_profiles(sessions, archetypes, rng)
        return build_scenario(net, sessions, profiles, price, cfg.t_h, shape, self.bes(),
                              name=f"{self.grid_name}-seed{cfg.seed}")

    @property
    def grid_name(self) -> str:
        name = self.get("grid", "file", "builtin")
        return {"builtin": "ieee13", "desk": "desk"}.get(name, Path(name).stem)


def _check_schema(raw: dict):
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigInvalid(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigInvalid(f"[{section}] must be a table")
        for key, val in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigInvalid(f"unknown key {key!r} in [{section}]")
            want = _SCHEMA[section][key]
            ok = isinstance(val, want) and not (want is int and isinstance(val, bool))
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                ok = True
            if not ok:
                raise ConfigInvalid(f"[{section}] {key} must be {want.__name__}")


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config is not valid TOML: {exc}") from exc
    _check_schema(raw)
    return ExperimentConfig(raw, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)
