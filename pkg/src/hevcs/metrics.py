"""Evaluation metrics and the on-disk report format.

Every float is written with ``repr`` so the CSVs parse back to the exact
in-memory values, and nothing time-dependent is written unless asked for, so
reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import line_losses
from .results import ScheduleResult

REPORT_FILES = ("losses.csv", "costs.csv", "voltages.csv", "feeder.csv", "trace.csv", "summary.txt")


def charging_cost(result: ScheduleResult, price=None) -> tuple[dict, float]:
    """Energy cost [$] of each aggregator's bus load and the total."""
    sc = result.scenario
    price = sc.price if price is None else np.asarray(price, dtype=float)
    per = {a: float(price @ P) * sc.t_h for a, P in result.P_agg.items()}
    return per, float(sum(per.values()))


def loss_table(results) -> dict:
    """Per-line energy losses ``{method: (kWh array, kVarh array)}``; lines in
    network order, so column ``k`` is line ``k + 1`` of the loss table."""
    if isinstance(results, ScheduleResult):
        results = [results]
    out = {}
    for r in results:
        kwh, kvarh = line_losses(r.scenario.net, r.state, r.scenario.t_h)
        out[r.method] = (kwh, kvarh)
    return out


def feeder_apparent_power(result: ScheduleResult) -> np.ndarray:
    """Total apparent power [kVA] through the root line(s) at every step."""
    net = result.scenario.net
    roots = net.root_lines
    if not roots:
        return np.zeros(result.scenario.horizon)
    P = result.state.P[roots].sum(axis=0)
    Q = result.state.Q[roots].sum(axis=0)
    return np.hypot(P, Q) * net.s_base


def feeder_peak(result: ScheduleResult) -> float:
    s = feeder_apparent_power(result)
    return float(s.max()) if s.size else 0.0


@dataclass
class VoltageReport:
    v_min: np.ndarray          # per bus, p.u.
    v_max: np.ndarray
    violations: list           # (bus id, step, magnitude)

    @property
    def ok(self) -> bool:
        return not self.violations


def voltage_report(result: ScheduleResult, tol: float = 1e-7) -> VoltageReport:
    net = result.scenario.net
    mag = np.sqrt(np.maximum(result.state.V, 0.0))
    lo, hi = (np.sqrt(b) for b in net.v_bounds_sq())
    viol = []
    for b, t in zip(*np.nonzero((mag < lo[:, None] - tol) | (mag > hi[:, None] + tol))):
        viol.append((net.buses[b].id, int(t), float(mag[b, t])))
    return VoltageReport(mag.min(axis=1), mag.max(axis=1), viol)


def energy_balance(result: ScheduleResult) -> dict:
    """Energy [kWh] drawn at the feeder head against where it went.

    On an exact power flow ``feeder == loads + losses`` holds up to the
    power-flow tolerance; ``ev`` is grid-side EV energy.
    """
    sc = result.scenario
    t_h = sc.t_h
    ev = sum(float(p.sum()) for p in result.p_ev.values()) * t_h
    bes = sum(float(p.sum()) for p in result.p_bes.values()) * t_h
    unc = sum(float(sc.uncontrollable(nd)[0].sum()) for nd in sc.nodes) * t_h
    fixed = float(sc.fixed_p.sum()) * t_h
    loss = float(line_losses(sc.net, result.state, t_h)[0].sum())
    roots = sc.net.root_lines
    feeder = float(result.state.P[roots].sum()) * sc.net.s_base * t_h
    served = ev + bes + unc + fixed + loss
    return {"ev": ev, "bes": bes, "uncontrollable": unc, "fixed": fixed, "losses": loss,
            "feeder": feeder, "mismatch": feeder - served}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def emit(results, out_dir, *, timing: bool = False) -> list[Path]:
    """Write the report files for one or more results into ``out_dir``."""
    if isinstance(results, ScheduleResult):
        results = [results]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = results[0].scenario.net

    rows = []
    for method, (kwh, kvarh) in loss_table(results).items():
        rows.append([method, "kWh", *kwh, float(kwh.sum())])
        rows.append([method, "kVarh", *kvarh, float(kvarh.sum())])
    line_cols = [f"{net.buses[net.line_from[k]].id}-{net.buses[net.line_to[k]].id}" for k in range(net.n_line)]
    _write_csv(out / "losses.csv", ["method", "unit", *line_cols, "total"], rows)

    rows = []
    for r in results:
        per, total = charging_cost(r)
        rows += [[r.method, a, c] for a, c in per.items()]
        rows.append([r.method, "total", total])
    _write_csv(out / "costs.csv", ["method", "aggregator", "usd"], rows)

    rows = []
    for r in results:
        mag = np.sqrt(np.maximum(r.state.V, 0.0))
        for b, bus in enumerate(net.buses):
            rows += [[r.method, bus.id, t, mag[b, t]] for t in range(mag.shape[1])]
    _write_csv(out / "voltages.csv", ["method", "bus", "step", "v_pu"], rows)

    rows = []
    for r in results:
        s = feeder_apparent_power(r)
        roots = net.root_lines
        P = r.state.P[roots].sum(axis=0) * net.s_base
        Q = r.state.Q[roots].sum(axis=0) * net.s_base
        rows += [[r.method, t, P[t], Q[t], s[t]] for t in range(s.size)]
    _write_csv(out / "feeder.csv", ["method", "step", "p_kw", "q_kvar", "s_kva"], rows)

    header = ["method", "level", "outer", "inner", "aggregator", "primal", "dual", "objective"]
    if timing:
        header.append("wall_time_s")
    rows = []
    for r in results:
        for rec in r.trace:
            row = [r.method, rec.level, rec.outer, rec.inner, rec.agg, rec.primal, rec.dual, rec.objective]
            if timing:
                row.append(rec.wall_time)
            rows.append(row)
    _write_csv(out / "trace.csv", header, rows)

    (out / "summary.txt").write_text(summary_text(results, timing=timing))
    return [out / name for name in REPORT_FILES]


def summary_text(results, *, timing: bool = False) -> str:
    lines = []
    sc = results[0].scenario
    lines.append(f"scenario: {sc.name}")
    lines.append(f"buses: {sc.net.n_bus}  lines: {sc.net.n_line}  aggregators: {len(sc.nodes)}  "
                 f"evs: {sum(nd.n_ev for nd in sc.nodes)}  steps: {sc.horizon}")
    for r in results:
        kwh, kvarh = line_losses(sc.net, r.state, sc.t_h)
        _, cost = charging_cost(r)
        vr = voltage_report(r)
        lines.append("")
        lines.append(f"[{r.method}]")
        lines.append(f"converged: {'yes' if r.converged else 'no'}")
        lines.append(f"iterations: {r.iterations}")
        if "inner_iterations" in r.info:
            lines.append(f"inner iterations: {r.info['inner_iterations']} "
                         f"(unconverged loops: {r.info['inner_unconverged']})")
        lines.append(f"objective: {r.objective:.6f}")
        lines.append(f"losses: {kwh.sum():.4f} kWh  {kvarh.sum():.4f} kVarh")
        lines.append(f"cost: {cost:.4f} $")
        lines.append(f"feeder peak: {feeder_peak(r):.3f} kVA")
        lines.append(f"voltage range: {vr.v_min.min():.5f} .. {vr.v_max.max():.5f} p.u.")
        lines.append(f"voltage violations: {len(vr.violations)}")
        if timing and "wall_time" in r.info:
            lines.append(f"wall time: {r.info['wall_time']:.2f} s")
    return "\n".join(lines) + "\n"
