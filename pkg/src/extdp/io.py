"""Run artifacts: ``summary.json`` and the CSV tables.

CSV layouts (header row first, floats in shortest round-trip form):

* ``value_table.csv``: ``stage,x,value`` or ``stage,x,z,value``
* ``policy.csv``: ``stage,x_index,x,u_index,u`` for state feedbacks, and
  ``stage,x_index,z_index,x,z,u_index,u,v_index_0..v_index_{n-1}`` for
  extended feedbacks (``-1`` marks cells without an action)
* ``trajectories.csv``: ``scenario,t,x,u,w`` or ``scenario,t,x,u,w,z,v``;
  the row at ``t = T`` holds the terminal state with empty controls

Policies are reloaded from the integer index columns and values read back to
the same doubles, so a round trip is exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from extdp.classic import StatePolicy
from extdp.config import RunConfig, config_from_dict
from extdp.core import ConfigInvalid, ExtdpError
from extdp.extended import ExtendedPolicy

SCHEMA = "extdp-summary"
SCHEMA_VERSION = 1
TOP_FIELDS = {"schema", "version", "command", "kind", "config", "results"}
RESULT_FIELDS = {
    "solve-classic": {"lambda", "bellman_value", "dual_value", "x0", "t0", "constraint", "probability",
                      "simulation"},
    "solve-extended": {"bellman_value", "x0", "z0", "t0", "max_martingale_residual", "eps_mart",
                       "inner_audit", "constraint", "probability", "simulation"},
    "solve-dual": {"lambda_star", "bellman_value", "x0", "t0", "constraint", "probability", "converged",
                   "history", "certificate", "simulation"},
    "simulate": {"policy_kind", "source", "bellman_value", "simulation"},
    "audit": {"verdict"},
}
SIMULATION_FIELDS = {"n", "seed", "t0", "x0", "z0", "mean_cost", "cost_stderr", "constraint_estimate",
                     "probability", "mean_zT", "z_stdev", "v_means", "max_v_residual"}


def fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)  # shortest string that reads back to the same double


def clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_summary(out: Path, command: str, kind: str, config: RunConfig, results: dict) -> dict:
    unknown = set(results) - RESULT_FIELDS[command]
    if unknown:
        raise ValueError(f"unexpected result fields {sorted(unknown)}")
    doc = {"schema": SCHEMA, "version": SCHEMA_VERSION, "command": command, "kind": kind,
           "config": config.to_dict(), "results": clean(results)}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def read_summary(path: Path) -> tuple[dict, RunConfig]:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    with open(path) as fh:
        doc = json.load(fh)
    problems = []
    if doc.get("schema") != SCHEMA:
        problems.append("not a run summary")
    if doc.get("version") != SCHEMA_VERSION:
        problems.append(f"unsupported summary version {doc.get('version')!r}")
    unknown = set(doc) - TOP_FIELDS
    if unknown:
        problems.append(f"unknown summary fields {sorted(unknown)}")
    cmd = doc.get("command")
    if cmd not in RESULT_FIELDS:
        problems.append(f"unknown command {cmd!r}")
    else:
        extra = set(doc.get("results", {})) - RESULT_FIELDS[cmd]
        if extra:
            problems.append(f"unknown result fields {sorted(extra)}")
        sim = doc.get("results", {}).get("simulation")
        if isinstance(sim, dict) and set(sim) - SIMULATION_FIELDS:
            problems.append(f"unknown simulation fields {sorted(set(sim) - SIMULATION_FIELDS)}")
    if problems:
        raise ConfigInvalid(problems)
    return doc, config_from_dict(doc["config"])


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_value_table(path: Path, values: np.ndarray, t0: int, x_grid, z_grid=None) -> None:
    rows = []
    xs = [fmt(x) for x in x_grid.points]
    if z_grid is None:
        for k, row in enumerate(values):
            rows.extend((t0 + k, xs[i], fmt(v)) for i, v in enumerate(row))
        _write_rows(path, ["stage", "x", "value"], rows)
        return
    zs = [fmt(z) for z in z_grid.points]
    for k, tab in enumerate(values):
        for i in range(tab.shape[0]):
            rows.extend((t0 + k, xs[i], zs[j], fmt(tab[i, j])) for j in range(tab.shape[1]))
    _write_rows(path, ["stage", "x", "z", "value"], rows)


def read_value_table(path: Path, t0: int, T: int, nx: int, nz: int | None = None) -> np.ndarray:
    shape = (T - t0 + 1, nx) if nz is None else (T - t0 + 1, nx, nz)
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float)
    vals = data[:, -1]
    if vals.size != int(np.prod(shape)):
        raise ExtdpError(f"{path}: expected {int(np.prod(shape))} rows, found {vals.size}")
    return vals.reshape(shape)


def write_policy(path: Path, policy) -> None:
    xg, ug = policy.x_grid, policy.u_grid
    rows = []
    if isinstance(policy, StatePolicy):
        for k, row in enumerate(policy.u_index):
            rows.extend((policy.t0 + k, i, fmt(xg.points[i]), int(u), fmt(ug.points[u])) for i, u in enumerate(row))
        _write_rows(path, ["stage", "x_index", "x", "u_index", "u"], rows)
        return
    zg = policy.z_grid
    na = policy.v_index[0].shape[-1]
    for k in range(policy.T - policy.t0):
        U, VP = policy.u_index[k], policy.v_index[k]
        for i in range(xg.n):
            for j in range(zg.n):
                u = int(U[i, j])
                rows.append([policy.t0 + k, i, j, fmt(xg.points[i]), fmt(zg.points[j]), u, fmt(ug.points[u])]
                            + VP[i, j].tolist())
    _write_rows(path, ["stage", "x_index", "z_index", "x", "z", "u_index", "u"]
                + [f"v_index_{a}" for a in range(na)], rows)


def read_policy(path: Path, kind: str, inst):
    """Rebuild a policy of ``kind`` ('classic' or 'extended') on the instance grids."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float)
    data = np.atleast_2d(data)
    stages = data[:, 0].astype(np.int64)
    t0, T = int(stages.min()), int(stages.max()) + 1
    if kind == "classic":
        u = data[:, 3].astype(np.int64).reshape(T - t0, inst.x_grid.n)
        return StatePolicy(t0, T, inst.x_grid, inst.u_grid, u)
    nx, nz = inst.x_grid.n, inst.z_grid.n
    u = data[:, 5].astype(np.int64).reshape(T - t0, nx, nz)
    vp = data[:, 7:].astype(np.int64).reshape(T - t0, nx, nz, -1)
    probs = tuple(inst.noise.at(t + 1).probs for t in range(t0, T))
    return ExtendedPolicy(t0, T, inst.x_grid, inst.z_grid, inst.u_grid, inst.v_grid, u,
                          tuple(vp[k] for k in range(T - t0)), probs)


def write_trajectories(path: Path, traj, T: int) -> None:
    n, steps = traj.u.shape
    ext = traj.z is not None
    header = ["scenario", "t", "x", "u", "w"] + (["z", "v"] if ext else [])
    rows = []
    for s in range(n):
        for k in range(steps + 1):
            last = k == steps
            row = [s, traj.t0 + k, fmt(traj.x[s, k]),
                   "" if last else fmt(traj.u[s, k]), "" if last else fmt(traj.w[s, k])]
            if ext:
                row += [fmt(traj.z[s, k]), "" if last else fmt(traj.v[s, k])]
            rows.append(row)
    _write_rows(path, header, rows)


def read_trajectories(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        cols = list(zip(*r)) or [()] * len(header)
    out = {}
    for name, col in zip(header, cols):
        out[name] = np.array([float(c) if c != "" else np.nan for c in col])
    return out
