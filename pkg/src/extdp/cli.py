"""Command-line front end for the dam benchmark.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence
(artifacts are still written), 4 I/O error, 1 any other failure. Errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from extdp import io
from extdp.audit import SolvedDual, SolvedExtended, audit_restart
from extdp.classic import solve_classic
from extdp.config import RunConfig, load_config
from extdp.core import ConfigInvalid, ExtdpError, NotConverged
from extdp.dual import dual_function, uzawa_solve
from extdp.extended import ExtendedValueTable, solve_extended
from extdp.simulate import evaluate_policy, simulate_classic, simulate_extended

log = logging.getLogger("extdp")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3, 4
FIGURE_SCENARIOS = 5


def _sim_dict(rep, x0, z0=None) -> dict:
    d = {"n": rep.n, "seed": rep.seed, "t0": rep.t0, "x0": x0, "mean_cost": rep.mean_cost,
         "cost_stderr": rep.cost_stderr, "constraint_estimate": rep.constraint_estimate,
         "probability": rep.probability}
    if rep.mean_zT is not None:
        d.update(z0=z0, mean_zT=rep.mean_zT, z_stdev=rep.z_stdev, v_means=rep.v_means,
                 max_v_residual=rep.max_v_residual)
    return d


def _write_sim(out: Path, rep, T: int) -> None:
    io.write_trajectories(out / "trajectories.csv", rep.trajectories, T)


def _empty_trajectories(out: Path, extended: bool) -> None:
    io._write_rows(out / "trajectories.csv",
                   ["scenario", "t", "x", "u", "w"] + (["z", "v"] if extended else []), [])


def cmd_solve_classic(args, cfg: RunConfig) -> int:
    inst = cfg.instance()
    P, out = inst.problem, Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lam = args.lam
    if lam is None:
        table, policy = solve_classic(P, inst.x_grid, inst.u_grid, inst.noise)
        bellman, dual = table.value(P.t0, inst.x0), None
        cost, cons, prob, _ = evaluate_policy(P, policy, inst.x0, P.t0, inst.noise)
    else:
        ev = dual_function(lam, P, inst.x_grid, inst.u_grid, inst.noise, inst.b, inst.x0)
        table, policy = ev.table, ev.policy
        bellman, dual = table.value(P.t0, inst.x0), ev.value
        cons, prob = ev.bbar, ev.probability
    results = {"lambda": lam, "bellman_value": bellman, "dual_value": dual, "x0": inst.x0, "t0": P.t0,
               "constraint": cons, "probability": prob}
    io.write_value_table(out / "value_table.csv", table.values, table.t0, inst.x_grid)
    io.write_policy(out / "policy.csv", policy)
    if cfg.simulation.n > 0:
        rep = simulate_classic(P, policy, inst.x0, P.t0, cfg.simulation.n, cfg.simulation.seed, inst.noise)
        results["simulation"] = _sim_dict(rep, inst.x0)
        _write_sim(out, rep, P.T)
    else:
        _empty_trajectories(out, False)
    io.write_summary(out, "solve-classic", "classic", cfg, results)
    return EXIT_OK


def cmd_solve_extended(args, cfg: RunConfig) -> int:
    inst = cfg.instance()
    P, out = inst.problem, Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inner = cfg.inner_config(inst)
    table, policy = solve_extended(P, inst.x_grid, inst.z_grid, inst.u_grid, inst.noise, inner)
    res = [np.nanmax(np.abs(r)) if np.any(np.isfinite(r)) else 0.0 for r in policy.martingale_residuals()]
    bellman = table.value(P.t0, inst.x0, inst.z0)
    results = {"bellman_value": bellman, "x0": inst.x0, "z0": inst.z0, "t0": P.t0,
               "max_martingale_residual": float(max(res)), "eps_mart": inner.eps_for(inst.noise.at(1).probs),
               "inner_audit": list(table.audit)}
    if np.isfinite(bellman):
        _, cons, prob, _ = evaluate_policy(P, policy, inst.x0, P.t0, inst.noise, z0=inst.z0)
        results.update(constraint=cons, probability=prob)
    io.write_value_table(out / "value_table.csv", table.values, table.t0, inst.x_grid, inst.z_grid)
    io.write_policy(out / "policy.csv", policy)
    if cfg.simulation.n > 0 and np.isfinite(bellman):
        rep = simulate_extended(P, policy, inst.x0, inst.z0, P.t0, cfg.simulation.n, cfg.simulation.seed,
                                inst.noise)
        results["simulation"] = _sim_dict(rep, inst.x0, inst.z0)
        _write_sim(out, rep, P.T)
    else:
        _empty_trajectories(out, True)
    io.write_summary(out, "solve-extended", "extended", cfg, results)
    return EXIT_OK


def _history_dict(history) -> list[dict]:
    return [{"k": r.k, "lambda": r.lam, "dual_value": r.dual_value, "constraint": r.constraint,
             "gradient": r.gradient} for r in history.records]


def cmd_solve_dual(args, cfg: RunConfig) -> int:
    over = {k: v for k, v in (("rho", args.rho), ("tol", args.tol), ("max_iter", args.max_iter)) if v is not None}
    if over:
        cfg = replace(cfg, uzawa=replace(cfg.uzawa, **over))
    inst = cfg.instance()
    P, out = inst.problem, Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failure = None
    try:
        res = uzawa_solve(P, inst.x_grid, inst.u_grid, inst.noise, inst.b, inst.x0, cfg.uzawa)
    except NotConverged as err:
        res, failure = err.result, err
    ev = res.evaluation
    cert = asdict(res.certificate)
    results = {"lambda_star": res.lambda_star, "bellman_value": ev.value, "x0": inst.x0, "t0": P.t0,
               "constraint": ev.bbar, "probability": ev.probability, "converged": res.converged,
               "history": _history_dict(res.history), "certificate": cert}
    io.write_value_table(out / "value_table.csv", ev.table.values, ev.table.t0, inst.x_grid)
    io.write_policy(out / "policy.csv", res.policy)
    if cfg.simulation.n > 0:
        rep = simulate_classic(P, res.policy, inst.x0, P.t0, cfg.simulation.n, cfg.simulation.seed, inst.noise)
        results["simulation"] = _sim_dict(rep, inst.x0)
        _write_sim(out, rep, P.T)
    else:
        _empty_trajectories(out, False)
    io.write_summary(out, "solve-dual", "dual", cfg, results)
    if failure is not None:
        _error(failure, EXIT_NOT_CONVERGED)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_run(policy_dir: Path):
    doc, cfg = io.read_summary(policy_dir)
    if doc["command"] not in ("solve-classic", "solve-extended", "solve-dual"):
        raise ConfigInvalid([f"{policy_dir} does not hold a solved policy"])
    inst = cfg.instance()
    kind = "extended" if doc["kind"] == "extended" else "classic"
    policy = io.read_policy(policy_dir / "policy.csv", kind, inst)
    return doc, cfg, inst, kind, policy


def _copy_tables(src: Path, out: Path) -> None:
    for name in ("value_table.csv", "policy.csv"):
        if (src / name).resolve() != (out / name).resolve():
            shutil.copyfile(src / name, out / name)


def cmd_simulate(args, cfg_unused) -> int:
    src, out = Path(args.policy), Path(args.out)
    doc, cfg, inst, kind, policy = _load_run(src)
    out.mkdir(parents=True, exist_ok=True)
    P = inst.problem
    t0 = args.t0
    if kind == "extended":
        z0 = inst.z0 if args.z0 is None else args.z0
        table = io.read_value_table(src / "value_table.csv", policy.t0, policy.T, inst.x_grid.n, inst.z_grid.n)
        bellman = float(table[t0 - policy.t0, inst.x_grid.snap(args.x0), inst.z_grid.snap(z0)])
        rep = simulate_extended(P, policy.truncate(t0), args.x0, z0, t0, args.n, args.seed, inst.noise)
        sim = _sim_dict(rep, args.x0, z0)
    else:
        table = io.read_value_table(src / "value_table.csv", policy.t0, policy.T, inst.x_grid.n)
        bellman = float(table[t0 - policy.t0, inst.x_grid.snap(args.x0)])
        if doc["kind"] == "dual":
            lam = np.atleast_1d(doc["results"]["lambda_star"])
            bellman -= float(lam @ np.atleast_1d(inst.b))
        rep = simulate_classic(P, policy.truncate(t0), args.x0, t0, args.n, args.seed, inst.noise)
        sim = _sim_dict(rep, args.x0)
    _copy_tables(src, out)
    _write_sim(out, rep, P.T)
    io.write_summary(out, "simulate", doc["kind"], cfg,
                     {"policy_kind": doc["kind"], "source": str(src), "bellman_value": bellman, "simulation": sim})
    return EXIT_OK


def _parse_restart(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (2, 3):
        raise ConfigInvalid(["--restart expects T0,X or T0,X,Z"])
    try:
        return (int(parts[0]),) + tuple(float(p) for p in parts[1:])
    except ValueError as err:
        raise ConfigInvalid([f"--restart: {err}"]) from err


def cmd_audit(args, cfg_unused) -> int:
    src, out = Path(args.policy), Path(args.out)
    doc, cfg, inst, kind, policy = _load_run(src)
    out.mkdir(parents=True, exist_ok=True)
    restart = _parse_restart(args.restart)
    required = None if args.level is None else -float(args.level)
    n = cfg.simulation.n if args.n is None else args.n
    seed = cfg.simulation.seed if args.seed is None else args.seed
    if args.method == "dual":
        if kind != "classic":
            raise ConfigInvalid(["the dual audit needs a policy from solve-dual or solve-classic"])
        if required is None:
            raise ConfigInvalid(["--level is required for the dual audit"])
        solved = SolvedDual(inst.problem, inst.x_grid, inst.u_grid, inst.noise, policy, cfg.uzawa)
        v = audit_restart("dual", solved, restart[:2], required, cfg.audit, n, seed)
    else:
        if kind != "extended":
            raise ConfigInvalid(["the extended audit needs a policy from solve-extended"])
        if len(restart) != 3:
            raise ConfigInvalid(["the extended audit needs --restart T0,X,Z"])
        vals = io.read_value_table(src / "value_table.csv", policy.t0, policy.T, inst.x_grid.n, inst.z_grid.n)
        table = ExtendedValueTable(policy.t0, policy.T, inst.x_grid, inst.z_grid, vals)
        solved = SolvedExtended(inst.problem, inst.noise, table, policy)
        v = audit_restart("extended", solved, restart, required, cfg.audit, n, seed)
    _copy_tables(src, out)
    if n > 0 and np.isfinite(v.truncated_value):
        pol = policy.truncate(restart[0])
        if kind == "extended":
            rep = simulate_extended(inst.problem, pol, restart[1], restart[2], restart[0], n, seed, inst.noise)
        else:
            rep = simulate_classic(inst.problem, pol, restart[1], restart[0], n, seed, inst.noise)
        _write_sim(out, rep, inst.problem.T)
    else:
        _empty_trajectories(out, kind == "extended")
    io.write_summary(out, "audit", doc["kind"], cfg, {"verdict": asdict(v)})
    return EXIT_OK


# -- report ------------------------------------------------------------------

def _row(label: str, value) -> str:
    if isinstance(value, float):
        value = f"{value:.3f}" if abs(value) < 10 else f"{value:.2f}"
    return f"| {label} | {value} |"


def render_tables(docs: list[tuple[Path, dict]]) -> str:
    lines = []
    for path, doc in docs:
        r, cmd = doc["results"], doc["command"]
        sim = r.get("simulation") or {}
        lines.append(f"### {path} ({cmd}, {doc['kind']})")
        lines.append("| quantity | value |")
        lines.append("|---|---|")
        if cmd == "solve-dual":
            lines.append(_row("optimal multiplier", float(np.atleast_1d(r["lambda_star"])[0])))
            lines.append(_row("Bellman value at t=%d" % r["t0"], r["bellman_value"]))
            lines.append(_row("required probability", r["probability"]))
        elif cmd == "solve-extended":
            lines.append(_row("Bellman value at t=%d" % r["t0"], r["bellman_value"]))
            lines.append(_row("initial z", r["z0"]))
        elif cmd == "solve-classic":
            lines.append(_row("Bellman value at t=%d" % r["t0"], r["bellman_value"]))
        elif cmd == "simulate":
            lines.append(_row("Bellman value at t=%d" % sim.get("t0", 0), r["bellman_value"]))
            lines.append(_row("initial state", ", ".join(
                f"{v:g}" for v in (sim.get("x0"), sim.get("z0")) if v is not None)))
        elif cmd == "audit":
            v = r["verdict"]
            lines.append(_row("restart stage", v["stage"]))
            lines.append(_row("achieved level", v["achieved"]))
            lines.append(_row("required level", v["required"]))
            lines.append(_row("truncated value", v["truncated_value"]))
            lines.append(_row("re-solved value", v["resolved_value"]))
            lines.append(_row("consistent", v["consistent"]))
        if sim:
            lines.append(_row("Monte Carlo cost", sim["mean_cost"]))
            if sim.get("probability") is not None:
                lines.append(_row("estimated probability", sim["probability"]))
            lines.append(_row("scenarios", sim["n"]))
        lines.append("")
    return "\n".join(lines)


def write_plot_data(out: Path, docs: list[tuple[Path, dict]], k: int = FIGURE_SCENARIOS) -> list[str]:
    """Plot-ready CSVs: noise and prices, then x/u (and z/v) paths of the first k scenarios per run."""
    out.mkdir(parents=True, exist_ok=True)
    written = []
    prices_done = False
    for path, doc in docs:
        tfile = Path(path) / "trajectories.csv"
        if not tfile.exists():
            continue
        tr = io.read_trajectories(tfile)
        if tr["scenario"].size == 0:
            continue
        sel = tr["scenario"] < k
        tag = f"{Path(path).name}_{doc['kind']}"
        if not prices_done:
            cfg = doc["config"]["dam"]
            io._write_rows(out / "noise_prices_prices.csv", ["t", "price"],
                           [(t, io.fmt(p)) for t, p in enumerate(cfg["prices"])])
            noise_rows = [(int(s), int(t) + 1, io.fmt(w)) for s, t, w in
                          zip(tr["scenario"][sel], tr["t"][sel], tr["w"][sel]) if not np.isnan(w)]
            io._write_rows(out / "noise_prices_noise.csv", ["scenario", "t", "w"], noise_rows)
            written += ["noise_prices_prices.csv", "noise_prices_noise.csv"]
            prices_done = True
        rows = [(int(s), int(t), io.fmt(x), "" if np.isnan(u) else io.fmt(u))
                for s, t, x, u in zip(tr["scenario"][sel], tr["t"][sel], tr["x"][sel], tr["u"][sel])]
        io._write_rows(out / f"{tag}_xu.csv", ["scenario", "t", "x", "u"], rows)
        written.append(f"{tag}_xu.csv")
        if "z" in tr:
            rows = [(int(s), int(t), io.fmt(z), "" if np.isnan(v) else io.fmt(v))
                    for s, t, z, v in zip(tr["scenario"][sel], tr["t"][sel], tr["z"][sel], tr["v"][sel])]
            io._write_rows(out / f"{tag}_zv.csv", ["scenario", "t", "z", "v"], rows)
            written.append(f"{tag}_zv.csv")
    return written


def cmd_report_tables(args, cfg_unused) -> int:
    docs = [(Path(d), io.read_summary(Path(d))[0]) for d in args.runs]
    text = render_tables(docs)
    sys.stdout.write(text + "\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tables.md").write_text(text + "\n")
        write_plot_data(out / "plot_data", docs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="extdp", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve-classic", help="classic DP, optionally with a dualized terminal cost")
    s.add_argument("--config")
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve_classic)

    s = sub.add_parser("solve-extended", help="DP on the augmented (x, z) state")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve_extended)

    s = sub.add_parser("solve-dual", help="Uzawa iterations on the multiplier")
    s.add_argument("--config")
    s.add_argument("--rho", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve_dual)

    s = sub.add_parser("simulate", help="Monte Carlo rollout of a saved policy")
    s.add_argument("--policy", required=True)
    s.add_argument("--t0", type=int, default=0)
    s.add_argument("--x0", type=float, required=True)
    s.add_argument("--z0", type=float)
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("audit", help="restart a saved policy and judge its consistency")
    s.add_argument("--method", choices=("dual", "extended"), required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--restart", required=True, help="T0,X or T0,X,Z")
    s.add_argument("--level", type=float, help="required probability of reaching the target level")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("report-tables", help="summarize runs as tables and plot data")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report_tables)
    return p


def _error(err: BaseException, code: int) -> None:
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    if isinstance(err, ConfigInvalid):
        payload["problems"] = err.problems
    sys.stderr.write(json.dumps(payload) + "\n")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            import numba

            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except ConfigInvalid as err:
        _error(err, EXIT_CONFIG)
        return EXIT_CONFIG
    except OSError as err:
        _error(err, EXIT_IO)
        return EXIT_IO
    except NotConverged as err:
        _error(err, EXIT_NOT_CONVERGED)
        return EXIT_NOT_CONVERGED
    except (ExtdpError, ValueError) as err:
        _error(err, EXIT_OTHER)
        return EXIT_OTHER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
