"""Command-line entry point ``loadshift``.

Every command prints a one-object JSON summary on stdout (see
``data/summary.schema.json``) and writes its artifacts atomically.
Exit codes: 0 ok, 1 usage, 2 infeasible, 3 node budget exhausted (incumbent written).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bilevel import (
    CONSUMER,
    SYSTEM,
    TIE_BREAKS,
    BilevelInfeasible,
    build_single_level,
    brute_force_oracle,
    solve_bilevel,
)
from .dcopf import InfeasibleMarket, build_dcopf, clear_market, normalize, result_dict
from .flexibility import DimensionGuardError, from_config
from .grid import NetworkError, load_network_file, three_zone
from .lp import DEFAULT_CONFIG
from .regimes import merit_order_csv, merit_order_report
from .runner import RunConfig, aggregate, atomic_write_text, load_results, open_dataset, run, workers_from_env

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3
BUILTIN_NETWORK = "three_zone"

logger = logging.getLogger("loadshift")


class Failure(Exception):
    def __init__(self, code: int, message: str, detail: dict | None = None):
        super().__init__(message)
        self.code = code
        self.detail = detail or {}


def emit(command: str, code: int, outputs=(), result=None, error=None):
    summary = {"command": command, "exit_code": code, "status": _STATUS[code], "outputs": [str(p) for p in outputs]}
    if result is not None:
        summary["result"] = result
    if error is not None:
        summary["error"] = error
    click.echo(json.dumps(summary, sort_keys=True, default=_jsonable))
    return code


_STATUS = {EXIT_OK: "ok", EXIT_USAGE: "usage_error", EXIT_INFEASIBLE: "infeasible", EXIT_BUDGET: "budget_exhausted"}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _load_network(source: str):
    if source == BUILTIN_NETWORK:
        return three_zone()
    return load_network_file(source)


def _parse_vector(text: str | None, n: int, what: str):
    if text is None:
        return np.zeros(n)
    try:
        vals = [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise Failure(EXIT_USAGE, f"{what}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise Failure(EXIT_USAGE, f"{what}: expected {n} values, got {len(vals)}")
    return np.array(vals)


def _solver_config(ctx):
    return replace(DEFAULT_CONFIG, **ctx.obj["solver"])


def _command(name):
    """Run the body, map exceptions to exit codes and always print a summary."""

    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                outputs, result, code = fn(*args, **kwargs)
            except Failure as exc:
                click.echo(str(exc), err=True)
                sys.exit(emit(name, exc.code, result=exc.detail or None, error=str(exc)))
            except (NetworkError, ValueError, FileNotFoundError, DimensionGuardError) as exc:
                click.echo(f"error: {exc}", err=True)
                sys.exit(emit(name, EXIT_USAGE, error=str(exc)))
            sys.exit(emit(name, code, outputs, result))

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


class _Group(click.Group):
    """Click reports usage errors with exit code 2, which is reserved here for infeasibility."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.UsageError as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        sys.exit(code or 0)


@click.group(cls=_Group)
@click.version_option(__version__)
@click.option("--feas-tol", type=float, default=DEFAULT_CONFIG.feas_tol, show_default=True, help="Primal feasibility tolerance.")
@click.option("--duality-tol", type=float, default=DEFAULT_CONFIG.duality_tol, show_default=True, help="Objective tolerance when selecting among dual optima.")
@click.option("--comp-tol", type=float, default=DEFAULT_CONFIG.comp_tol, show_default=True, help="Complementarity product accepted at a leaf.")
@click.option("--pivot-tol", type=float, default=DEFAULT_CONFIG.pivot_tol, show_default=True)
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, feas_tol, duality_tol, comp_tol, pivot_tol, verbose):
    """Market clearing and strategic load-shift analysis."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["solver"] = {"feas_tol": feas_tol, "duality_tol": duality_tol, "comp_tol": comp_tol, "pivot_tol": pivot_tol}


@main.command("solve-opf")
@click.option("--network", default=BUILTIN_NETWORK, show_default=True, help="Network JSON file or 'three_zone'.")
@click.option("--shift", default=None, help="Comma-separated MW shift per bus (must sum to zero).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the full result JSON here.")
@click.option("--dump-lp", type=click.Path(dir_okay=False), default=None, help="Write the LP in text form for debugging.")
@click.pass_context
@_command("solve-opf")
def solve_opf(ctx, network, shift, out, dump_lp):
    """Clear the market and report dispatch, prices and the stakeholder ledger."""
    net, load = _load_network(network)
    delta = _parse_vector(shift, net.n_buses, "--shift")
    if abs(delta.sum()) > 1e-6:
        raise Failure(EXIT_USAGE, f"--shift must sum to zero (sum = {delta.sum():g})")
    if dump_lp:
        atomic_write_text(dump_lp, build_dcopf(net, load, delta).to_text())
    try:
        disp, du = clear_market(net, load, delta, _solver_config(ctx))
    except InfeasibleMarket as exc:
        raise Failure(EXIT_INFEASIBLE, str(exc), exc.aggregate()) from None
    res = result_dict(net, load, delta, disp, du)
    res["buses"] = list(net.buses)
    outputs = []
    if out:
        atomic_write_text(out, _dumps(res))
        outputs.append(out)
    brief = {k: res[k] for k in ("V_usd", "V_normalized", "Pi_usd", "Pi_normalized", "lambda")}
    return outputs, brief, EXIT_OK


@main.command()
@click.option("--network", default=BUILTIN_NETWORK, show_default=True)
@click.option("--alpha", type=float, required=True)
@click.option("--step", type=float, required=True, help="Lattice spacing in MW.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Landscape CSV.")
@click.option("--max-free-dim", type=int, default=2, show_default=True)
@click.pass_context
@_command("sweep")
def sweep(ctx, network, alpha, step, out, max_free_dim):
    """Evaluate V and Pi on every lattice shift of the box-with-balance set."""
    net, load = _load_network(network)
    fset = from_config({"alpha": alpha}, load.d_flex)
    if fset.free_dimension() > max_free_dim:
        raise Failure(EXIT_USAGE, f"free dimension {fset.free_dimension()} exceeds --max-free-dim {max_free_dim}")
    oracle = brute_force_oracle(net, load, fset, step, _solver_config(ctx))
    keys = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"delta_{b}" for b in net.buses] + ["V_norm", "Pi_norm", "active_set_id", "feasible"])
    for row in oracle.rows:
        if row.feasible:
            aid = keys.setdefault(row.active_set.key(), len(keys))
            tail = [f"{normalize(row.V, load):.6f}", f"{normalize(row.Pi, load):.6f}", aid, "true"]
        else:
            tail = ["", "", "", "false"]
        w.writerow([f"{x:g}" for x in row.delta] + tail)
    atomic_write_text(out, buf.getvalue())
    result = {
        "points": len(oracle.rows),
        "active_sets": {str(i): k for k, i in keys.items()},
        "argmin_pi": oracle.argmin_pi,
        "argmin_v": oracle.argmin_v,
        "min_pi_normalized": normalize(oracle.min_pi, load),
        "min_v_normalized": normalize(oracle.min_v, load),
    }
    return [out], result, EXIT_OK


@main.command()
@click.option("--network", default=BUILTIN_NETWORK, show_default=True)
@click.option("--alpha", type=float, required=True)
@click.option("--mode", type=click.Choice([CONSUMER, SYSTEM]), default=CONSUMER, show_default=True)
@click.option("--epsilon", type=float, default=1e-3, show_default=True, help="Absolute optimality gap in USD.")
@click.option("--node-budget", type=int, default=200_000, show_default=True)
@click.option("--tie-break", type=click.Choice(["none", *TIE_BREAKS]), default="none", show_default=True, help="Among consumer-optimal shifts prefer lower or higher system cost.")
@click.option("--sequential/--parallel", default=True, show_default=True, help="Only sequential search is implemented.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--dump-lp", type=click.Path(dir_okay=False), default=None, help="Write the single-level LP in text form.")
@click.pass_context
@_command("bilevel")
def bilevel(ctx, network, alpha, mode, epsilon, node_budget, tie_break, sequential, out, dump_lp):
    """Optimal shift for the flexible consumer or for the operator."""
    if not sequential:
        raise Failure(EXIT_USAGE, "--parallel search is not available; use --sequential")
    net, load = _load_network(network)
    fset = from_config({"alpha": alpha}, load.d_flex)
    system = build_single_level(net, load, fset)
    if dump_lp:
        atomic_write_text(dump_lp, system.lp.to_text())
    try:
        sol = solve_bilevel(system, mode, epsilon, node_budget, None if tie_break == "none" else tie_break, _solver_config(ctx))
    except BilevelInfeasible as exc:
        raise Failure(EXIT_INFEASIBLE, str(exc)) from None
    res = sol.to_dict(load.total)
    res["buses"] = list(net.buses)
    outputs = []
    if out:
        atomic_write_text(out, _dumps(res))
        outputs.append(out)
    return outputs, res, EXIT_BUDGET if sol.status == "budget_exhausted" else EXIT_OK


def _run_config(config_path, out):
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    if out:
        cfg.output_dir = out
    return cfg


@main.command("run")
@click.option("--dataset", required=True, type=click.Path(exists=True), help="Network JSON file or RTS-GMLC style directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Run config JSON.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory (overrides the config).")
@click.option("--workers", type=int, default=None, help="Worker processes (default from LOADSHIFT_WORKERS, else 1).")
@_command("run")
def run_cmd(dataset, config_path, out, workers):
    """Solve every (hour, mode, alpha) not already in the run directory."""
    cfg = _run_config(config_path, out)
    cfg.workers = workers if workers is not None else workers_from_env(cfg.workers)
    ds = open_dataset(dataset, cfg)
    summary = run(ds, cfg)
    atomic_write_text(Path(cfg.output_dir, "config.json"), _dumps(cfg.to_dict()))
    result = {
        "hours": summary.hours,
        "written": summary.written,
        "skipped": summary.skipped,
        "infeasible": summary.infeasible,
        "budget_exhausted": summary.budget_exhausted,
    }
    return [summary.results_path], result, EXIT_BUDGET if summary.budget_exhausted else EXIT_OK


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory holding results.jsonl.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None, help="Report CSV (default <run dir>/report.csv).")
@click.option("--merit-order", "merit_path", type=click.Path(dir_okay=False), default=None, help="Also write the merit-order CSV for --mode/--alpha.")
@click.option("--mode", type=click.Choice([CONSUMER, SYSTEM]), default=CONSUMER, show_default=True)
@click.option("--alpha", type=float, default=None, help="Scenario for the merit-order CSV (default: largest).")
@_command("report")
def report(dataset, config_path, out, report_path, merit_path, mode, alpha):
    """Aggregate the run into the stakeholder report and optional merit-order CSV."""
    cfg = _run_config(config_path, out)
    run_dir = Path(cfg.output_dir)
    records = load_results(run_dir / cfg.results_file)
    if not records:
        raise Failure(EXIT_USAGE, f"no records in {run_dir / cfg.results_file}")
    rep = aggregate(records)
    report_path = report_path or str(run_dir / cfg.report_file)
    atomic_write_text(report_path, rep.to_csv())
    outputs = [report_path]
    result = rep.to_dict()
    if merit_path:
        ds = open_dataset(dataset, cfg)
        alphas = sorted({r["alpha"] for r in records if r["mode"] == mode})
        if not alphas:
            raise Failure(EXIT_USAGE, f"no {mode} records in the run")
        alpha = alphas[-1] if alpha is None else alpha
        base = {r["hour"]: r for r in records if r["mode"] == "none" and r["status"] == "ok"}
        shifted = {r["hour"]: r for r in records if r["mode"] == mode and abs(r["alpha"] - alpha) < 1e-9 and r["status"] == "ok"}
        hours = sorted(set(base) & set(shifted))
        rows = merit_order_report(ds.network, {h: base[h] for h in hours}, {h: shifted[h] for h in hours})
        atomic_write_text(merit_path, merit_order_csv(rows))
        outputs.append(merit_path)
        result["merit_order"] = {"mode": mode, "alpha": alpha, "hours": len(hours)}
    return outputs, result, EXIT_OK


if __name__ == "__main__":
    main()
