"""Hour-by-hour batch runs: baseline clearing, shifted clearing, stakeholder ledgers, aggregation.

Results go to ``results.jsonl`` in the run directory, one record per
``(hour, mode, alpha)``. The no-shift baseline is stored as mode ``none``
with ``alpha = 0`` and every shifted record of the same hour refers to it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bilevel import BilevelInfeasible, build_single_level, solve_bilevel
from .dcopf import InfeasibleMarket, clear_market, stakeholder_ledger
from .flexibility import build_box_with_balance
from .grid import LoadProfile, Network, load_network_file, load_rts_dataset
from .lp import DEFAULT_CONFIG, SolverConfig
from .regimes import ALIGN_TOL, PROBE_EPS, classify_alignment, marginal_flags, probe_boundary

logger = logging.getLogger(__name__)

MODES = ("none", "consumer", "system")
STAKEHOLDERS = (
    ("flexible_consumer", "flex_cost"),
    ("inflexible_consumer", "inflex_cost"),
    ("generator", "gen_profit"),
    ("system_operator", "system_cost"),
)
REPORT_COLUMNS = ["stakeholder", "alpha", "mode", "usd_change", "pct_change", "misalign_pct"]
RESULTS_FILE = "results.jsonl"
QUARANTINE_FILE = "results.quarantine.jsonl"
WORKERS_ENV = "LOADSHIFT_WORKERS"

RTS_PLACEMENTS = (("103", 250.0), ("107", 250.0), ("204", 250.0), ("322", 250.0))


# -- configuration -------------------------------------------------------------


@dataclass
class RunConfig:
    alphas: list = field(default_factory=lambda: [0.25, 0.5])
    modes: list = field(default_factory=lambda: ["consumer", "system"])
    # (bus, MW) pairs; empty keeps the flexible load stored with the dataset
    placements: list = field(default_factory=list)
    capacity_scale: float = 1.0
    hours: tuple | None = None  # [start, stop)
    epsilon: float = 1e-3
    node_budget: int = 200_000
    tie_break: str | None = "max_v"
    align_tol: float = ALIGN_TOL
    probe_eps: float = PROBE_EPS
    rating: str = "Cont Rating"
    feas_tol: float = DEFAULT_CONFIG.feas_tol
    duality_tol: float = DEFAULT_CONFIG.duality_tol
    comp_tol: float = DEFAULT_CONFIG.comp_tol
    workers: int = 1
    output_dir: str = "run"
    results_file: str = RESULTS_FILE
    report_file: str = "report.csv"

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown mode(s) {bad}; expected some of {MODES}")
        for a in self.alphas:
            if not 0.0 <= float(a) <= 1.0:
                raise ValueError(f"alpha {a} outside [0, 1]")
        if self.capacity_scale <= 0:
            raise ValueError("capacity_scale must be positive")
        if self.hours is not None:
            start, stop = self.hours
            if start < 0 or stop <= start:
                raise ValueError(f"bad hour range {self.hours}")
            self.hours = (int(start), int(stop))
        self.alphas = [float(a) for a in self.alphas]
        self.placements = [(str(b), float(mw)) for b, mw in self.placements]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        data = dict(data)
        if "placements" in data:
            data["placements"] = [(p["bus"], p["mw"]) if isinstance(p, dict) else tuple(p) for p in data["placements"]]
        if data.get("hours") is not None:
            data["hours"] = tuple(data["hours"])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["placements"] = [{"bus": b, "mw": mw} for b, mw in self.placements]
        out["hours"] = list(self.hours) if self.hours else None
        return out

    def solver_config(self) -> SolverConfig:
        return replace(DEFAULT_CONFIG, feas_tol=self.feas_tol, duality_tol=self.duality_tol, comp_tol=self.comp_tol)


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    return max(n, 1)


# -- datasets ------------------------------------------------------------------


class StaticDataset:
    """A single network file viewed as a dataset of identical hours."""

    def __init__(self, network: Network, load: LoadProfile, n_hours: int = 1):
        self.network = network
        self.load = load
        self.n_hours = n_hours

    def hour_case(self, hour: int, flex_mw=None):
        flex = self.load.d_flex if flex_mw is None else flex_mw
        return self.network, LoadProfile(self.load.d_base, flex)


def open_dataset(path, config: RunConfig):
    """A network JSON file (one hour) or an RTS-GMLC style directory."""
    path = Path(path)
    if path.is_dir():
        ds = load_rts_dataset(path, capacity_scale=config.capacity_scale, rating=config.rating)
    else:
        net, load = load_network_file(path)
        if config.capacity_scale != 1.0:
            net = net.scale_capacities(config.capacity_scale)
        ds = StaticDataset(net, load)
    return ds


def placement_vector(network: Network, placements) -> np.ndarray | None:
    if not placements:
        return None
    idx = {b: i for i, b in enumerate(network.buses)}
    out = np.zeros(network.n_buses)
    for bus, mw in placements:
        if bus not in idx:
            raise ValueError(f"placement at unknown bus {bus!r}")
        if mw < 0:
            raise ValueError(f"placement at bus {bus} is negative")
        out[idx[bus]] += mw
    return out


def hour_range(config: RunConfig, n_hours: int) -> range:
    if config.hours is None:
        return range(n_hours)
    start, stop = config.hours
    if stop > n_hours:
        raise ValueError(f"hour range {config.hours} exceeds the dataset's {n_hours} hours")
    return range(start, stop)


# -- per-hour work ---------------------------------------------------------------


def _base_record(hour, mode, alpha) -> dict:
    return {"hour": int(hour), "mode": mode, "alpha": float(alpha)}


def baseline_record(hour: int, network: Network, load: LoadProfile, config: RunConfig) -> dict:
    rec = _base_record(hour, "none", 0.0)
    n = network.n_buses
    try:
        disp, du = clear_market(network, load, np.zeros(n), config.solver_config())
    except InfeasibleMarket as exc:
        rec.update(status="infeasible", error=str(exc))
        return rec
    ledger = stakeholder_ledger(disp, du, network, load, np.zeros(n))
    rec.update(
        status="ok",
        normalizer=load.total,
        delta=[0.0] * n,
        V=disp.system_cost,
        Pi=ledger.flex_cost,
        ledger=ledger.as_dict(),
        conservation_residual=ledger.conservation_residual(),
        p=disp.p.tolist(),
        marginal=marginal_flags(disp, du, network).tolist(),
    )
    return rec


def run_hour(hour: int, network: Network, load: LoadProfile, mode: str, alpha: float, config: RunConfig, baseline: dict | None = None) -> dict:
    """One shifted record. ``baseline`` is the stored mode-``none`` record for the hour."""
    if baseline is None:
        baseline = baseline_record(hour, network, load, config)
    rec = _base_record(hour, mode, alpha)
    if baseline.get("status") != "ok":
        rec.update(status="infeasible", error=baseline.get("error", "baseline infeasible"))
        return rec
    n = network.n_buses
    scfg = config.solver_config()
    solution = None
    if mode == "none" or alpha == 0.0:
        delta = np.zeros(n)
        status = "ok"
    else:
        fset = build_box_with_balance(alpha, load.d_flex)
        system = build_single_level(network, load, fset)
        try:
            solution = solve_bilevel(system, mode, config.epsilon, config.node_budget, tie_break=config.tie_break if mode == "consumer" else None, config=scfg)
        except BilevelInfeasible as exc:
            rec.update(status="infeasible", error=str(exc))
            return rec
        delta = solution.delta
        status = "budget_exhausted" if solution.status == "budget_exhausted" else "ok"
    try:
        disp, du = clear_market(network, load, delta, scfg)
    except InfeasibleMarket as exc:
        rec.update(status="infeasible", error=str(exc))
        return rec
    ledger = stakeholder_ledger(disp, du, network, load, delta)
    V0, Pi0 = baseline["V"], baseline["Pi"]
    probe = None
    if mode == "consumer" and alpha > 0:
        probe = probe_boundary(network, load, delta, config.probe_eps, build_box_with_balance(alpha, load.d_flex))
    mis = classify_alignment(delta, V0, disp.system_cost, Pi0, ledger.flex_cost, load.total, probe if probe is not None else False, config.align_tol)
    rec.update(
        status=status,
        normalizer=load.total,
        delta=[float(x) for x in delta],
        V=disp.system_cost,
        Pi=ledger.flex_cost,
        V0=V0,
        Pi0=Pi0,
        misaligned=mis.misaligned,
        boundary=mis.boundary,
        clipped=mis.clipped,
        lambda_dot_delta=float(du.lam @ delta),
        ledger=ledger.as_dict(),
        conservation_residual=ledger.conservation_residual(),
        p=disp.p.tolist(),
        marginal=marginal_flags(disp, du, network).tolist(),
    )
    if solution is not None:
        rec.update(nodes=solution.nodes, gap=solution.gap, max_leaf_residual=solution.max_leaf_residual)
    return rec


def _hour_task(args) -> list[dict]:
    hour, network, load, todo, config, baseline = args
    out = []
    if baseline is None:
        baseline = baseline_record(hour, network, load, config)
        out.append(baseline)
    for mode, alpha in todo:
        out.append(run_hour(hour, network, load, mode, alpha, config, baseline))
    return out


# -- persistence -----------------------------------------------------------------


def record_key(rec: dict) -> tuple:
    return (int(rec["hour"]), str(rec["mode"]), round(float(rec["alpha"]), 9))


def _valid(rec) -> bool:
    return isinstance(rec, dict) and all(k in rec for k in ("hour", "mode", "alpha", "status"))


def load_results(path, quarantine=None) -> list[dict]:
    """Read a results file. Corrupt lines are moved to ``quarantine`` with a warning.

    When corrupt lines are found the results file is rewritten with the
    remaining lines unchanged byte for byte.
    """
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_bytes().split(b"\n")
    good, bad, records = [], [], []
    for line in raw:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError):
            rec = None
        if _valid(rec):
            good.append(line)
            records.append(rec)
        else:
            bad.append(line)
    if bad:
        quarantine = Path(quarantine) if quarantine else path.with_name(QUARANTINE_FILE)
        logger.warning("%d corrupt record(s) in %s moved to %s", len(bad), path, quarantine)
        with open(quarantine, "ab") as fh:
            for line in bad:
                fh.write(line + b"\n")
        atomic_write_bytes(path, b"".join(line + b"\n" for line in good))
    return records


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


class ResultSink:
    """Single writer appending whole records, each followed by a newline and fsync."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, records):
        if not records:
            return
        payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        with open(self.path, "a") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())


# -- batch run -------------------------------------------------------------------


@dataclass
class RunSummary:
    results_path: str
    hours: int
    written: int
    skipped: int
    infeasible: int
    budget_exhausted: int


def run(dataset, config: RunConfig, out_dir=None) -> RunSummary:
    """Run every missing ``(hour, mode, alpha)`` record; completed ones are skipped."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / config.results_file
    existing = load_results(path, out_dir / QUARANTINE_FILE)
    done = {record_key(r): r for r in existing}
    flex = placement_vector(dataset.network, config.placements)
    wanted = [(m, a) for m in config.modes for a in config.alphas if m != "none"]
    if "none" in config.modes:
        wanted = [("none", 0.0)] + wanted
    tasks = []
    skipped = 0
    for hour in hour_range(config, dataset.n_hours):
        base = done.get((hour, "none", 0.0))
        todo = [(m, a) for m, a in wanted if m != "none" and (hour, m, round(a, 9)) not in done]
        skipped += sum(1 for m, a in wanted if (hour, m, round(a, 9)) in done)
        if base is not None and not todo:
            continue
        net, load = dataset.hour_case(hour, flex)
        tasks.append((hour, net, load, todo, config, base))
    sink = ResultSink(path)
    written = infeasible = budget = 0

    def consume(records):
        nonlocal written, infeasible, budget
        sink.write(records)
        written += len(records)
        infeasible += sum(r["status"] == "infeasible" for r in records)
        budget += sum(r["status"] == "budget_exhausted" for r in records)

    workers = max(int(config.workers), 1)
    if workers == 1 or len(tasks) <= 1:
        for t in tasks:
            consume(_hour_task(t))
    else:
        # map keeps submission order, so the file stays hour-sorted
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for records in pool.map(_hour_task, tasks):
                consume(records)
    return RunSummary(str(path), len(tasks), written, skipped, infeasible, budget)


# -- aggregation -----------------------------------------------------------------


@dataclass
class StakeholderChange:
    stakeholder: str
    baseline_usd: float
    shifted_usd: float

    @property
    def usd_change(self) -> float:
        return self.shifted_usd - self.baseline_usd

    @property
    def pct_change(self) -> float:
        if self.baseline_usd == 0:
            return 0.0 if self.usd_change == 0 else float("nan")
        return 100.0 * self.usd_change / abs(self.baseline_usd)


@dataclass
class ScenarioAggregate:
    mode: str
    alpha: float
    solved_hours: int
    misaligned_hours: int
    infeasible_hours: list
    budget_exhausted_hours: list
    changes: list

    @property
    def misalign_pct(self) -> float:
        return 100.0 * self.misaligned_hours / self.solved_hours if self.solved_hours else float("nan")


@dataclass
class AggregateReport:
    scenarios: list
    baseline_totals: dict

    def to_rows(self) -> list[dict]:
        rows = []
        for sc in self.scenarios:
            for ch in sc.changes:
                rows.append(
                    {
                        "stakeholder": ch.stakeholder,
                        "alpha": sc.alpha,
                        "mode": sc.mode,
                        "usd_change": ch.usd_change,
                        "pct_change": ch.pct_change,
                        "misalign_pct": sc.misalign_pct if sc.mode == "consumer" else None,
                    }
                )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.to_rows():
            row = dict(row)
            for key in ("usd_change", "pct_change", "misalign_pct"):
                row[key] = "" if row[key] is None else f"{row[key]:.6f}"
            row["alpha"] = f"{row['alpha']:g}"
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "baseline_totals": self.baseline_totals,
            "scenarios": [
                {
                    "mode": sc.mode,
                    "alpha": sc.alpha,
                    "solved_hours": sc.solved_hours,
                    "misaligned_hours": sc.misaligned_hours,
                    "misalign_pct": sc.misalign_pct,
                    "infeasible_hours": sc.infeasible_hours,
                    "budget_exhausted_hours": sc.budget_exhausted_hours,
                }
                for sc in self.scenarios
            ],
        }


def aggregate(records) -> AggregateReport:
    """Totals over solved hours, with percentages against the stored baseline records."""
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    baselines = {r["hour"]: r for r in records if r["mode"] == "none" and r["status"] == "ok"}
    if not baselines:
        raise ValueError("no solved baseline hours")
    groups: dict = {}
    for r in records:
        if r["mode"] == "none":
            continue
        groups.setdefault((r["mode"], float(r["alpha"])), []).append(r)
    base_totals = {name: sum(b["ledger"][key] for b in baselines.values()) for name, key in STAKEHOLDERS}
    scenarios = []
    for (mode, alpha), recs in sorted(groups.items(), key=lambda kv: (MODES.index(kv[0][0]), kv[0][1])):
        solved = [r for r in recs if r["status"] == "ok" and r["hour"] in baselines]
        changes = []
        for name, key in STAKEHOLDERS:
            b = sum(baselines[r["hour"]]["ledger"][key] for r in solved)
            s = sum(r["ledger"][key] for r in solved)
            changes.append(StakeholderChange(name, b, s))
        scenarios.append(
            ScenarioAggregate(
                mode,
                alpha,
                len(solved),
                sum(bool(r.get("misaligned")) for r in solved),
                sorted(r["hour"] for r in recs if r["status"] == "infeasible"),
                sorted(r["hour"] for r in recs if r["status"] == "budget_exhausted"),
                changes,
            )
        )
    if not any(sc.solved_hours for sc in scenarios) and scenarios:
        raise ValueError("no solved shifted hours")
    return AggregateReport(scenarios, base_totals)


def write_report(records, path) -> AggregateReport:
    report = aggregate(records)
    atomic_write_text(path, report.to_csv())
    return report
