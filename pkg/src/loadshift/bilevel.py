"""Price-anticipatory load shifting solved as an LP with complementarity constraints.

The market's optimality conditions replace the lower level: primal
feasibility, dual feasibility and pairwise complementary slackness between
each inequality and its multiplier. Every node of the branch-and-bound is an
LP in which some pairs are resolved by fixing either the slack or the
multiplier to zero through variable bounds.

Where complementarity holds, strong duality gives

    lam'(d_flex + delta) = c'p + Fmax'(mu_plus + mu_minus) + pmax' pi_plus - lam' d_base

which is linear, so the consumer objective is minimized in that form.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dcopf import InfeasibleMarket, MarketStructure, clear_market
from .flexibility import FlexibilitySet, contains, grid_points
from .grid import LoadProfile, Network
from .lp import DEFAULT_CONFIG, INFEASIBLE, OPTIMAL, UNBOUNDED, LinearProgram, SolverConfig, optimize_over_face, solve_lp
from .regimes import extract_active_set

logger = logging.getLogger(__name__)

CONSUMER = "consumer"
SYSTEM = "system"

FREE, SLACK_SIDE, MULTIPLIER_SIDE = 0, 1, 2

DEFAULT_EPSILON = 1e-3
DEFAULT_NODE_BUDGET = 200_000
TIE_BREAKS = ("min_v", "max_v")
TIE_TOL = 1e-7


class BilevelInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class Pair:
    kind: str  # line_upper, line_lower, gen_upper, gen_lower
    index: int
    var: int  # primal variable carrying the slack
    bound: float  # value of ``var`` when the slack is zero
    multiplier: int


@dataclass
class ComplementaritySystem:
    network: Network
    load: LoadProfile
    flexset: FlexibilitySet
    lp: LinearProgram
    pairs: list[Pair]
    slices: dict
    consumer_objective: np.ndarray
    system_objective: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.lp.n_vars

    def part(self, x, name) -> np.ndarray:
        return x[self.slices[name]]

    def slacks(self, x) -> np.ndarray:
        out = np.empty(len(self.pairs))
        for i, pr in enumerate(self.pairs):
            if pr.kind in ("line_upper", "gen_upper"):
                out[i] = pr.bound - x[pr.var]
            else:
                out[i] = x[pr.var] - pr.bound
        return out

    def products(self, x) -> np.ndarray:
        mult = x[[pr.multiplier for pr in self.pairs]] if self.pairs else np.zeros(0)
        return np.maximum(self.slacks(x), 0.0) * np.maximum(mult, 0.0)

    def strong_duality_residual(self, x) -> float:
        """|primal cost - dual objective| at ``x``."""
        S = MarketStructure.of(self.network)
        fmax = np.where(np.isfinite(S.fmax), S.fmax, 0.0)
        p = self.part(x, "p")
        lam = self.part(x, "lam")
        delta = self.part(x, "delta")
        dual_obj = lam @ (self.load.d + delta) - fmax @ (self.part(x, "mu_plus") + self.part(x, "mu_minus")) - S.pmax @ self.part(x, "pi_plus")
        return float(abs(S.c @ p - dual_obj))


def build_single_level(network: Network, load: LoadProfile, flexset: FlexibilitySet) -> ComplementaritySystem:
    load.check(network)
    if flexset.dim != network.n_buses:
        raise ValueError(f"flexibility set has dimension {flexset.dim}, network has {network.n_buses} buses")
    S = MarketStructure.of(network)
    n, m, k = S.sizes
    sizes = [("delta", n), ("p", k), ("theta", n), ("f", m), ("lam", n), ("eta", m), ("mu_plus", m), ("mu_minus", m), ("pi_plus", k), ("pi_minus", k), ("nu", 1)]
    slices, start = {}, 0
    for name, size in sizes:
        slices[name] = slice(start, start + size)
        start += size
    N = start
    BA = S.B @ S.A
    rows, lo, hi, names = [], [], [], []

    def add(block: dict, rhs_lo, rhs_hi, label):
        r = next(iter(block.values())).shape[0]
        mat = np.zeros((r, N))
        for name, sub in block.items():
            mat[:, slices[name]] = sub
        rows.append(mat)
        lo.append(np.broadcast_to(rhs_lo, (r,)))
        hi.append(np.broadcast_to(rhs_hi, (r,)))
        names.extend(f"{label}[{i}]" for i in range(r))

    e_ref = np.zeros((n, 1))
    e_ref[S.ref, 0] = 1.0
    add({"f": np.eye(m), "theta": -BA}, 0.0, 0.0, "flow")
    add({"p": S.G, "f": -S.A.T, "delta": -np.eye(n)}, load.d, load.d, "balance")
    ref_row = np.zeros((1, n))
    ref_row[0, S.ref] = 1.0
    add({"theta": ref_row}, 0.0, 0.0, "ref")
    add({"lam": S.G.T, "pi_plus": -np.eye(k), "pi_minus": np.eye(k)}, S.c, S.c, "stat_p")
    add({"eta": -BA.T, "nu": e_ref}, 0.0, 0.0, "stat_theta")
    add({"lam": S.A, "eta": np.eye(m), "mu_plus": np.eye(m), "mu_minus": -np.eye(m)}, 0.0, 0.0, "stat_f")
    add({"delta": np.ones((1, n))}, 0.0, 0.0, "shift_balance")

    lb = np.full(N, -np.inf)
    ub = np.full(N, np.inf)
    if flexset.box is not None:
        lb[slices["delta"]] = -flexset.box
        ub[slices["delta"]] = flexset.box
    else:
        add({"delta": flexset.T}, -np.inf, flexset.q, "flex")
    lb[slices["p"]] = 0.0
    ub[slices["p"]] = S.pmax
    lb[slices["f"]] = -S.fmax
    ub[slices["f"]] = S.fmax
    for name in ("mu_plus", "mu_minus", "pi_plus", "pi_minus"):
        lb[slices[name]] = 0.0
    finite_f = np.isfinite(S.fmax)
    ub[slices["mu_plus"]] = np.where(finite_f, np.inf, 0.0)
    ub[slices["mu_minus"]] = np.where(finite_f, np.inf, 0.0)
    ub[slices["pi_plus"]] = np.where(np.isfinite(S.pmax), np.inf, 0.0)

    fmax0 = np.where(finite_f, S.fmax, 0.0)
    pmax0 = np.where(np.isfinite(S.pmax), S.pmax, 0.0)
    consumer = np.zeros(N)
    consumer[slices["p"]] = S.c
    consumer[slices["mu_plus"]] = fmax0
    consumer[slices["mu_minus"]] = fmax0
    consumer[slices["pi_plus"]] = pmax0
    consumer[slices["lam"]] = -load.d_base
    system = np.zeros(N)
    system[slices["p"]] = S.c

    pairs = []
    f0, p0 = slices["f"].start, slices["p"].start
    for ell in range(m):
        if not finite_f[ell]:
            continue
        pairs.append(Pair("line_upper", ell, f0 + ell, S.fmax[ell], slices["mu_plus"].start + ell))
        pairs.append(Pair("line_lower", ell, f0 + ell, -S.fmax[ell], slices["mu_minus"].start + ell))
    for g in range(k):
        if np.isfinite(S.pmax[g]):
            pairs.append(Pair("gen_upper", g, p0 + g, S.pmax[g], slices["pi_plus"].start + g))
        pairs.append(Pair("gen_lower", g, p0 + g, 0.0, slices["pi_minus"].start + g))

    var_names = [f"{name}[{i}]" for name, size in sizes for i in range(size)]
    lp = LinearProgram(consumer, np.vstack(rows), np.concatenate(lo), np.concatenate(hi), lb, ub, row_names=names, col_names=var_names)
    return ComplementaritySystem(network, load, flexset, lp, pairs, slices, consumer, system)


@dataclass
class BnBNode:
    status: np.ndarray
    bound: float
    depth: int


@dataclass
class BilevelSolution:
    delta: np.ndarray
    Pi: float
    V: float
    lam: np.ndarray
    gap: float
    nodes: int
    mode: str
    status: str = "optimal"
    lower_bound: float = float("nan")
    max_leaf_residual: float = 0.0
    bound_violations: int = 0
    leaves: int = 0

    def to_dict(self, normalizer: float | None = None) -> dict:
        out = {
            "mode": self.mode,
            "status": self.status,
            "delta": [float(x) for x in self.delta],
            "Pi_usd": self.Pi,
            "V_usd": self.V,
            "lambda": [float(x) for x in self.lam],
            "gap_usd": self.gap,
            "nodes": self.nodes,
        }
        if normalizer:
            out["Pi_normalized"] = self.Pi / normalizer
            out["V_normalized"] = self.V / normalizer
        return out


@dataclass
class _SearchResult:
    x: np.ndarray | None
    value: float
    lower_bound: float
    nodes: int
    status: str
    max_leaf_residual: float
    bound_violations: int
    leaves: int
    incumbent_delta: np.ndarray | None = None


def _fix(system: ComplementaritySystem, status: np.ndarray, lb: np.ndarray, ub: np.ndarray):
    for i, pr in enumerate(system.pairs):
        s = status[i]
        if s == SLACK_SIDE:
            if pr.kind in ("line_upper", "gen_upper"):
                lb[pr.var] = max(lb[pr.var], pr.bound)
            else:
                ub[pr.var] = min(ub[pr.var], pr.bound)
        elif s == MULTIPLIER_SIDE:
            ub[pr.multiplier] = 0.0


def _partner(system: ComplementaritySystem):
    """Map each pair to the opposite-limit pair on the same line or generator."""
    idx = {(pr.kind, pr.index): i for i, pr in enumerate(system.pairs)}
    swap = {"line_upper": "line_lower", "line_lower": "line_upper", "gen_upper": "gen_lower", "gen_lower": "gen_upper"}
    out = {}
    for i, pr in enumerate(system.pairs):
        j = idx.get((swap[pr.kind], pr.index))
        if j is not None:
            out[i] = j
    return out


def _branch_status(system, status, i, side, partners):
    child = status.copy()
    child[i] = side
    if side == SLACK_SIDE and i in partners:
        pr = system.pairs[i]
        # the opposite limit is then slack by the full range, so its multiplier vanishes
        width = abs(pr.bound - system.pairs[partners[i]].bound)
        if width > 0:
            j = partners[i]
            if child[j] == SLACK_SIDE:
                return None
            child[j] = MULTIPLIER_SIDE
    return child


def _search(system: ComplementaritySystem, objective: np.ndarray, extra_rows=None, epsilon=DEFAULT_EPSILON, node_budget=DEFAULT_NODE_BUDGET, config: SolverConfig = DEFAULT_CONFIG, heuristic=None, incumbent=None) -> _SearchResult:
    lp = LinearProgram(system.lp.c, system.lp.A, system.lp.row_lower, system.lp.row_upper, system.lp.lb, system.lp.ub, row_names=system.lp.row_names, col_names=system.lp.col_names)
    lp.c = np.asarray(objective, dtype=float)
    if extra_rows is not None:
        A_x, lo_x, hi_x = extra_rows
        lp = lp.add_rows(A_x, lo_x, hi_x)
    npairs = len(system.pairs)
    partners = _partner(system)
    best_val, best_x = (np.inf, None) if incumbent is None else incumbent
    counter = itertools.count()
    root = BnBNode(np.zeros(npairs, dtype=np.int8), -np.inf, 0)
    heap = [(root.bound, next(counter), root)]
    nodes = 0
    max_res = 0.0
    violations = 0
    leaves = 0
    comp_tol = config.comp_tol
    status_out = "optimal"
    while heap:
        bound, _, node = heap[0]
        if bound >= best_val - epsilon:
            break
        if nodes >= node_budget:
            status_out = "budget_exhausted"
            break
        heapq.heappop(heap)
        nodes += 1
        lb, ub = lp.lb.copy(), lp.ub.copy()
        _fix(system, node.status, lb, ub)
        if np.any(lb > ub):
            continue
        sol = solve_lp(lp.with_bounds(lb, ub), config)
        if sol.status == INFEASIBLE:
            continue
        if sol.status == UNBOUNDED:
            free = np.flatnonzero(node.status == FREE)
            if free.size == 0:
                logger.warning("fully fixed node reported unbounded; skipped")
                continue
            i = int(free[0])
            for side in (SLACK_SIDE, MULTIPLIER_SIDE):
                child = _branch_status(system, node.status, i, side, partners)
                if child is not None:
                    heapq.heappush(heap, (-np.inf, next(counter), BnBNode(child, -np.inf, node.depth + 1)))
            continue
        if sol.status != OPTIMAL:
            logger.warning("node LP ended with status %s; node dropped", sol.status)
            status_out = "numerical_error"
            continue
        value = sol.objective
        if value < node.bound - 1e-9 * (1 + abs(node.bound)):
            violations += 1
        if heuristic is not None:
            h = heuristic(sol.x)
            if h is not None and h[0] < best_val:
                best_val, best_x, res = h
                max_res = max(max_res, res)
        if value >= best_val - epsilon:
            continue
        prods = system.products(sol.x)
        prods[node.status != FREE] = 0.0
        if npairs == 0 or prods.max() <= comp_tol:
            leaves += 1
            max_res = max(max_res, system.strong_duality_residual(sol.x))
            if value < best_val:
                best_val, best_x = value, sol.x
            continue
        i = int(np.argmax(prods))
        for side in (SLACK_SIDE, MULTIPLIER_SIDE):
            child = _branch_status(system, node.status, i, side, partners)
            if child is not None:
                heapq.heappush(heap, (value, next(counter), BnBNode(child, value, node.depth + 1)))
    open_bound = min((b for b, _, _ in heap), default=np.inf)
    lower = min(open_bound, best_val)
    return _SearchResult(best_x, best_val, lower, nodes, status_out, max_res, violations, leaves)


def solve_bilevel(system: ComplementaritySystem, mode: str = CONSUMER, epsilon: float = DEFAULT_EPSILON, node_budget: int = DEFAULT_NODE_BUDGET, tie_break: str | None = None, config: SolverConfig = DEFAULT_CONFIG, sequential: bool = True, use_heuristic: bool = True) -> BilevelSolution:
    """Optimal shift for the flexible consumer (``mode="consumer"``) or the operator (``mode="system"``).

    Raises :class:`BilevelInfeasible` when the market cannot clear at zero shift.
    """
    if mode not in (CONSUMER, SYSTEM):
        raise ValueError(f"unknown mode {mode!r}")
    if tie_break is not None and tie_break not in TIE_BREAKS:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    if not sequential:
        raise NotImplementedError("only the sequential tree search is available")
    net, load = system.network, system.load
    n = net.n_buses
    try:
        d0, du0 = clear_market(net, load, np.zeros(n), config)
    except InfeasibleMarket as exc:
        raise BilevelInfeasible(f"market infeasible at zero shift: {exc}") from exc
    pi0 = float(du0.lam @ load.d_flex)

    if mode == SYSTEM:
        sl = system.slices
        keep = np.zeros(system.n_vars, dtype=bool)
        for name in ("delta", "p", "theta", "f"):
            keep[sl[name]] = True
        primal_rows = np.all(system.lp.A[:, ~keep] == 0, axis=1)
        lp = LinearProgram(system.system_objective[keep], system.lp.A[np.ix_(primal_rows, keep)], system.lp.row_lower[primal_rows], system.lp.row_upper[primal_rows], system.lp.lb[keep], system.lp.ub[keep])
        sol = solve_lp(lp, config)
        if not sol.optimal:
            raise BilevelInfeasible(f"system-optimal shift LP ended with status {sol.status}")
        delta = sol.x[sl["delta"]]
        disp, du = clear_market(net, load, delta, config)
        return BilevelSolution(delta, float(du.lam @ (load.d_flex + delta)), disp.system_cost, du.lam, 0.0, 1, SYSTEM, lower_bound=sol.objective)
    cache = {}

    def heuristic(x):
        delta = np.clip(system.part(x, "delta"), -np.inf, np.inf)
        if not contains(system.flexset, delta, 1e-6):
            return None
        key = tuple(np.round(delta, 6))
        if key in cache:
            return None
        try:
            disp, du = clear_market(net, load, delta, config)
        except InfeasibleMarket:
            cache[key] = None
            return None
        val = float(du.lam @ (load.d_flex + delta))
        cache[key] = val
        return val, ("heuristic", delta), _clearing_residual(net, load, delta, disp, du)

    incumbent = (pi0, ("heuristic", np.zeros(n))) if use_heuristic else None
    res = _search(system, system.consumer_objective, epsilon=epsilon, node_budget=node_budget, config=config, heuristic=heuristic if use_heuristic else None, incumbent=incumbent)
    delta = _delta_of(system, res.x)
    if tie_break is not None and res.x is not None:
        sign = 1.0 if tie_break == "min_v" else -1.0
        # ties only: the epsilon slack would let the second search trade consumer cost for system cost
        extra = (system.consumer_objective[None, :], -np.inf, res.value + TIE_TOL * (1.0 + abs(res.value)))
        res2 = _search(system, sign * system.system_objective, extra_rows=extra, epsilon=epsilon, node_budget=node_budget, config=config)
        if res2.x is not None:
            x = _polish(system, res2.x, sign * system.system_objective, res.value, config)
            delta = _delta_of(system, x)
    disp, du = clear_market(net, load, delta, config)
    pi = float(du.lam @ (load.d_flex + delta))
    gap = max(pi - res.lower_bound, 0.0) if np.isfinite(res.lower_bound) else np.inf
    return BilevelSolution(
        delta,
        pi,
        disp.system_cost,
        du.lam,
        gap,
        res.nodes,
        CONSUMER,
        status=res.status,
        lower_bound=res.lower_bound,
        max_leaf_residual=res.max_leaf_residual,
        bound_violations=res.bound_violations,
        leaves=res.leaves,
    )


def _polish(system: ComplementaritySystem, x, secondary, target: float, config: SolverConfig):
    """Snap ``x`` to a vertex of its complementarity piece that is exactly consumer-optimal.

    The piece is fixed from the pattern at ``x``; the consumer objective is
    minimized over it, then ``secondary`` over the resulting optimal face.
    Returns ``x`` unchanged if the piece does not reach ``target``.
    """
    slacks = system.slacks(x)
    status = np.where(slacks <= 1e-6, SLACK_SIDE, MULTIPLIER_SIDE).astype(np.int8)
    lb, ub = system.lp.lb.copy(), system.lp.ub.copy()
    _fix(system, status, lb, ub)
    if np.any(lb > ub):
        return x
    lp = system.lp.with_bounds(lb, ub)
    first = solve_lp(lp, config)
    if not first.optimal or first.objective > target + config.duality_tol * (1.0 + abs(target)):
        return x
    second = optimize_over_face(lp, first.objective, secondary, config)
    return second.x if second.optimal else first.x


def _clearing_residual(net, load, delta, disp, du) -> float:
    fmax = np.where(np.isfinite(net.line_capacities), net.line_capacities, 0.0)
    dual_obj = du.lam @ (load.d + delta) - fmax @ (du.mu_plus + du.mu_minus) - net.gen_capacities @ du.pi_plus
    return float(abs(disp.system_cost - dual_obj))


def _delta_of(system, x):
    if x is None:
        return np.zeros(system.network.n_buses)
    if isinstance(x, tuple):
        return np.asarray(x[1], dtype=float)
    return np.asarray(system.part(x, "delta"), dtype=float).copy()


# -- brute-force oracle --------------------------------------------------------


@dataclass
class LandscapeRow:
    delta: np.ndarray
    V: float
    Pi: float
    active_set: object
    feasible: bool = True


@dataclass
class OracleResult:
    argmin_pi: np.ndarray
    argmin_v: np.ndarray
    min_pi: float
    min_v: float
    rows: list[LandscapeRow] = field(default_factory=list)


def _argmin(rows, key, tol=1e-6):
    feas = [r for r in rows if r.feasible]
    if not feas:
        raise BilevelInfeasible("no feasible lattice point")
    best = min(key(r) for r in feas)
    ties = [r for r in feas if key(r) <= best + tol]
    return min(ties, key=lambda r: tuple(r.delta))


def brute_force_oracle(network: Network, load: LoadProfile, flexset: FlexibilitySet, step: float, config: SolverConfig = DEFAULT_CONFIG) -> OracleResult:
    """Clear the market on every lattice point; ties go to the lexicographically smallest shift."""
    rows = []
    for delta in grid_points(flexset, step):
        try:
            disp, du = clear_market(network, load, delta, config)
        except InfeasibleMarket:
            rows.append(LandscapeRow(delta, np.nan, np.nan, None, False))
            continue
        pi = float(du.lam @ (load.d_flex + delta))
        rows.append(LandscapeRow(delta, disp.system_cost, pi, extract_active_set(disp, network)))
    r_pi = _argmin(rows, lambda r: r.Pi)
    r_v = _argmin(rows, lambda r: r.V)
    return OracleResult(r_pi.delta, r_v.delta, r_pi.Pi, r_v.V, rows)
