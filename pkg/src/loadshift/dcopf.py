"""DC-OPF market clearing with consumer-favorable LMP selection.

Sign conventions (used by every module in the package)::

    min  c'p
    s.t. f - B A theta = 0            (eta)
         G p - A' f = d + delta       (lam, the LMPs, >= 0 in normal operation)
         theta[ref] = 0               (nu)
         -Fmax <= f <= Fmax           (mu_minus, mu_plus >= 0)
         0 <= p <= pmax               (pi_minus, pi_plus >= 0)

and the dual feasibility (stationarity) rows

    G' lam - pi_plus + pi_minus = c
    -(B A)' eta + nu e_ref      = 0
    eta + A lam + mu_plus - mu_minus = 0

with dual objective ``lam'(d + delta) - Fmax'(mu_plus + mu_minus) - pmax' pi_plus``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import LoadProfile, Network, build_incidence, generator_map
from .lp import DEFAULT_CONFIG, LinearProgram, SolverConfig, optimize_over_face, solve_lp


class InfeasibleMarket(RuntimeError):
    """The DC-OPF has no feasible dispatch for the requested load."""

    def __init__(self, total_load, total_capacity, status="infeasible"):
        self.total_load = float(total_load)
        self.total_capacity = float(total_capacity)
        self.status = status
        if total_load > total_capacity:
            msg = f"load {total_load:.6g} MW exceeds generation capacity {total_capacity:.6g} MW"
        else:
            msg = (
                f"load {total_load:.6g} MW is within capacity {total_capacity:.6g} MW "
                "but not deliverable through the network"
            )
        if status != "infeasible":
            msg += f" (solver status {status})"
        super().__init__(msg)

    def aggregate(self) -> dict:
        return {"total_load_mw": self.total_load, "total_capacity_mw": self.total_capacity}


@dataclass
class DispatchSolution:
    p: np.ndarray
    theta: np.ndarray
    f: np.ndarray
    system_cost: float
    reduced_costs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DualBundle:
    lam: np.ndarray
    eta: np.ndarray
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    pi_plus: np.ndarray
    pi_minus: np.ndarray
    nu: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.lam, self.eta, self.mu_plus, self.mu_minus, self.pi_plus, self.pi_minus, [self.nu]]
        )


@dataclass
class Ledger:
    flex_cost: float
    inflex_cost: float
    gen_profit: float
    system_cost: float
    congestion_rent: float
    gen_profit_by_unit: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "flex_cost": self.flex_cost,
            "inflex_cost": self.inflex_cost,
            "gen_profit": self.gen_profit,
            "system_cost": self.system_cost,
            "congestion_rent": self.congestion_rent,
        }

    def conservation_residual(self) -> float:
        return abs(self.flex_cost + self.inflex_cost - self.system_cost - self.gen_profit - self.congestion_rent)


@dataclass
class MarketStructure:
    """Matrices shared by the primal, dual and single-level formulations."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    c: np.ndarray
    pmax: np.ndarray
    fmax: np.ndarray
    ref: int

    @classmethod
    def of(cls, network: Network) -> "MarketStructure":
        A, B = build_incidence(network)
        return cls(A, B, generator_map(network), network.gen_costs, network.gen_capacities, network.line_capacities, network.ref_index)

    @property
    def sizes(self) -> tuple[int, int, int]:
        """Buses, lines, generators."""
        return self.G.shape[0], self.A.shape[0], self.G.shape[1]


def _shift(network: Network, delta) -> np.ndarray:
    if delta is None:
        return np.zeros(network.n_buses)
    delta = np.asarray(delta, dtype=float).ravel()
    if delta.size != network.n_buses:
        raise ValueError(f"shift has length {delta.size}, network has {network.n_buses} buses")
    return delta


def build_dcopf(network: Network, load: LoadProfile, delta=None) -> LinearProgram:
    """Primal DC-OPF with variables ``[p, theta, f]``.

    Flow and dispatch limits are variable bounds, so their multipliers are the
    reduced costs of ``f`` and ``p``; the three row groups are flow definition,
    nodal balance and the reference angle.
    """
    load.check(network)
    delta = _shift(network, delta)
    S = MarketStructure.of(network)
    n, m, k = S.sizes
    BA = S.B @ S.A
    nv = k + n + m
    c = np.concatenate([S.c, np.zeros(n + m)])
    rows_flow = np.hstack([np.zeros((m, k)), -BA, np.eye(m)])
    rows_bal = np.hstack([S.G, np.zeros((n, n)), -S.A.T])
    row_ref = np.zeros((1, nv))
    row_ref[0, k + S.ref] = 1.0
    Amat = np.vstack([rows_flow, rows_bal, row_ref])
    rhs = np.concatenate([np.zeros(m), load.d + delta, [0.0]])
    lb = np.concatenate([np.zeros(k), np.full(n, -np.inf), -S.fmax])
    ub = np.concatenate([S.pmax, np.full(n, np.inf), S.fmax])
    cols = [f"p[{g.id}]" for g in network.generators] + [f"theta[{b}]" for b in network.buses] + [f"f[{lbl}]" for lbl in network.line_labels()]
    rows = [f"flow[{lbl}]" for lbl in network.line_labels()] + [f"balance[{b}]" for b in network.buses] + ["ref"]
    return LinearProgram(c, Amat, rhs, rhs, lb, ub, row_names=rows, col_names=cols)


def build_dual_lp(network: Network, load: LoadProfile, delta=None) -> LinearProgram:
    """Dual of the DC-OPF as a minimization of the negated dual objective.

    Variable order: ``[lam (n), eta (m), mu_plus (m), mu_minus (m), pi_plus (k), pi_minus (k), nu]``.
    """
    load.check(network)
    delta = _shift(network, delta)
    S = MarketStructure.of(network)
    n, m, k = S.sizes
    BA = S.B @ S.A
    finite_f = np.where(np.isfinite(S.fmax), S.fmax, 0.0)
    c = np.concatenate([-(load.d + delta), np.zeros(m), finite_f, finite_f, S.pmax, np.zeros(k), [0.0]])
    Z = np.zeros
    e_ref = Z((n, 1))
    e_ref[S.ref, 0] = 1.0
    stat_p = np.hstack([S.G.T, Z((k, m)), Z((k, m)), Z((k, m)), -np.eye(k), np.eye(k), Z((k, 1))])
    stat_t = np.hstack([Z((n, n)), -BA.T, Z((n, m)), Z((n, m)), Z((n, k)), Z((n, k)), e_ref])
    stat_f = np.hstack([S.A, np.eye(m), np.eye(m), -np.eye(m), Z((m, k)), Z((m, k)), Z((m, 1))])
    Amat = np.vstack([stat_p, stat_t, stat_f])
    rhs = np.concatenate([S.c, np.zeros(n + m)])
    inf = np.inf
    mu_ub = np.where(np.isfinite(S.fmax), inf, 0.0)
    lb = np.concatenate([np.full(n + m, -inf), np.zeros(2 * m + 2 * k), [-inf]])
    ub = np.concatenate([np.full(n + m, inf), mu_ub, mu_ub, np.full(2 * k, inf), [inf]])
    return LinearProgram(c, Amat, rhs, rhs, lb, ub)


def split_duals(vec, n: int, m: int, k: int) -> DualBundle:
    vec = np.asarray(vec, dtype=float)
    i = 0
    parts = []
    for size in (n, m, m, m, k, k):
        parts.append(vec[i : i + size].copy())
        i += size
    return DualBundle(*parts, float(vec[i]))


def dual_stationarity_residual(network: Network, duals: DualBundle) -> float:
    S = MarketStructure.of(network)
    r_p = S.G.T @ duals.lam - duals.pi_plus + duals.pi_minus - S.c
    e = np.zeros(S.G.shape[0])
    e[S.ref] = duals.nu
    r_t = -(S.B @ S.A).T @ duals.eta + e
    r_f = duals.eta + S.A @ duals.lam + duals.mu_plus - duals.mu_minus
    neg = min(0.0, duals.mu_plus.min(initial=0), duals.mu_minus.min(initial=0), duals.pi_plus.min(initial=0), duals.pi_minus.min(initial=0))
    return float(max(np.abs(r_p).max(initial=0), np.abs(r_t).max(initial=0), np.abs(r_f).max(initial=0), -neg))


def complementarity_products(network: Network, dispatch: DispatchSolution, duals: DualBundle) -> np.ndarray:
    """Slack-times-multiplier for each inequality (line upper, line lower, gen upper, gen lower)."""
    fmax = network.line_capacities
    pmax = network.gen_capacities
    return np.concatenate(
        [
            (fmax - dispatch.f) * duals.mu_plus,
            (dispatch.f + fmax) * duals.mu_minus,
            (pmax - dispatch.p) * duals.pi_plus,
            dispatch.p * duals.pi_minus,
        ]
    )


def _infeasible(network: Network, load: LoadProfile, delta, status="infeasible"):
    return InfeasibleMarket(float((load.d + delta).sum()), float(network.gen_capacities.sum()), status)


def dispatch_only(network: Network, load: LoadProfile, delta=None, config: SolverConfig = DEFAULT_CONFIG) -> DispatchSolution:
    delta = _shift(network, delta)
    lp = build_dcopf(network, load, delta)
    sol = solve_lp(lp, config)
    if not sol.optimal:
        raise _infeasible(network, load, delta, sol.status)
    k, n = network.n_generators, network.n_buses
    x = sol.x
    return DispatchSolution(x[:k], x[k : k + n], x[k + n :], float(sol.objective), sol.reduced_costs)


def clear_market(network: Network, load: LoadProfile, delta=None, config: SolverConfig = DEFAULT_CONFIG, selection: str = "consumer") -> tuple[DispatchSolution, DualBundle]:
    """Clear the market at load ``d + delta``.

    Among all dual optimal solutions, the returned LMPs minimize the flexible
    consumer's payment ``lam'(d_flex + delta)`` (``selection="consumer"``); use
    ``selection="max"`` for the opposite extreme and ``selection="any"`` to
    take the first dual optimum found.
    """
    delta = _shift(network, delta)
    dispatch = dispatch_only(network, load, delta, config)
    n, m, k = network.n_buses, network.n_lines, network.n_generators
    dual_lp = build_dual_lp(network, load, delta)
    if selection == "any":
        sol = solve_lp(dual_lp, config)
    else:
        weight = np.zeros(dual_lp.n_vars)
        weight[:n] = load.d_flex + delta
        if selection == "max":
            weight = -weight
        elif selection != "consumer":
            raise ValueError(f"unknown selection {selection!r}")
        sol = _select_on_complementary_face(dual_lp, network, dispatch, weight, config)
        if sol is None:
            sol = optimize_over_face(dual_lp, -dispatch.system_cost, weight, config)
    if not sol.optimal:
        raise _infeasible(network, load, delta, "dual_" + sol.status)
    return dispatch, split_duals(sol.x, n, m, k)


def _select_on_complementary_face(dual_lp: LinearProgram, network: Network, dispatch: DispatchSolution, weight, config: SolverConfig, tol: float = 1e-6):
    """Minimize ``weight`` over dual solutions complementary to ``dispatch``.

    Given an optimal dispatch, these are exactly the dual optima, so no
    objective tolerance is needed. Returns None if the restricted problem
    fails (e.g. a limit misread as slack), leaving the caller to fall back.
    """
    n, m, k = network.n_buses, network.n_lines, network.n_generators
    fmax, pmax = network.line_capacities, network.gen_capacities
    ub = dual_lp.ub.copy()
    o = n + m
    ub[o : o + m][fmax - dispatch.f > tol] = 0.0
    ub[o + m : o + 2 * m][dispatch.f + fmax > tol] = 0.0
    o += 2 * m
    ub[o : o + k][pmax - dispatch.p > tol] = 0.0
    ub[o + k : o + 2 * k][dispatch.p > tol] = 0.0
    restricted = replace(dual_lp.with_bounds(dual_lp.lb, ub), c=np.asarray(weight, dtype=float))
    sol = solve_lp(restricted, config)
    if not sol.optimal:
        return None
    dual_value = -float(dual_lp.c @ sol.x)
    if abs(dual_value - dispatch.system_cost) > config.duality_tol * (1.0 + abs(dispatch.system_cost)):
        return None
    return sol


def value_function(network: Network, load: LoadProfile, delta=None, config: SolverConfig = DEFAULT_CONFIG) -> float:
    return dispatch_only(network, load, delta, config).system_cost


def procurement_cost(lam, load: LoadProfile, delta=None) -> float:
    lam = np.asarray(lam, dtype=float)
    delta = np.zeros_like(lam) if delta is None else np.asarray(delta, dtype=float)
    if lam.shape != load.d_flex.shape or delta.shape != lam.shape:
        raise ValueError("price, load and shift vectors must have equal length")
    return float(lam @ (load.d_flex + delta))


def stakeholder_ledger(dispatch: DispatchSolution, duals: DualBundle, network: Network, load: LoadProfile, delta=None) -> Ledger:
    delta = _shift(network, delta)
    lam = duals.lam
    if lam.size != network.n_buses or dispatch.p.size != network.n_generators:
        raise ValueError("dispatch/duals do not match the network")
    gen_lam = lam[network.gen_bus_indices()]
    c = network.gen_costs
    by_unit = (gen_lam - c) * dispatch.p
    fmax = np.where(np.isfinite(network.line_capacities), network.line_capacities, 0.0)
    return Ledger(
        flex_cost=float(lam @ (load.d_flex + delta)),
        inflex_cost=float(lam @ load.d_base),
        gen_profit=float(by_unit.sum()),
        system_cost=float(c @ dispatch.p),
        congestion_rent=float(fmax @ (duals.mu_plus + duals.mu_minus)),
        gen_profit_by_unit=by_unit,
    )


def flow_congestion_rent(network: Network, dispatch: DispatchSolution, duals: DualBundle) -> float:
    """Sum over lines of (receiving price - sending price) * flow."""
    A, _ = build_incidence(network)
    return float(-(A @ duals.lam) @ dispatch.f)


def normalize(usd: float, load: LoadProfile) -> float:
    """USD per MWh of total nominal load."""
    return usd / load.total


def result_dict(network: Network, load: LoadProfile, delta, dispatch: DispatchSolution, duals: DualBundle) -> dict:
    delta = _shift(network, delta)
    ledger = stakeholder_ledger(dispatch, duals, network, load, delta)
    return {
        "delta": delta.tolist(),
        "V_usd": dispatch.system_cost,
        "V_normalized": normalize(dispatch.system_cost, load),
        "Pi_usd": ledger.flex_cost,
        "Pi_normalized": normalize(ledger.flex_cost, load),
        "lambda": duals.lam.tolist(),
        "p": dispatch.p.tolist(),
        "f": dispatch.f.tolist(),
        "ledger": ledger.as_dict(),
    }
