"""Dense bounded-variable simplex with primal and dual solutions.

Problems are stored as

    min  c @ x
    s.t. row_lower <= A @ x <= row_upper
         lb <= x <= ub

with one dual value per row (equality rows are the two-sided case
``row_lower == row_upper``). Duals follow the sensitivity convention:
``dual[i]`` is the derivative of the optimal objective with respect to the
right-hand side of row ``i``, and ``reduced_costs[j]`` the derivative with
respect to whichever bound of ``x[j]`` is active.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_ERROR = "numerical_error"
ITERATION_LIMIT = "iteration_limit"

_SENSES = ("<=", "=", ">=")


class LpError(RuntimeError):
    """Raised when a solve cannot produce a trustworthy answer."""

    def __init__(self, status, message=""):
        super().__init__(message or status)
        self.status = status


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-7
    duality_tol: float = 1e-6
    pivot_tol: float = 1e-9
    opt_tol: float = 1e-9
    comp_tol: float = 1e-6
    refactor_every: int = 40
    max_iter: int | None = None


DEFAULT_CONFIG = SolverConfig()


@dataclass
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    row_lower: np.ndarray
    row_upper: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_names: list[str] = field(default_factory=list)
    col_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.row_lower = np.broadcast_to(np.asarray(self.row_lower, dtype=float), (m,)).copy()
        self.row_upper = np.broadcast_to(np.asarray(self.row_upper, dtype=float), (m,)).copy()
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if np.any(self.lb > self.ub):
            j = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"variable {j}: lower bound {self.lb[j]} exceeds upper bound {self.ub[j]}")
        if np.any(self.row_lower > self.row_upper):
            i = int(np.argmax(self.row_lower > self.row_upper))
            raise ValueError(f"row {i}: lower side exceeds upper side")
        if np.any(np.isnan(self.A)) or np.any(np.isnan(self.c)):
            raise ValueError("NaN in problem data")
        if not self.col_names:
            self.col_names = [f"x{j}" for j in range(n)]
        if not self.row_names:
            self.row_names = [f"r{i}" for i in range(m)]

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_rows(cls, c, rows: Sequence[tuple], lb=0.0, ub=np.inf, col_names=None):
        """Build from ``(coefficients, sense, rhs)`` or ``(coefficients, sense, rhs, name)`` rows."""
        c = np.asarray(c, dtype=float)
        n = c.size
        A = np.zeros((len(rows), n))
        lo = np.full(len(rows), -np.inf)
        hi = np.full(len(rows), np.inf)
        names = []
        for i, row in enumerate(rows):
            coeffs, sense, rhs = row[:3]
            names.append(row[3] if len(row) > 3 else f"r{i}")
            if sense not in _SENSES:
                raise ValueError(f"row {i}: unknown sense {sense!r}")
            coeffs = np.asarray(coeffs, dtype=float)
            if coeffs.size != n:
                raise ValueError(f"row {i}: expected {n} coefficients, got {coeffs.size}")
            A[i] = coeffs
            if sense in ("<=", "="):
                hi[i] = rhs
            if sense in (">=", "="):
                lo[i] = rhs
        return cls(c, A, lo, hi, lb, ub, row_names=names, col_names=list(col_names or []))

    def senses(self) -> list[str]:
        out = []
        for lo, hi in zip(self.row_lower, self.row_upper):
            if lo == hi:
                out.append("=")
            elif np.isfinite(lo) and np.isfinite(hi):
                out.append("range")
            elif np.isfinite(hi):
                out.append("<=")
            elif np.isfinite(lo):
                out.append(">=")
            else:
                out.append("free")
        return out

    def with_bounds(self, lb=None, ub=None) -> "LinearProgram":
        return dataclasses.replace(
            self,
            lb=self.lb if lb is None else lb,
            ub=self.ub if ub is None else ub,
        )

    def add_rows(self, A, lower, upper, names=None) -> "LinearProgram":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        names = list(names) if names is not None else [f"r{self.n_rows + i}" for i in range(A.shape[0])]
        return LinearProgram(
            self.c,
            np.vstack([self.A, A]),
            np.concatenate([self.row_lower, np.atleast_1d(lower)]),
            np.concatenate([self.row_upper, np.atleast_1d(upper)]),
            self.lb,
            self.ub,
            row_names=self.row_names + names,
            col_names=list(self.col_names),
        )

    def to_text(self) -> str:
        """One line per objective/constraint/bound; used for bug-report dumps."""

        def expr(coeffs):
            terms = [f"{v:+.12g} {self.col_names[j]}" for j, v in enumerate(coeffs) if v != 0.0]
            return " ".join(terms) if terms else "0"

        lines = [f"min: {expr(self.c)}"]
        for i in range(self.n_rows):
            lines.append(f"{self.row_names[i]}: {self.row_lower[i]:.12g} <= {expr(self.A[i])} <= {self.row_upper[i]:.12g}")
        for j in range(self.n_vars):
            lines.append(f"bound {self.col_names[j]}: {self.lb[j]:.12g} <= x <= {self.ub[j]:.12g}")
        return "\n".join(lines) + "\n"


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    dual: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    objective: float = float("nan")
    basis: tuple = ()
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


# -- simplex internals -------------------------------------------------------

_AT_LOWER, _AT_UPPER, _FREE_ZERO, _BASIC = 0, 1, 2, 3


class _Simplex:
    """Revised bounded simplex on ``[A, -I, art] z = 0`` with explicit basis inverse."""

    def __init__(self, lp: LinearProgram, config: SolverConfig):
        self.cfg = config
        m, n = lp.n_rows, lp.n_vars
        self.m, self.n = m, n
        x_lb, x_ub = lp.lb, lp.ub
        x0 = np.where(np.isfinite(x_lb), x_lb, np.where(np.isfinite(x_ub), x_ub, 0.0))
        activity = lp.A @ x0
        # slack s = A x, bounded by the row sides
        s_val = np.clip(activity, lp.row_lower, lp.row_upper)
        resid = activity - s_val
        need_art = np.abs(resid) > 0.0
        art_rows = np.flatnonzero(need_art)
        k = art_rows.size

        cols = [lp.A, -np.eye(m)]
        if k:
            art = np.zeros((m, k))
            # art column sign chosen so the artificial starts nonnegative
            art[art_rows, np.arange(k)] = -np.sign(resid[art_rows])
            cols.append(art)
        self.M = np.hstack(cols)
        self.N = n + m + k
        self.lb = np.concatenate([x_lb, lp.row_lower, np.zeros(k)])
        self.ub = np.concatenate([x_ub, lp.row_upper, np.full(k, np.inf)])
        self.n_art = k

        self.val = np.concatenate([x0, s_val, np.abs(resid[art_rows])])
        self.state = np.empty(self.N, dtype=np.int8)
        for j in range(n):
            if np.isfinite(x_lb[j]):
                self.state[j] = _AT_LOWER
            elif np.isfinite(x_ub[j]):
                self.state[j] = _AT_UPPER
            else:
                self.state[j] = _FREE_ZERO
        basis = np.empty(m, dtype=np.int64)
        for i in range(m):
            basis[i] = n + i
        for a, i in enumerate(art_rows):
            # slack leaves the basis at the side that was violated
            s = n + i
            self.state[s] = _AT_UPPER if resid[i] > 0 else _AT_LOWER
            basis[i] = n + m + a
        self.basis = basis
        self.state[basis] = _BASIC
        self.iterations = 0
        self._refactor()

    def _refactor(self):
        B = self.M[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise LpError(NUMERICAL_ERROR, "singular basis") from exc
        nonbasic = self.state != _BASIC
        rhs = -self.M[:, nonbasic] @ self.val[nonbasic]
        self.val[self.basis] = self.Binv @ rhs
        self._since_refactor = 0

    def run(self, cost: np.ndarray, max_iter: int) -> str:
        cfg = self.cfg
        m = self.m
        degenerate_run = 0
        bland = False
        bland_trigger = 3 * (m + self.N)
        while True:
            if self.iterations >= max_iter:
                return ITERATION_LIMIT
            y = cost[self.basis] @ self.Binv
            d = cost - y @ self.M
            st = self.state
            fixed = self.lb == self.ub
            can_up = ((st == _AT_LOWER) | (st == _FREE_ZERO)) & (d < -cfg.opt_tol) & ~fixed
            can_down = ((st == _AT_UPPER) | (st == _FREE_ZERO)) & (d > cfg.opt_tol) & ~fixed
            cand = can_up | can_down
            if not cand.any():
                self.y, self.d = y, d
                return OPTIMAL
            if bland:
                q = int(np.flatnonzero(cand)[0])
            else:
                score = np.where(cand, np.abs(d), -1.0)
                q = int(np.argmax(score))
            direction = 1.0 if can_up[q] else -1.0

            w = self.Binv @ self.M[:, q]
            xb = self.val[self.basis]
            lbB = self.lb[self.basis]
            ubB = self.ub[self.basis]
            step = direction * w
            t_max = np.inf
            leave = -1
            leave_to_upper = False
            big = np.abs(w) > cfg.pivot_tol
            dec = big & (step > 0) & np.isfinite(lbB)
            inc = big & (step < 0) & np.isfinite(ubB)
            ratios = np.full(m, np.inf)
            ratios[dec] = np.maximum(xb[dec] - lbB[dec], 0.0) / step[dec]
            ratios[inc] = np.maximum(ubB[inc] - xb[inc], 0.0) / -step[inc]
            if np.isfinite(ratios).any():
                t_min = ratios.min()
                ties = np.flatnonzero(ratios <= t_min + 1e-12)
                if bland:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(w[ties]))])
                t_max = ratios[r]
                leave = r
                leave_to_upper = bool(inc[r])
            span = self.ub[q] - self.lb[q]
            if span <= t_max:
                if not np.isfinite(span):
                    return UNBOUNDED
                # bound flip, basis unchanged
                self.val[self.basis] = xb - span * step
                self.val[q] = self.ub[q] if direction > 0 else self.lb[q]
                self.state[q] = _AT_UPPER if direction > 0 else _AT_LOWER
                self.iterations += 1
                degenerate_run = 0
                continue
            if abs(w[leave]) < cfg.pivot_tol:
                return NUMERICAL_ERROR
            t = t_max
            if t <= 1e-12:
                degenerate_run += 1
                if degenerate_run > bland_trigger and not bland:
                    logger.debug("switching to Bland's rule after %d degenerate pivots", degenerate_run)
                    bland = True
            else:
                degenerate_run = 0
            self.val[self.basis] = xb - t * step
            self.val[q] = self.val[q] + direction * t
            out = int(self.basis[leave])
            self.val[out] = self.ub[out] if leave_to_upper else self.lb[out]
            self.state[out] = _AT_UPPER if leave_to_upper else _AT_LOWER
            self.state[q] = _BASIC
            self.basis[leave] = q
            # eta update of the basis inverse
            piv = w[leave]
            row = self.Binv[leave] / piv
            self.Binv -= np.outer(w, row)
            self.Binv[leave] = row
            self.iterations += 1
            self._since_refactor += 1
            if self._since_refactor >= self.cfg.refactor_every:
                self._refactor()


def solve_lp(lp: LinearProgram, config: SolverConfig = DEFAULT_CONFIG) -> LpSolution:
    """Solve ``lp`` with the two-phase bounded simplex.

    Returns an :class:`LpSolution`; a breakdown is reported through
    ``status == "numerical_error"`` rather than raised.
    """
    m, n = lp.n_rows, lp.n_vars
    max_iter = config.max_iter or 50 * (m + n + 10)
    try:
        sx = _Simplex(lp, config)
        if sx.n_art:
            cost1 = np.zeros(sx.N)
            cost1[n + m:] = 1.0
            status = sx.run(cost1, max_iter)
            if status != OPTIMAL:
                return LpSolution(status, iterations=sx.iterations)
            infeas = sx.val[n + m:].sum()
            scale = 1.0 + np.abs(lp.row_lower[np.isfinite(lp.row_lower)]).sum() * 1e-9
            if infeas > config.feas_tol * scale:
                return LpSolution(INFEASIBLE, iterations=sx.iterations)
            # artificials are pinned to zero for phase two
            sx.ub[n + m:] = 0.0
            sx.val[n + m:] = np.where(sx.state[n + m:] == _BASIC, sx.val[n + m:], 0.0)
            for j in range(n + m, sx.N):
                if sx.state[j] != _BASIC:
                    sx.state[j] = _AT_LOWER
            sx._refactor()
        cost2 = np.zeros(sx.N)
        cost2[:n] = lp.c
        status = sx.run(cost2, max_iter)
        if status != OPTIMAL:
            return LpSolution(status, iterations=sx.iterations)
        sx._refactor()
        y = cost2[sx.basis] @ sx.Binv
        d = cost2 - y @ sx.M
    except LpError as exc:
        return LpSolution(exc.status)
    except np.linalg.LinAlgError:
        return LpSolution(NUMERICAL_ERROR)

    x = sx.val[:n].copy()
    # snap nonbasic structurals exactly onto their bounds
    x = np.clip(x, lp.lb, lp.ub)
    sol = LpSolution(
        OPTIMAL,
        x=x,
        dual=y.copy(),
        reduced_costs=d[:n].copy(),
        objective=float(lp.c @ x),
        basis=tuple(int(b) for b in sx.basis),
        iterations=sx.iterations,
    )
    primal_res, dual_res = residuals(lp, sol)
    if primal_res > 1e3 * config.feas_tol * (1.0 + np.abs(x).max(initial=0.0)):
        logger.warning("primal residual %.3g after simplex", primal_res)
        return LpSolution(NUMERICAL_ERROR, iterations=sx.iterations)
    return sol


def residuals(lp: LinearProgram, sol: LpSolution) -> tuple[float, float]:
    """Max primal infeasibility and max dual-sign violation of ``sol``."""
    x, y, d = sol.x, sol.dual, sol.reduced_costs
    act = lp.A @ x
    primal = max(
        np.max(lp.row_lower - act, initial=0.0),
        np.max(act - lp.row_upper, initial=0.0),
        np.max(lp.lb - x, initial=0.0),
        np.max(x - lp.ub, initial=0.0),
    )
    dual = 0.0
    # row duals: <= rows carry y <= 0, >= rows y >= 0, unless the row is slack
    tol_act = 1e-7 * (1.0 + np.abs(act))
    at_hi = np.abs(act - lp.row_upper) <= tol_act
    at_lo = np.abs(act - lp.row_lower) <= tol_act
    dual = max(dual, np.max(np.where(~at_hi & (y < 0), -y, 0.0), initial=0.0))
    dual = max(dual, np.max(np.where(~at_lo & (y > 0), y, 0.0), initial=0.0))
    xa_hi = np.abs(x - lp.ub) <= 1e-7 * (1.0 + np.abs(x))
    xa_lo = np.abs(x - lp.lb) <= 1e-7 * (1.0 + np.abs(x))
    dual = max(dual, np.max(np.where(~xa_lo & (d > 0), d, 0.0), initial=0.0))
    dual = max(dual, np.max(np.where(~xa_hi & (d < 0), -d, 0.0), initial=0.0))
    return float(primal), float(dual)


def dual_objective(lp: LinearProgram, sol: LpSolution) -> float:
    """Objective of the dual solution implied by ``sol``'s row duals and reduced costs."""
    y, d = sol.dual, sol.reduced_costs
    val = 0.0
    y = np.where(np.abs(y) > 1e-9, y, 0.0)
    d = np.where(np.abs(d) > 1e-9, d, 0.0)
    for i, yi in enumerate(y):
        if yi > 0:
            val += yi * lp.row_lower[i]
        elif yi < 0:
            val += yi * lp.row_upper[i]
    for j, dj in enumerate(d):
        if dj > 0:
            val += dj * lp.lb[j]
        elif dj < 0:
            val += dj * lp.ub[j]
    return float(val)


def optimize_over_face(lp: LinearProgram, optimal_value: float, secondary, config: SolverConfig = DEFAULT_CONFIG) -> LpSolution:
    """Minimize ``secondary @ x`` over points of ``lp`` whose objective is within ``duality_tol`` of ``optimal_value``."""
    secondary = np.asarray(secondary, dtype=float)
    pinned = lp.add_rows(lp.c[None, :], -np.inf, optimal_value + config.duality_tol, names=["objective_pin"])
    pinned = dataclasses.replace(pinned, c=secondary)
    sol = solve_lp(pinned, config)
    if sol.optimal:
        sol = dataclasses.replace(sol, dual=sol.dual[:-1], objective=float(secondary @ sol.x))
    return sol


def resolve_over_optimal_face(lp: LinearProgram, primary_solution: LpSolution, secondary, config: SolverConfig = DEFAULT_CONFIG) -> LpSolution:
    """Re-optimize ``secondary`` over the optimal face of ``lp``.

    ``primary_solution`` must be an optimal solution of ``lp``; its objective
    value defines the face.
    """
    if not primary_solution.optimal:
        raise LpError(primary_solution.status, "primary solution is not optimal")
    return optimize_over_face(lp, primary_solution.objective, secondary, config)
