"""Admissible load-shift polytopes ``{delta : T delta <= q, sum(delta) = 0}``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .lp import LinearProgram, solve_lp

MEMBERSHIP_TOL = 1e-6
MAX_FREE_DIM = 3


class DimensionGuardError(ValueError):
    pass


@dataclass(frozen=True)
class FlexibilitySet:
    T: np.ndarray
    q: np.ndarray
    alpha: float | None = None
    # per-bus magnitude caps when built as a box; None for general polytopes
    box: np.ndarray | None = None

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.T, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        if T.shape[0] != q.size:
            raise ValueError(f"T has {T.shape[0]} rows but q has {q.size} entries")
        if np.any(q < 0):
            raise ValueError("q must be nonnegative so that the zero shift is admissible")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return self.T.shape[1]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate range of the set (balance row included)."""
        if self.box is not None:
            return -self.box, self.box.copy()
        n = self.dim
        lo, hi = np.zeros(n), np.zeros(n)
        for i in range(n):
            for sign, out in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(n)
                c[i] = sign
                sol = solve_lp(self.as_lp(c))
                if sol.status == "unbounded":
                    out[i] = -sign * np.inf
                else:
                    out[i] = sol.x[i]
        return lo, hi

    def as_lp(self, c) -> LinearProgram:
        n = self.dim
        A = np.vstack([self.T, np.ones((1, n))])
        lo = np.concatenate([np.full(self.q.size, -np.inf), [0.0]])
        hi = np.concatenate([self.q, [0.0]])
        return LinearProgram(c, A, lo, hi, -np.inf, np.inf)

    def free_coordinates(self) -> np.ndarray:
        lo, hi = self.bounds()
        return np.flatnonzero(hi - lo > MEMBERSHIP_TOL)

    def free_dimension(self) -> int:
        """Dimension left after the balance row, measured on the coordinates that can move."""
        return max(len(self.free_coordinates()) - 1, 0)

    def to_dict(self) -> dict:
        if self.alpha is not None and self.box is not None:
            return {"alpha": self.alpha}
        return {"T": self.T.tolist(), "q": self.q.tolist()}


def build_box_with_balance(alpha: float, d_flex) -> FlexibilitySet:
    """Shifts with ``|delta_i| <= alpha * d_flex_i`` and zero sum."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha = {alpha} outside [0, 1]")
    d_flex = np.asarray(d_flex, dtype=float).ravel()
    if np.any(d_flex < 0):
        raise ValueError("flexible load must be nonnegative")
    cap = alpha * d_flex
    n = d_flex.size
    T = np.vstack([np.eye(n), -np.eye(n)])
    q = np.concatenate([cap, cap])
    return FlexibilitySet(T, q, alpha=alpha, box=cap)


def from_config(fragment: dict, d_flex) -> FlexibilitySet:
    """``{"alpha": a}`` or ``{"T": [[...]], "q": [...]}``."""
    if "alpha" in fragment:
        return build_box_with_balance(float(fragment["alpha"]), d_flex)
    if "T" in fragment and "q" in fragment:
        fs = FlexibilitySet(np.array(fragment["T"], dtype=float), np.array(fragment["q"], dtype=float))
        if fs.dim != len(d_flex):
            raise ValueError(f"T has {fs.dim} columns, network has {len(d_flex)} buses")
        return fs
    raise ValueError("flexibility config needs 'alpha' or both 'T' and 'q'")


def contains(fset: FlexibilitySet, delta, tol: float = MEMBERSHIP_TOL) -> bool:
    delta = np.asarray(delta, dtype=float).ravel()
    if delta.size != fset.dim:
        raise ValueError("dimension mismatch")
    return bool(np.all(fset.T @ delta <= fset.q + tol) and abs(delta.sum()) <= tol)


def grid_points(fset: FlexibilitySet, step: float, max_free_dim: int = MAX_FREE_DIM):
    """Yield lattice shifts (multiples of ``step`` on every coordinate) inside the set.

    The last movable coordinate is set by the balance row; the others are
    enumerated in ascending lexicographic order.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    free = fset.free_coordinates()
    if max(len(free) - 1, 0) > max_free_dim:
        raise DimensionGuardError(f"free dimension {len(free) - 1} exceeds the limit of {max_free_dim}")
    n = fset.dim
    if len(free) <= 1:
        yield np.zeros(n)
        return
    lo, hi = fset.bounds()
    enum, last = free[:-1], free[-1]
    axes = []
    for i in enum:
        kmin = int(np.ceil(lo[i] / step - 1e-9))
        kmax = int(np.floor(hi[i] / step + 1e-9))
        axes.append(range(kmin, kmax + 1))
    for ks in itertools.product(*axes):
        delta = np.zeros(n)
        delta[enum] = np.array(ks, dtype=float) * step
        delta[last] = 0.0 - delta[enum].sum()  # no negative zero
        # the balancing coordinate must itself sit on the lattice
        if contains(fset, delta, 1e-9):
            yield delta


def vertices(fset: FlexibilitySet) -> list[np.ndarray]:
    """Vertices of a box-with-balance set (enumeration over bound patterns)."""
    if fset.box is None:
        raise NotImplementedError("vertex enumeration is only provided for box-with-balance sets")
    cap = fset.box
    free = np.flatnonzero(cap > MEMBERSHIP_TOL)
    n = cap.size
    out = []
    seen = set()
    if free.size == 0:
        return [np.zeros(n)]
    for j in free:
        others = [i for i in free if i != j]
        for signs in itertools.product((-1.0, 1.0), repeat=len(others)):
            delta = np.zeros(n)
            for i, s in zip(others, signs):
                delta[i] = s * cap[i]
            delta[j] = -delta.sum()
            if abs(delta[j]) <= cap[j] + 1e-9:
                key = tuple(np.round(delta, 9))
                if key not in seen:
                    seen.add(key)
                    out.append(delta)
    return out
