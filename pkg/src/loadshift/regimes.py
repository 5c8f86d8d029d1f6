"""Active sets, regime-boundary probes, misalignment records and merit-order deltas."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dcopf import DispatchSolution, DualBundle, InfeasibleMarket, dispatch_only
from .flexibility import FlexibilitySet
from .grid import LoadProfile, Network

BINDING_TOL = 1e-5
PROBE_EPS = 1e-3
ALIGN_TOL = 1e-4  # USD/MWh of total nominal load
PRICE_TOL = 1e-6


@dataclass(frozen=True)
class ActiveSet:
    lines_upper: frozenset = frozenset()
    lines_lower: frozenset = frozenset()
    gens_upper: frozenset = frozenset()
    gens_lower: frozenset = frozenset()

    def key(self) -> str:
        def fmt(s):
            return ",".join(str(x) for x in sorted(s))

        return f"L+[{fmt(self.lines_upper)}]L-[{fmt(self.lines_lower)}]G+[{fmt(self.gens_upper)}]G-[{fmt(self.gens_lower)}]"

    def named(self, network: Network) -> dict:
        lines = network.line_labels()
        gens = [g.id for g in network.generators]
        return {
            "L+": [lines[i] for i in sorted(self.lines_upper)],
            "L-": [lines[i] for i in sorted(self.lines_lower)],
            "G+": [gens[i] for i in sorted(self.gens_upper)],
            "G-": [gens[i] for i in sorted(self.gens_lower)],
        }


def extract_active_set(solution: DispatchSolution, network: Network, tol: float = BINDING_TOL) -> ActiveSet:
    fmax = network.line_capacities
    pmax = network.gen_capacities
    f, p = solution.f, solution.p
    upper = np.flatnonzero(f >= fmax - tol)
    # a zero-capacity line sits at both limits; it is reported once, in L+
    lower = np.flatnonzero((f <= -fmax + tol) & ~(f >= fmax - tol))
    g_up = np.flatnonzero(p >= pmax - tol)
    g_lo = np.flatnonzero((p <= tol) & ~(p >= pmax - tol))
    return ActiveSet(
        frozenset(int(i) for i in upper),
        frozenset(int(i) for i in lower),
        frozenset(int(i) for i in g_up),
        frozenset(int(i) for i in g_lo),
    )


def active_set_at(network: Network, load: LoadProfile, delta, tol: float = BINDING_TOL) -> ActiveSet:
    return extract_active_set(dispatch_only(network, load, delta), network, tol)


def balance_directions(n: int) -> list[np.ndarray]:
    """``e_i - e_last`` for ``i < n - 1``: a basis of ``{e : sum(e) = 0}``."""
    out = []
    for i in range(n - 1):
        e = np.zeros(n)
        e[i] = 1.0
        e[-1] = -1.0
        out.append(e)
    return out


def _max_step(fset: FlexibilitySet | None, delta, direction, eps) -> float:
    if fset is None:
        return eps
    slack = fset.q - fset.T @ delta
    rate = fset.T @ direction
    steps = [eps]
    pos = rate > 1e-12
    if pos.any():
        steps.append(float(np.min(np.maximum(slack[pos], 0.0) / rate[pos])))
    return max(min(steps), 0.0)


@dataclass
class BoundaryProbe:
    boundary: bool
    clipped: bool = False
    active_sets: list = field(default_factory=list)


def probe_boundary(network: Network, load: LoadProfile, delta, probe_eps: float = PROBE_EPS, fset: FlexibilitySet | None = None, tol: float = BINDING_TOL) -> BoundaryProbe:
    """Probe ``delta +/- eps * e`` along balance directions and ``delta`` itself.

    A pair of opposite probes landing in different active sets marks a regime
    boundary. Probes leaving ``fset`` are shortened to stay inside it; a probe
    shortened to zero length is replaced by the centre point.
    """
    delta = np.asarray(delta, dtype=float)
    n = delta.size
    if fset is not None and fset.box is not None and not np.any(fset.box > 0):
        return BoundaryProbe(False)
    dirs = balance_directions(n)
    norm = np.linalg.norm(delta)
    if norm > 0:
        dirs.append(delta / norm)
    centre = None
    clipped = False
    seen = []
    for e in dirs:
        sides = []
        for sgn in (1.0, -1.0):
            step = _max_step(fset, delta, sgn * e, probe_eps)
            if step < probe_eps:
                clipped = True
            if step <= 0.0:
                if centre is None:
                    centre = active_set_at(network, load, delta, tol)
                sides.append(centre)
                continue
            try:
                sides.append(active_set_at(network, load, delta + sgn * step * e, tol))
            except InfeasibleMarket:
                sides.append(None)
        seen.extend(s for s in sides if s is not None)
        if sides[0] is not None and sides[1] is not None and sides[0] != sides[1]:
            return BoundaryProbe(True, clipped, seen)
    return BoundaryProbe(False, clipped, seen)


def is_on_boundary(network: Network, load: LoadProfile, delta, probe_eps: float = PROBE_EPS, fset: FlexibilitySet | None = None) -> bool:
    return probe_boundary(network, load, delta, probe_eps, fset).boundary


@dataclass
class MisalignmentRecord:
    delta: np.ndarray
    V0: float
    V: float
    Pi0: float
    Pi: float
    misaligned: bool
    boundary: bool
    clipped: bool = False
    active_sets: list = field(default_factory=list)
    normalizer: float = 1.0

    @property
    def delta_V(self) -> float:
        return self.V - self.V0

    @property
    def delta_V_normalized(self) -> float:
        return (self.V - self.V0) / self.normalizer

    def to_dict(self) -> dict:
        return {
            "delta": [float(x) for x in self.delta],
            "V0": self.V0,
            "V": self.V,
            "Pi0": self.Pi0,
            "Pi": self.Pi,
            "misaligned": self.misaligned,
            "boundary": self.boundary,
            "clipped": self.clipped,
            "active_sets": [a.key() if isinstance(a, ActiveSet) else a for a in self.active_sets],
        }


def classify_alignment(delta, V0: float, V: float, Pi0: float, Pi: float, normalizer: float = 1.0, boundary: bool | BoundaryProbe = False, align_tol: float = ALIGN_TOL) -> MisalignmentRecord:
    """``misaligned`` iff the shift raises system cost by more than ``align_tol`` (normalized units)."""
    probe = boundary if isinstance(boundary, BoundaryProbe) else BoundaryProbe(bool(boundary))
    misaligned = (V - V0) / normalizer > align_tol
    return MisalignmentRecord(
        np.asarray(delta, dtype=float),
        V0,
        V,
        Pi0,
        Pi,
        bool(misaligned),
        probe.boundary,
        probe.clipped,
        list(probe.active_sets),
        normalizer,
    )


# -- merit order ---------------------------------------------------------------


def marginal_flags(dispatch: DispatchSolution, duals: DualBundle, network: Network, tol: float = BINDING_TOL, price_tol: float = PRICE_TOL) -> np.ndarray:
    """Interior dispatch, or at a bound with price equal to own cost (degenerate marginal)."""
    p = dispatch.p
    pmax = network.gen_capacities
    interior = (p > tol) & (p < pmax - tol)
    lam_g = duals.lam[network.gen_bus_indices()]
    degenerate = np.abs(lam_g - network.gen_costs) <= price_tol
    return interior | degenerate


@dataclass
class MeritOrderRow:
    generator_id: str
    cost: float
    delta_marginal_hours: int
    delta_energy_mwh: float


def merit_order_report(network: Network, baseline: Mapping, shifted: Mapping) -> list[MeritOrderRow]:
    """Per-generator change (shifted minus baseline) in marginal hours and energy.

    ``baseline`` and ``shifted`` map an hour key to ``(dispatch, duals)`` or to
    a dict with ``"p"`` and ``"marginal"`` lists.
    """
    if set(baseline) != set(shifted):
        raise ValueError("baseline and shifted runs cover different hours")
    k = network.n_generators
    d_marg = np.zeros(k, dtype=int)
    d_energy = np.zeros(k)
    for hour in sorted(baseline):
        p0, m0 = _hour_view(baseline[hour], network)
        p1, m1 = _hour_view(shifted[hour], network)
        d_marg += m1.astype(int) - m0.astype(int)
        d_energy += p1 - p0
    order = sorted(range(k), key=lambda j: (network.generators[j].cost, j))
    return [MeritOrderRow(network.generators[j].id, network.generators[j].cost, int(d_marg[j]), float(d_energy[j])) for j in order]


def _hour_view(entry, network: Network):
    if isinstance(entry, dict):
        return np.asarray(entry["p"], dtype=float), np.asarray(entry["marginal"], dtype=bool)
    dispatch, duals = entry
    return dispatch.p, marginal_flags(dispatch, duals, network)


def merit_order_csv(rows: list[MeritOrderRow], changed_only: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generator_id", "cost", "delta_marginal_hours", "delta_energy_mwh"])
    for r in rows:
        if changed_only and r.delta_marginal_hours == 0 and abs(r.delta_energy_mwh) <= 1e-6:
            continue
        w.writerow([r.generator_id, f"{r.cost:.6f}", r.delta_marginal_hours, f"{r.delta_energy_mwh:.6f}"])
    return buf.getvalue()
