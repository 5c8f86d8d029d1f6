"""Network, load and generator data plus the file loaders."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PERIODS_PER_HOUR = 12


class NetworkError(ValueError):
    """Invalid network data; the message names the offending field and index."""


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    susceptance: float = 1.0
    capacity: float = math.inf
    id: str = ""


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    cost: float
    capacity: float
    fuel: str = ""


@dataclass(frozen=True)
class Network:
    buses: tuple[str, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    reference_bus: str

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(str(b) for b in self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        validate_network(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    def bus_index(self, bus) -> int:
        return self.buses.index(str(bus))

    @property
    def ref_index(self) -> int:
        return self.bus_index(self.reference_bus)

    @property
    def gen_costs(self) -> np.ndarray:
        return np.array([g.cost for g in self.generators], dtype=float)

    @property
    def gen_capacities(self) -> np.ndarray:
        return np.array([g.capacity for g in self.generators], dtype=float)

    @property
    def line_capacities(self) -> np.ndarray:
        return np.array([ln.capacity for ln in self.lines], dtype=float)

    @property
    def susceptances(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines], dtype=float)

    def gen_bus_indices(self) -> np.ndarray:
        lookup = {b: i for i, b in enumerate(self.buses)}
        return np.array([lookup[g.bus] for g in self.generators], dtype=int)

    def line_labels(self) -> list[str]:
        return [ln.id or f"{ln.from_bus}-{ln.to_bus}" for ln in self.lines]

    def scale_capacities(self, factor: float) -> "Network":
        gens = tuple(replace(g, capacity=g.capacity * factor) for g in self.generators)
        return replace(self, generators=gens)

    def with_capacities(self, capacities) -> "Network":
        gens = tuple(replace(g, capacity=float(cap)) for g, cap in zip(self.generators, capacities))
        return replace(self, generators=gens)


@dataclass(frozen=True)
class LoadProfile:
    d_base: np.ndarray
    d_flex: np.ndarray = field(default=None)

    def __post_init__(self):
        base = np.asarray(self.d_base, dtype=float).copy()
        flex = np.zeros_like(base) if self.d_flex is None else np.asarray(self.d_flex, dtype=float).copy()
        if base.shape != flex.shape or base.ndim != 1:
            raise NetworkError("d_base and d_flex must be vectors of equal length")
        for name, vec in (("d_base", base), ("d_flex", flex)):
            bad = np.flatnonzero(~(vec >= 0))
            if bad.size:
                raise NetworkError(f"{name}[{bad[0]}] = {vec[bad[0]]} is negative")
        base.flags.writeable = False
        flex.flags.writeable = False
        object.__setattr__(self, "d_base", base)
        object.__setattr__(self, "d_flex", flex)

    @property
    def d(self) -> np.ndarray:
        return self.d_base + self.d_flex

    @property
    def total(self) -> float:
        return float(self.d.sum())

    def check(self, network: Network):
        if self.d_base.size != network.n_buses:
            raise NetworkError(f"load vector has length {self.d_base.size}, network has {network.n_buses} buses")


def validate_network(net: Network):
    if len(net.buses) < 1:
        raise NetworkError("network needs at least one bus")
    seen = set()
    for i, b in enumerate(net.buses):
        if b in seen:
            raise NetworkError(f"buses[{i}]: duplicate bus id {b!r}")
        seen.add(b)
    if net.reference_bus not in seen:
        raise NetworkError(f"reference_bus {net.reference_bus!r} is not a bus")
    for i, ln in enumerate(net.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in seen:
                raise NetworkError(f"lines[{i}]: unknown bus {end!r}")
        if ln.from_bus == ln.to_bus:
            raise NetworkError(f"lines[{i}]: both ends at bus {ln.from_bus!r}")
        if not ln.capacity >= 0:
            raise NetworkError(f"lines[{i}].capacity_mw = {ln.capacity} is negative")
        if not ln.susceptance > 0:
            raise NetworkError(f"lines[{i}].susceptance = {ln.susceptance} must be positive")
    for i, g in enumerate(net.generators):
        if g.bus not in seen:
            raise NetworkError(f"generators[{i}]: unknown bus {g.bus!r}")
        if not g.capacity >= 0:
            raise NetworkError(f"generators[{i}].pmax_mw = {g.capacity} is negative")
        if not np.isfinite(g.cost):
            raise NetworkError(f"generators[{i}].cost_usd_per_mwh is not finite")


def build_incidence(network: Network) -> tuple[np.ndarray, np.ndarray]:
    """Oriented line-bus incidence (+1 at the sending bus) and the diagonal susceptance matrix."""
    lookup = {b: i for i, b in enumerate(network.buses)}
    if len(lookup) != len(network.buses):
        raise NetworkError("duplicate bus ids")
    A = np.zeros((network.n_lines, network.n_buses))
    for k, ln in enumerate(network.lines):
        try:
            A[k, lookup[ln.from_bus]] = 1.0
            A[k, lookup[ln.to_bus]] = -1.0
        except KeyError as exc:
            raise NetworkError(f"lines[{k}]: unknown bus {exc.args[0]!r}") from None
    return A, np.diag(network.susceptances)


def generator_map(network: Network) -> np.ndarray:
    lookup = {b: i for i, b in enumerate(network.buses)}
    G = np.zeros((network.n_buses, network.n_generators))
    for j, g in enumerate(network.generators):
        if g.bus not in lookup:
            raise NetworkError(f"generators[{j}]: unknown bus {g.bus!r}")
        G[lookup[g.bus], j] = 1.0
    return G


def marginal_cost_from_heat_rate(fuel_price: float, heat_rate: float) -> float:
    """USD/MWh from a fuel price in USD/MMBTU and a heat rate in BTU/kWh."""
    if fuel_price < 0 or heat_rate < 0:
        raise ValueError("fuel price and heat rate must be nonnegative")
    # fuel_price / 1e6 * 1e3 * heat_rate, kept in one division for exactness
    return fuel_price * heat_rate / 1000.0


# -- JSON network files --------------------------------------------------------


def _num(obj, key, where, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise NetworkError(f"{where}: missing field {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise NetworkError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def network_from_dict(data: dict) -> tuple[Network, LoadProfile]:
    try:
        bus_rows = data["buses"]
        ref = str(data["reference_bus"])
    except KeyError as exc:
        raise NetworkError(f"missing top-level field {exc.args[0]!r}") from None
    buses = []
    for i, b in enumerate(bus_rows):
        if "id" not in b:
            raise NetworkError(f"buses[{i}]: missing field 'id'")
        buses.append(str(b["id"]))
    lines = []
    for i, ln in enumerate(data.get("lines", [])):
        where = f"lines[{i}]"
        for key in ("from", "to"):
            if key not in ln:
                raise NetworkError(f"{where}: missing field {key!r}")
        lines.append(
            Line(
                str(ln["from"]),
                str(ln["to"]),
                susceptance=_num(ln, "susceptance", where, default=1.0),
                capacity=_num(ln, "capacity_mw", where),
                id=str(ln.get("id", "")),
            )
        )
    gens = []
    for i, g in enumerate(data.get("generators", [])):
        where = f"generators[{i}]"
        if "id" not in g or "bus" not in g:
            raise NetworkError(f"{where}: missing field 'id' or 'bus'")
        gens.append(
            Generator(
                str(g["id"]),
                str(g["bus"]),
                cost=_num(g, "cost_usd_per_mwh", where),
                capacity=_num(g, "pmax_mw", where),
                fuel=str(g.get("fuel", "")),
            )
        )
    net = Network(tuple(buses), tuple(lines), tuple(gens), ref)
    base = np.zeros(len(buses))
    flex = np.zeros(len(buses))
    lookup = {b: i for i, b in enumerate(buses)}
    for i, ld in enumerate(data.get("loads", [])):
        where = f"loads[{i}]"
        bus = str(ld.get("bus"))
        if bus not in lookup:
            raise NetworkError(f"{where}: unknown bus {bus!r}")
        b = _num(ld, "base_mw", where, default=0.0)
        f = _num(ld, "flex_mw", where, default=0.0)
        if b < 0 or f < 0:
            raise NetworkError(f"{where}: negative load")
        base[lookup[bus]] += b
        flex[lookup[bus]] += f
    return net, LoadProfile(base, flex)


def network_to_dict(network: Network, load: LoadProfile) -> dict:
    return {
        "buses": [{"id": b} for b in network.buses],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance, "capacity_mw": ln.capacity}
            for ln in network.lines
        ],
        "generators": [
            {"id": g.id, "bus": g.bus, "cost_usd_per_mwh": g.cost, "pmax_mw": g.capacity} for g in network.generators
        ],
        "loads": [
            {"bus": b, "base_mw": float(load.d_base[i]), "flex_mw": float(load.d_flex[i])}
            for i, b in enumerate(network.buses)
        ],
        "reference_bus": network.reference_bus,
    }


def load_network_file(path) -> tuple[Network, LoadProfile]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise NetworkError(f"{path}: top level must be an object")
    return network_from_dict(data)


def three_zone() -> tuple[Network, LoadProfile]:
    """The bundled three-zone example system."""
    from importlib import resources

    text = resources.files("loadshift").joinpath("data/three_zone.json").read_text()
    return network_from_dict(json.loads(text))


# -- RTS-GMLC style directories ----------------------------------------------


@dataclass(frozen=True)
class RtsDataset:
    network: Network
    load: LoadProfile
    vre_caps: pd.DataFrame
    bus_loads: pd.DataFrame

    @property
    def n_hours(self) -> int:
        return len(self.bus_loads)

    def hour_case(self, hour: int, flex_mw=None) -> tuple[Network, LoadProfile]:
        """Network with that hour's VRE caps and the hour's bus loads as base load."""
        caps = self.network.gen_capacities.copy()
        if len(self.vre_caps.columns):
            row = self.vre_caps.iloc[hour]
            idx = {g.id: j for j, g in enumerate(self.network.generators)}
            for uid, val in row.items():
                caps[idx[uid]] = val
        base = self.bus_loads.iloc[hour].to_numpy(dtype=float)
        flex = self.load.d_flex if flex_mw is None else np.asarray(flex_mw, dtype=float)
        return self.network.with_capacities(caps), LoadProfile(base, flex)


def _require(df: pd.DataFrame, cols, name):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise NetworkError(f"{name}: missing columns {missing}")


def _hourly(series_5min: pd.DataFrame, name: str) -> pd.DataFrame:
    n = len(series_5min)
    if n % PERIODS_PER_HOUR:
        raise NetworkError(f"{name}: {n} rows is not a whole number of hours at 5-minute resolution")
    vals = series_5min.to_numpy(dtype=float)
    if np.any(vals < 0):
        r, c = np.argwhere(vals < 0)[0]
        raise NetworkError(f"{name}: negative value in column {series_5min.columns[c]!r} row {r}")
    hourly = vals.reshape(n // PERIODS_PER_HOUR, PERIODS_PER_HOUR, -1).mean(axis=1)
    return pd.DataFrame(hourly, columns=series_5min.columns)


_TIME_COLS = ("Year", "Month", "Day", "Period", "DateTime")


def _timeseries_files(root: Path):
    out = []
    for p in sorted(root.rglob("*.csv")):
        if p.name in ("bus.csv", "branch.csv", "gen.csv"):
            continue
        if re.search(r"DAY_AHEAD", p.name, re.IGNORECASE):
            continue
        out.append(p)
    return out


def load_rts_dataset(directory, capacity_scale: float = 1.0, rating: str = "Cont Rating", flex_mw=None) -> RtsDataset:
    """Read an RTS-GMLC style directory.

    ``bus.csv``, ``branch.csv`` and ``gen.csv`` follow the RTS-GMLC SourceData
    column names. Any other CSV is a 5-minute time series whose value columns
    are generator UIDs (time-varying capacity), bus ids (bus load) or area ids
    (regional load shared out by each bus's ``MW Load``).
    """
    root = Path(directory)
    if capacity_scale <= 0:
        raise ValueError("capacity_scale must be positive")
    try:
        bus_df = pd.read_csv(root / "bus.csv")
        br_df = pd.read_csv(root / "branch.csv")
        gen_df = pd.read_csv(root / "gen.csv")
    except FileNotFoundError as exc:
        raise NetworkError(f"missing file: {exc.filename}") from None
    _require(bus_df, ["Bus ID"], "bus.csv")
    _require(br_df, ["UID", "From Bus", "To Bus", "X", rating], "branch.csv")
    _require(gen_df, ["GEN UID", "Bus ID", "Fuel", "PMax MW", "HR_avg_0", "Fuel Price $/MMBTU"], "gen.csv")

    buses = [str(b) for b in bus_df["Bus ID"]]
    lines = []
    for i, r in br_df.iterrows():
        x = float(r["X"])
        if x <= 0:
            raise NetworkError(f"branch.csv row {i}: reactance X = {x} must be positive")
        lines.append(Line(str(r["From Bus"]), str(r["To Bus"]), susceptance=1.0 / x, capacity=float(r[rating]), id=str(r["UID"])))
    gens = []
    for i, r in gen_df.iterrows():
        hr = r["HR_avg_0"]
        price = r["Fuel Price $/MMBTU"]
        hr = 0.0 if pd.isna(hr) else float(hr)
        price = 0.0 if pd.isna(price) else float(price)
        gens.append(
            Generator(
                str(r["GEN UID"]),
                str(r["Bus ID"]),
                cost=marginal_cost_from_heat_rate(price, hr),
                capacity=float(r["PMax MW"]) * capacity_scale,
                fuel=str(r["Fuel"]),
            )
        )
    ref = buses[0]
    if "Bus Type" in bus_df.columns:
        is_ref = bus_df["Bus Type"].astype(str).str.lower() == "ref"
        if is_ref.any():
            ref = str(bus_df.loc[is_ref, "Bus ID"].iloc[0])
    network = Network(tuple(buses), tuple(lines), tuple(gens), ref)

    nominal = bus_df["MW Load"].to_numpy(dtype=float) if "MW Load" in bus_df.columns else np.zeros(len(buses))
    areas = [str(a) for a in bus_df["Area"]] if "Area" in bus_df.columns else None
    gen_ids = {g.id for g in gens}
    bus_set = set(buses)
    area_set = set(areas) if areas else set()

    vre_parts, load_parts = [], []
    for path in _timeseries_files(root):
        df = pd.read_csv(path)
        value_cols = [c for c in df.columns if c not in _TIME_COLS]
        if not value_cols:
            continue
        cols = [str(c) for c in value_cols]
        df = df[value_cols]
        df.columns = cols
        if all(c in gen_ids for c in cols):
            vre_parts.append(_hourly(df, path.name) * capacity_scale)
        elif all(c in bus_set for c in cols):
            load_parts.append(_hourly(df, path.name))
        elif area_set and all(c in area_set for c in cols):
            hourly = _hourly(df, path.name)
            share = np.zeros((len(cols), len(buses)))
            for a, area in enumerate(cols):
                members = [i for i, ar in enumerate(areas) if ar == area]
                tot = nominal[members].sum()
                for i in members:
                    share[a, i] = nominal[i] / tot if tot > 0 else 1.0 / len(members)
            load_parts.append(pd.DataFrame(hourly.to_numpy() @ share, columns=buses))
        else:
            raise NetworkError(f"{path.name}: columns match neither generator UIDs, bus ids nor areas")

    lengths = {len(p) for p in vre_parts + load_parts}
    if len(lengths) > 1:
        raise NetworkError(f"time series disagree on hour count: {sorted(lengths)}")
    n_hours = lengths.pop() if lengths else 1
    vre = pd.concat(vre_parts, axis=1) if vre_parts else pd.DataFrame(index=range(n_hours))
    if load_parts:
        bus_loads = sum(p.reindex(columns=buses, fill_value=0.0) for p in load_parts)
    else:
        bus_loads = pd.DataFrame([nominal] * n_hours, columns=buses)
    flex = np.zeros(len(buses)) if flex_mw is None else np.asarray(flex_mw, dtype=float)
    load = LoadProfile(np.asarray(nominal, dtype=float), flex)
    logger.info("RTS dataset: %d buses, %d lines, %d generators, %d hours", len(buses), len(lines), len(gens), n_hours)
    return RtsDataset(network, load, vre.reset_index(drop=True), bus_loads.reset_index(drop=True))
