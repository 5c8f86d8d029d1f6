import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from loadshift.grid import three_zone  # noqa: E402

TOY_PLACEMENTS = [("101", 60.0), ("103", 60.0), ("202", 60.0)]


def write_toy_rts(root, hours=48, seed=7):
    """A six-bus directory in the RTS-GMLC SourceData layout with 5-minute series."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pd.DataFrame(
        {
            "Bus ID": [101, 102, 103, 201, 202, 203],
            "Bus Type": ["PV", "PQ", "ref", "PQ", "PV", "PQ"],
            "MW Load": [90.0, 120.0, 60.0, 150.0, 80.0, 100.0],
            "Area": [1, 1, 1, 2, 2, 2],
        }
    ).to_csv(root / "bus.csv", index=False)
    pd.DataFrame(
        {
            "UID": ["A1", "A2", "A3", "B1", "B2", "B3", "AB1"],
            "From Bus": [101, 102, 101, 201, 202, 201, 103],
            "To Bus": [102, 103, 103, 202, 203, 203, 201],
            "X": [0.1, 0.1, 0.2, 0.1, 0.1, 0.2, 0.15],
            "Cont Rating": [120.0, 120.0, 90.0, 120.0, 120.0, 90.0, 70.0],
            "LTE Rating": [150.0] * 7,
        }
    ).to_csv(root / "branch.csv", index=False)
    pd.DataFrame(
        {
            "GEN UID": ["101_CT", "102_STEAM", "103_WIND", "201_CC", "202_CT", "203_PV"],
            "Bus ID": [101, 102, 103, 201, 202, 203],
            "Fuel": ["Oil", "Coal", "Wind", "NG", "NG", "Solar"],
            "PMax MW": [200.0, 250.0, 180.0, 220.0, 150.0, 120.0],
            "HR_avg_0": [12000.0, 10000.0, None, 7500.0, 11000.0, None],
            "Fuel Price $/MMBTU": [10.0, 2.5, 0.0, 4.0, 4.0, 0.0],
        }
    ).to_csv(root / "gen.csv", index=False)
    periods = hours * 12
    t = np.arange(periods) / 12.0
    stamp = {
        "Year": 2020,
        "Month": 1,
        "Day": (t // 24).astype(int) + 1,
        "Period": np.arange(periods) % 288 + 1,
    }
    wind = 180.0 * (0.5 + 0.45 * np.sin(2 * np.pi * t / 17.0)) * (1 + 0.05 * rng.standard_normal(periods))
    solar = 120.0 * np.clip(np.sin(2 * np.pi * (t % 24 - 6) / 24.0), 0, None)
    ts = root / "timeseries_data_files"
    (ts / "WIND").mkdir(parents=True, exist_ok=True)
    (ts / "PV").mkdir(parents=True, exist_ok=True)
    (ts / "Load").mkdir(parents=True, exist_ok=True)
    pd.DataFrame({**stamp, "103_WIND": np.clip(wind, 0, 180)}).to_csv(ts / "WIND" / "REAL_TIME_wind.csv", index=False)
    pd.DataFrame({**stamp, "203_PV": solar}).to_csv(ts / "PV" / "REAL_TIME_pv.csv", index=False)
    shape = 1.0 + 0.25 * np.sin(2 * np.pi * (t - 8) / 24.0)
    pd.DataFrame({**stamp, "1": 270.0 * shape, "2": 330.0 * shape}).to_csv(ts / "Load" / "REAL_TIME_regional_Load.csv", index=False)
    # a day-ahead file must be ignored by the loader
    pd.DataFrame({**stamp, "103_WIND": np.zeros(periods)}).to_csv(ts / "WIND" / "DAY_AHEAD_wind.csv", index=False)
    return root


@pytest.fixture
def tz():
    return three_zone()


@pytest.fixture
def toy_rts(tmp_path):
    return write_toy_rts(tmp_path / "toy_rts")
