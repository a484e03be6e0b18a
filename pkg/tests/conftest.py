import numpy as np
import pytest

from fedflow import ingest, promptgen
from fedflow.ingest import RegimeSpec, SensorMeta
from fedflow.promptgen import PromptContext, SensorStats

EXAMPLE_HISTORY = (50.0, 47.0, 43.0, 39.0, 43.0, 35.0, 39.0, 34.0, 38.0, 45.0, 42.0, 47.0)
EXAMPLE_TARGETS = (73.0, 98.0, 115.0, 137.0)
EXAMPLE_NEIGHBOURS = (
    ("1203331", (32.0, 32.0, 39.0, 38.0)),
    ("1203342", (47.0, 48.0, 52.0, 53.0)),
    ("1215811", (0.0, 23.0, 111.0, 0.0)),
)
# only the first and last three hourly values are printed; the rest are filler
EXAMPLE_HOURLY = (103.8, 61.0, 46.4, 52.0, 67.1, 120.0, 260.0, 420.0, 480.0, 430.0, 380.0, 370.0,
               375.0, 385.0, 410.0, 470.0, 520.0, 540.0, 470.0, 380.0, 336.6, 336.6, 276.0, 177.2)
EXAMPLE_WEEKLY = (337.0, 352.9, 350.9, 348.2, 360.4, 342.7, 270.9)


def example_context(**overrides) -> PromptContext:
    meta = SensorMeta("1203303", 33.749859, -117.831768, "12", "SR55-N", "N", 4, "Mainline")
    stats = SensorStats(337.644, 188.351, 0.272, 14.0, 688.0, EXAMPLE_HOURLY, EXAMPLE_WEEKLY)
    kw = dict(
        meta=meta,
        in_degree=7.83,
        out_degree=8.806,
        stats=stats,
        timestamp="2019-07-10 04:15:00",
        history=EXAMPLE_HISTORY,
        trend_slope=promptgen.trend_slope(EXAMPLE_HISTORY[-4:]),
        net_change=promptgen.net_change(EXAMPLE_HISTORY),
        typical_hourly_mean=67.1,
        time_of_day_label=promptgen.time_of_day_label("2019-07-10 04:15:00"),
        neighbours=EXAMPLE_NEIGHBOURS,
    )
    kw.update(overrides)
    return PromptContext(**kw)


@pytest.fixture
def example_ctx():
    return example_context()


def small_regimes():
    return [
        ("SR1-N", RegimeSpec(300, 200, sensor_count=4, noise_std=6, drift_std=0.08)),
        ("SR1-S", RegimeSpec(290, 190, sensor_count=4, noise_std=6, peak_hours=(7.5, 17.0), drift_std=0.08)),
        ("SR2-N", RegimeSpec(80, 60, sensor_count=4, noise_std=2, peak_hours=(6.5, 16.0), drift_std=0.08)),
        ("SR3-E", RegimeSpec(40, 30, sensor_count=4, noise_std=1, peak_hours=(7.0, 18.0), drift_std=0.08)),
    ]


@pytest.fixture(scope="session")
def small_world():
    """14 synthetic days over four corridors, split 10/4, with an adjacency graph."""
    table = ingest.synth_generate(small_regimes(), days=14, seed=11)
    adj = ingest.build_adjacency_by_district(list(table.sensors))
    train = table.time_slice(None, "2019-01-17 00:00:00")
    test = table.time_slice("2019-01-16 21:00:00", None)
    return table, adj, train, test


@pytest.fixture(scope="session")
def small_records(small_world):
    """Per-corridor (train, test) prompt records."""
    table, adj, train, test = small_world
    out = {}
    for k, corridor in enumerate(["SR1-N", "SR1-S", "SR2-N", "SR3-E"]):
        tr = promptgen.generate_records(train, train, adj, [corridor], 120, seed=k)
        te = promptgen.generate_records(test, train, adj, [corridor], 60, seed=100 + k)
        out[corridor] = (tr, te)
    return out


def rng_pairs(seed=0):
    return np.random.default_rng(seed)
