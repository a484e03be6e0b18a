"""Traffic data loading, synthetic regime generation and the sensor graph."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DegenerateGeometryError, OrderingError, ParseError, ReferentialError

INTERVAL_SECONDS = 900
SLOTS_PER_DAY = 96
DIRECTIONS = ("N", "S", "E", "W")

META_HEADER = ["sensor_id", "latitude", "longitude", "district", "freeway", "direction", "lanes", "detector_type"]
FLOW_HEADER = ["sensor_id", "timestamp", "flow"]
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"


@dataclass(frozen=True)
class SensorMeta:
    sensor_id: str
    latitude: float
    longitude: float
    district: str
    freeway: str
    direction: str
    lanes: int
    detector_type: str = "Mainline"

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} out of range")
        if int(self.lanes) < 1:
            raise ValueError(f"lanes must be >= 1, got {self.lanes}")
        if not self.freeway:
            raise ValueError("freeway label must be non-empty")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True, eq=False)
class FlowTable:
    """Flows in vehicles per 15 minutes; NaN marks a missing reading."""

    sensors: tuple
    timestamps: np.ndarray  # datetime64[s]
    flows: np.ndarray  # (num_timestamps, num_sensors)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        flows = np.asarray(self.flows, dtype=np.float64)
        if flows.shape != (ts.shape[0], len(self.sensors)):
            raise ValueError(f"flows shape {flows.shape} does not match ({ts.shape[0]}, {len(self.sensors)})")
        if ts.shape[0] > 1:
            steps = np.diff(ts).astype(np.int64)
            if np.any(steps != INTERVAL_SECONDS):
                raise OrderingError("timestamps must be spaced exactly 900 s apart")
        present = flows[~np.isnan(flows)]
        if np.any(~np.isfinite(present)) or np.any(present < 0):
            raise ValueError("flows must be finite and non-negative where present")
        ts.setflags(write=False)
        flows.setflags(write=False)
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "flows", flows)

    @property
    def num_sensors(self) -> int:
        return len(self.sensors)

    @property
    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensors]

    def index_of(self, sensor_id: str) -> int:
        for i, s in enumerate(self.sensors):
            if s.sensor_id == sensor_id:
                return i
        raise KeyError(sensor_id)

    def corridor_map(self) -> dict[str, str]:
        return {s.sensor_id: s.freeway for s in self.sensors}

    def select_sensors(self, keep) -> "FlowTable":
        idx = [i for i, s in enumerate(self.sensors) if keep(s)]
        return FlowTable(tuple(self.sensors[i] for i in idx), self.timestamps, self.flows[:, idx])

    def time_slice(self, start=None, end=None) -> "FlowTable":
        """Rows with ``start <= timestamp < end``."""
        mask = np.ones(self.timestamps.shape[0], dtype=bool)
        if start is not None:
            mask &= self.timestamps >= np.datetime64(start, "s")
        if end is not None:
            mask &= self.timestamps < np.datetime64(end, "s")
        return FlowTable(self.sensors, self.timestamps[mask], self.flows[mask])


@dataclass(frozen=True)
class Adjacency:
    weights: np.ndarray
    directed: bool = True
    sensor_ids: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("adjacency must be square")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sensor_ids", tuple(self.sensor_ids))


@dataclass(frozen=True)
class RegimeSpec:
    base_flow: float
    daily_amplitude: float
    weekend_factor: float = 1.0
    noise_std: float = 0.0
    zero_dropout_prob: float = 0.0
    sensor_count: int = 1
    peak_hours: tuple = (8.0, 17.5)
    lanes: int = 4
    district: str = "12"
    # slow corridor-wide demand deviation: AR(1) with this stationary std (relative)
    drift_std: float = 0.0
    drift_corr: float = 0.95

    def __post_init__(self):
        if self.base_flow < 0:
            raise ValueError("base_flow must be >= 0")
        if int(self.sensor_count) < 1:
            raise ValueError("sensor_count must be >= 1")
        if not 0.0 < self.weekend_factor <= 1.0:
            raise ValueError("weekend_factor must be in (0, 1]")
        if not 0.0 <= self.zero_dropout_prob < 1.0:
            raise ValueError("zero_dropout_prob must be in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.drift_std < 0 or not 0.0 <= self.drift_corr < 1.0:
            raise ValueError("drift_std must be >= 0 and drift_corr in [0, 1)")
        object.__setattr__(self, "peak_hours", tuple(float(p) for p in self.peak_hours))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _parse_timestamp(text: str) -> np.datetime64:
    return np.datetime64(datetime.strptime(text.strip(), TIMESTAMP_FORMAT), "s")


def format_timestamp(ts) -> str:
    return str(np.datetime64(ts, "s")).replace("T", " ")


def _read_meta(meta_path: Path) -> list[SensorMeta]:
    out = []
    seen = set()
    with open(meta_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != META_HEADER:
            raise ParseError(meta_path, 1, f"expected header {','.join(META_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(META_HEADER):
                raise ParseError(meta_path, lineno, f"expected {len(META_HEADER)} fields, got {len(row)}")
            try:
                meta = SensorMeta(
                    sensor_id=row[0],
                    latitude=float(row[1]),
                    longitude=float(row[2]),
                    district=row[3],
                    freeway=row[4],
                    direction=row[5],
                    lanes=int(row[6]),
                    detector_type=row[7],
                )
            except ValueError as exc:
                raise ParseError(meta_path, lineno, str(exc)) from None
            if meta.sensor_id in seen:
                raise ParseError(meta_path, lineno, f"duplicate sensor_id {meta.sensor_id}")
            seen.add(meta.sensor_id)
            out.append(meta)
    return out


def load_flow_table(flow_path, meta_path) -> FlowTable:
    flow_path, meta_path = Path(flow_path), Path(meta_path)
    sensors = _read_meta(meta_path)
    col = {s.sensor_id: j for j, s in enumerate(sensors)}

    rows = []  # (column, timestamp, flow)
    last_seen: dict[str, np.datetime64] = {}
    with open(flow_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FLOW_HEADER:
            raise ParseError(flow_path, 1, f"expected header {','.join(FLOW_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(flow_path, lineno, f"expected 3 fields, got {len(row)}")
            sid, ts_text, flow_text = row
            try:
                ts = _parse_timestamp(ts_text)
            except ValueError:
                raise ParseError(flow_path, lineno, f"bad timestamp {ts_text!r}") from None
            if flow_text.strip() == "":
                value = np.nan
            else:
                try:
                    value = float(flow_text)
                except ValueError:
                    raise ParseError(flow_path, lineno, f"bad flow {flow_text!r}") from None
                if not np.isfinite(value) or value < 0:
                    raise ParseError(flow_path, lineno, f"flow must be finite and >= 0, got {flow_text!r}")
            if sid not in col:
                raise ReferentialError(f"{flow_path}:{lineno}: sensor {sid!r} not present in {meta_path}")
            prev = last_seen.get(sid)
            if prev is not None and ts <= prev:
                raise OrderingError(f"{flow_path}:{lineno}: timestamps for sensor {sid!r} are not increasing")
            last_seen[sid] = ts
            rows.append((col[sid], ts, value, lineno))

    if not rows:
        return FlowTable(tuple(sensors), np.array([], dtype="datetime64[s]"), np.zeros((0, len(sensors))))
    t0 = min(r[1] for r in rows)
    t1 = max(r[1] for r in rows)
    n_slots = int((t1 - t0).astype(np.int64) // INTERVAL_SECONDS) + 1
    flows = np.full((n_slots, len(sensors)), np.nan)
    for j, ts, value, lineno in rows:
        offset = int((ts - t0).astype(np.int64))
        if offset % INTERVAL_SECONDS:
            raise ParseError(flow_path, lineno, "timestamp is not on the 15-minute grid")
        flows[offset // INTERVAL_SECONDS, j] = value
    timestamps = t0 + np.arange(n_slots) * np.timedelta64(INTERVAL_SECONDS, "s")
    return FlowTable(tuple(sensors), timestamps, flows)


def write_meta(sensors: Sequence[SensorMeta], meta_path) -> None:
    with open(meta_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for s in sensors:
            w.writerow([s.sensor_id, repr(float(s.latitude)), repr(float(s.longitude)), s.district, s.freeway,
                        s.direction, int(s.lanes), s.detector_type])


def write_flow_table(table: FlowTable, flow_path, meta_path) -> None:
    """Write both CSVs; floats use repr so a reload is bit-exact."""
    write_meta(table.sensors, meta_path)
    stamps = [format_timestamp(t) for t in table.timestamps]
    with open(flow_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLOW_HEADER)
        for j, s in enumerate(table.sensors):
            col = table.flows[:, j]
            for t, stamp in enumerate(stamps):
                v = col[t]
                w.writerow([s.sensor_id, stamp, "" if np.isnan(v) else repr(float(v))])


# ---------------------------------------------------------------------------
# synthetic regimes
# ---------------------------------------------------------------------------

_PEAK_CONCENTRATION = 3.0
_SENSOR_SPACING_DEG = 0.01
_DISTRICT_ORIGINS = {"12": (33.70, -117.85), "4": (37.40, -121.95)}


def diurnal_curve(spec: RegimeSpec, hours) -> np.ndarray:
    """Noise-free weekday flow at the given clock hours.

    A sum of von Mises bumps (periodic in 24 h) centred on ``spec.peak_hours``,
    shifted so its mean over the 96 daily slots is zero, scaled by the
    amplitude and added to the base level; clipped at zero.
    """
    h = np.asarray(hours, dtype=np.float64)
    slots = np.arange(SLOTS_PER_DAY) / 4.0

    def shape(x):
        g = np.zeros_like(x)
        for p in spec.peak_hours:
            g += np.exp(_PEAK_CONCENTRATION * (np.cos(2.0 * np.pi * (x - p) / 24.0) - 1.0))
        return g

    if spec.base_flow == 0:
        return np.zeros_like(h)
    centre = shape(slots).mean()
    return np.maximum(0.0, spec.base_flow + spec.daily_amplitude * (shape(h) - centre))


def _district_origin(district: str, ordinal: int) -> tuple[float, float]:
    if district in _DISTRICT_ORIGINS:
        return _DISTRICT_ORIGINS[district]
    return 32.0 + 1.5 * ordinal, -116.0 - 1.5 * ordinal


def _ar1(n: int, std: float, corr: float, rng) -> np.ndarray:
    """Stationary AR(1) path with marginal std ``std``, clipped to keep flows non-negative."""
    eps = rng.standard_normal(n) * std * np.sqrt(1.0 - corr * corr)
    x = np.empty(n)
    x[0] = rng.standard_normal() * std
    for t in range(1, n):
        x[t] = corr * x[t - 1] + eps[t]
    return np.maximum(x, -0.9)


def synth_generate(regimes, days: int, seed: int, start: str = "2019-01-07 00:00:00") -> FlowTable:
    """Deterministic synthetic corridors.

    ``regimes`` is a sequence of ``(corridor_label, RegimeSpec)``; labels look
    like ``SR55-N`` and the suffix sets the travel direction. Sensors of one
    corridor sit on a straight line at fixed spacing; the two directions of a
    freeway share a line with a small lateral offset.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    regimes = list(regimes)
    if not regimes:
        raise ValueError("at least one regime is required")
    rng = np.random.default_rng(seed)
    t0 = np.datetime64(start.replace(" ", "T"), "s")
    n_slots = days * SLOTS_PER_DAY
    timestamps = t0 + np.arange(n_slots) * np.timedelta64(INTERVAL_SECONDS, "s")
    hours = ((timestamps - timestamps.astype("datetime64[D]")).astype(np.int64) / 3600.0)
    # numpy weekday: 1970-01-01 was a Thursday
    weekday = (timestamps.astype("datetime64[D]").astype(np.int64) + 3) % 7
    weekend = weekday >= 5

    districts: list[str] = []
    lines: dict[tuple[str, str], int] = {}
    sensors: list[SensorMeta] = []
    means: list[np.ndarray] = []
    specs: list[RegimeSpec] = []
    lines_seen: list[str] = []
    for label, spec in regimes:
        base, _, direction = label.rpartition("-")
        if direction not in DIRECTIONS or not base:
            raise ValueError(f"corridor label {label!r} must end in -N/-S/-E/-W")
        if spec.district not in districts:
            districts.append(spec.district)
        key = (spec.district, base)
        if key not in lines:
            lines[key] = sum(1 for k in lines if k[0] == spec.district)
        lat0, lon0 = _district_origin(spec.district, districts.index(spec.district))
        b = lines[key]
        c_lat, c_lon = lat0 + 0.05 * b, lon0 + 0.05 * b
        n = int(spec.sensor_count)
        offsets = (np.arange(n) - (n - 1) / 2.0) * _SENSOR_SPACING_DEG
        lateral = 0.002 if direction in ("S", "W") else 0.0
        curve = diurnal_curve(spec, hours) * np.where(weekend, spec.weekend_factor, 1.0)
        if spec.drift_std > 0:
            curve = curve * (1.0 + _ar1(n_slots, spec.drift_std, spec.drift_corr,
                                        np.random.default_rng([seed, 1, len(lines_seen)])))
        lines_seen.append(label)
        for s in range(n):
            if direction in ("N", "S"):
                lat, lon = c_lat + offsets[s], c_lon + lateral
            else:
                lat, lon = c_lat + lateral, c_lon + offsets[s]
            sid = f"{spec.district}{len(sensors):05d}"
            sensors.append(SensorMeta(sid, round(float(lat), 6), round(float(lon), 6), spec.district,
                                      label, direction, spec.lanes, "Mainline"))
            means.append(curve)
            specs.append(spec)

    mean = np.stack(means, axis=1)
    noise_std = np.array([s.noise_std for s in specs])
    drop_p = np.array([s.zero_dropout_prob for s in specs])
    noise = rng.standard_normal(mean.shape) * noise_std[None, :]
    drop = rng.random(mean.shape) < drop_p[None, :]
    flows = np.maximum(mean + noise, 0.0)
    flows[drop] = 0.0
    return FlowTable(tuple(sensors), timestamps, flows)


# ---------------------------------------------------------------------------
# sensor graph
# ---------------------------------------------------------------------------


def great_circle_km(lat1, lon1, lat2, lon2) -> float:
    d = kernels.haversine_matrix_numpy(np.array([lat1, lat2]), np.array([lon1, lon2]))
    return float(d[0, 1])


def gaussian_kernel_weights(distances, epsilon: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel with bandwidth = population std of the pairwise distances."""
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise DegenerateGeometryError("need at least two sensors")
    iu = np.triu_indices(n, k=1)
    sigma = d[iu].std()
    if sigma == 0.0:
        raise DegenerateGeometryError("all pairwise distances are equal; kernel bandwidth is zero")
    w = np.exp(-(d ** 2) / sigma ** 2)
    w[w < epsilon] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def _travel_position(s: SensorMeta) -> float:
    return {"N": s.latitude, "S": -s.latitude, "E": s.longitude, "W": -s.longitude}[s.direction]


def build_adjacency(meta: Sequence[SensorMeta], epsilon: float = 0.1, distances=None) -> Adjacency:
    """Directed sensor graph.

    Within a corridor only the upstream -> downstream edge keeps its weight;
    cross-corridor weights stay symmetric.
    """
    meta = list(meta)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    if distances is None:
        distances = kernels.haversine_matrix([s.latitude for s in meta], [s.longitude for s in meta])
    w = gaussian_kernel_weights(distances, epsilon)
    corridor = np.array([s.freeway for s in meta])
    pos = np.array([_travel_position(s) for s in meta])
    same = corridor[:, None] == corridor[None, :]
    upstream_edge = pos[:, None] <= pos[None, :]
    w = np.where(same & ~upstream_edge, 0.0, w)
    return Adjacency(w, directed=True, sensor_ids=tuple(s.sensor_id for s in meta))


def build_adjacency_by_district(meta: Sequence[SensorMeta], epsilon: float = 0.1) -> Adjacency:
    """Block-diagonal graph with one kernel bandwidth per district."""
    meta = list(meta)
    n = len(meta)
    w = np.zeros((n, n))
    by_district: dict[str, list[int]] = {}
    for i, s in enumerate(meta):
        by_district.setdefault(s.district, []).append(i)
    for idx in by_district.values():
        if len(idx) < 2:
            continue
        sub = build_adjacency([meta[i] for i in idx], epsilon)
        w[np.ix_(idx, idx)] = sub.weights
    return Adjacency(w, directed=True, sensor_ids=tuple(s.sensor_id for s in meta))


def weighted_degrees(adj: Adjacency, i: int) -> tuple[float, float]:
    """(in_degree, out_degree) of sensor ``i``: column sum and row sum."""
    w = adj.weights
    if not 0 <= i < w.shape[0]:
        raise IndexError(f"sensor index {i} out of range")
    return float(w[:, i].sum()), float(w[i, :].sum())


def write_adjacency_triplets(adj: Adjacency, path) -> None:
    ids = adj.sensor_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_sensor_id", "dst_sensor_id", "weight"])
        rows, cols = np.nonzero(adj.weights)
        for i, j in zip(rows, cols):
            w.writerow([ids[i], ids[j], repr(float(adj.weights[i, j]))])


def read_adjacency_triplets(path, sensor_ids: Sequence[str]) -> Adjacency:
    index = {sid: i for i, sid in enumerate(sensor_ids)}
    w = np.zeros((len(index), len(index)))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["src_sensor_id", "dst_sensor_id", "weight"]:
            raise ParseError(path, 1, "expected header src_sensor_id,dst_sensor_id,weight")
        for lineno, row in enumerate(reader, start=2):
            try:
                w[index[row[0]], index[row[1]]] = float(row[2])
            except KeyError as exc:
                raise ReferentialError(f"{path}:{lineno}: unknown sensor {exc.args[0]!r}") from None
            except (ValueError, IndexError):
                raise ParseError(path, lineno, "malformed triplet") from None
    return Adjacency(w, directed=True, sensor_ids=tuple(sensor_ids))
