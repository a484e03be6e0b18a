"""Structured prompts and deterministic ground-truth responses for sensor windows."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import MissingHourError
from .ingest import Adjacency, FlowTable, SensorMeta, format_timestamp, weighted_degrees

logger = logging.getLogger(__name__)

LOOKBACK = 12
HORIZON = 4
HORIZON_MINUTES = (15, 30, 45, 60)
TREND_LABELS = ("increasing", "decreasing", "stable", "mixed")
WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")

# (start hour inclusive, label); each bucket runs to the next start
DEFAULT_TIME_BUCKETS = (
    (0.0, "overnight low-flow"),
    (3.0, "early morning free-flow"),
    (7.0, "morning peak (commute buildup)"),
    (10.0, "midday steady"),
    (15.0, "evening peak (homeward commute)"),
    (19.0, "evening wind-down"),
)

SYSTEM_PROMPT = (
    "You are a traffic forecasting assistant for freeway loop-detector data. "
    "Each request describes one sensor: its metadata, its graph neighbours, long-run statistics "
    "and the most recent flow readings. Forecast the flow for the next 15, 30, 45 and 60 minutes, "
    "keep the forecast temporally continuous, and follow a monotonic trend only when the history "
    "supports it. Answer with a JSON object holding predicted_flow, avg_future_flow, trend_change, "
    "trend_label, the interval-wise, concise and step-by-step explanations, and metadata."
)


@dataclass(frozen=True)
class PromptConfig:
    lookback: int = LOOKBACK
    horizon: int = HORIZON
    congestion_theta: float = 0.7
    activity_threshold: float = 0.1  # anti-zero fires if mean(history) > this * mean_flow
    zero_floor: float = 0.25  # anti-zero floor as a fraction of mean(history)
    flat_tolerance: float = 1.0
    flat_slope: float = 1.0
    trend_tolerance: float = 5.0
    n_neighbours: int = 3
    time_buckets: tuple = DEFAULT_TIME_BUCKETS


@dataclass(frozen=True)
class SensorStats:
    mean_flow: float
    std_flow: float
    congestion_ratio: float
    flow_min: float
    flow_max: float
    hourly_profile: tuple
    weekly_profile: tuple

    def __post_init__(self):
        if self.flow_min > self.flow_max:
            raise ValueError("flow_min must not exceed flow_max")
        if not 0.0 <= self.congestion_ratio <= 1.0:
            raise ValueError("congestion_ratio must be in [0, 1]")
        object.__setattr__(self, "hourly_profile", tuple(float(v) for v in self.hourly_profile))
        object.__setattr__(self, "weekly_profile", tuple(float(v) for v in self.weekly_profile))


@dataclass(frozen=True)
class PromptContext:
    meta: SensorMeta
    in_degree: float
    out_degree: float
    stats: SensorStats
    timestamp: str  # time of the most recent observation, "YYYY-MM-DD HH:MM:SS"
    history: tuple
    trend_slope: float
    net_change: float
    typical_hourly_mean: float
    time_of_day_label: str
    neighbours: tuple = ()  # ((sensor_id, (f1, f2, f3, f4)), ...)

    def __post_init__(self):
        hist = tuple(float(v) for v in self.history)
        if len(hist) != LOOKBACK or any(math.isnan(v) for v in hist):
            raise ValueError(f"history must hold {LOOKBACK} present values")
        if len(self.neighbours) > 3:
            raise ValueError("at most three neighbours")
        object.__setattr__(self, "history", hist)
        object.__setattr__(
            self, "neighbours", tuple((str(sid), tuple(float(v) for v in fl)) for sid, fl in self.neighbours)
        )

    @property
    def datetime(self) -> np.datetime64:
        return np.datetime64(self.timestamp.replace(" ", "T"), "s")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbours"] = [[sid, list(fl)] for sid, fl in self.neighbours]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PromptContext":
        d = dict(d)
        d["meta"] = SensorMeta(**d["meta"])
        d["stats"] = SensorStats(**d["stats"])
        d["neighbours"] = tuple((sid, tuple(fl)) for sid, fl in d["neighbours"])
        d["history"] = tuple(d["history"])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruthResponse:
    predicted_flow: tuple
    avg_future_flow: float
    trend_change: float
    trend_label: str
    interval_explanations: dict
    concise_explanation: str
    step_by_step: tuple
    metadata: dict

    def to_json_dict(self) -> dict:
        return {
            "predicted_flow": list(self.predicted_flow),
            "avg_future_flow": self.avg_future_flow,
            "trend_change": self.trend_change,
            "trend_label": self.trend_label,
            "Interval-wise Explanation": dict(self.interval_explanations),
            "Concise Analytical Explanation": self.concise_explanation,
            "Step-by-step Explanation": list(self.step_by_step),
            "metadata": dict(self.metadata),
        }

    def to_text(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, ensure_ascii=False)


# ---------------------------------------------------------------------------
# per-sensor statistics
# ---------------------------------------------------------------------------


def _clock_hours(timestamps) -> np.ndarray:
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    return ((ts - ts.astype("datetime64[D]")).astype(np.int64) // 3600).astype(np.int64)


def _weekdays(timestamps) -> np.ndarray:
    days = np.asarray(timestamps, dtype="datetime64[s]").astype("datetime64[D]").astype(np.int64)
    return ((days + 3) % 7).astype(np.int64)  # Monday = 0


def _group_means(values, groups, n_groups):
    """Mean of present values per group index; empty groups give NaN."""
    v = np.asarray(values, dtype=np.float64)
    present = ~np.isnan(v)
    g = np.asarray(groups, dtype=np.int64)[present]
    counts = np.bincount(g, minlength=n_groups)
    sums = np.bincount(g, weights=v[present], minlength=n_groups)
    means = np.full(n_groups, np.nan)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means, counts


def hourly_profile(series, timestamps) -> np.ndarray:
    means, counts = _group_means(series, _clock_hours(timestamps), 24)
    if np.any(counts == 0):
        raise MissingHourError(f"no present reading for hours {np.flatnonzero(counts == 0).tolist()}")
    return means


def weekly_profile(series, timestamps) -> np.ndarray:
    means, counts = _group_means(series, _weekdays(timestamps), 7)
    if np.any(counts == 0):
        raise MissingHourError(f"no present reading for weekdays {np.flatnonzero(counts == 0).tolist()}")
    return means


def congestion_ratio(series, theta: float = 0.7) -> float:
    """Fraction of present readings strictly above ``theta`` times the series maximum."""
    x = np.asarray(series, dtype=np.float64)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("congestion_ratio needs at least one present reading")
    return float(np.mean(x > theta * x.max()))


def sensor_stats(series, timestamps, theta: float = 0.7) -> SensorStats:
    x = np.asarray(series, dtype=np.float64)
    present = x[~np.isnan(x)]
    if present.size == 0:
        raise ValueError("sensor has no present readings")
    return SensorStats(
        mean_flow=float(present.mean()),
        std_flow=float(present.std()),
        congestion_ratio=congestion_ratio(present, theta),
        flow_min=float(present.min()),
        flow_max=float(present.max()),
        hourly_profile=tuple(hourly_profile(x, timestamps)),
        weekly_profile=tuple(weekly_profile(x, timestamps)),
    )


# ---------------------------------------------------------------------------
# dynamic context
# ---------------------------------------------------------------------------


def trend_slope(last4) -> float:
    """Endpoint slope over the last four readings, vehicles/15 min per step."""
    v = [float(x) for x in last4]
    if len(v) != 4:
        raise ValueError("trend_slope needs exactly four values")
    return (v[3] - v[0]) / 3.0


def net_change(history) -> float:
    """Change over the last three intervals (45 minutes)."""
    h = [float(x) for x in history]
    if len(h) != LOOKBACK:
        raise ValueError(f"net_change needs {LOOKBACK} values")
    return h[11] - h[8]


def history_slope(history) -> float:
    """Least-squares slope over the whole history window."""
    y = np.asarray(history, dtype=np.float64)
    x = np.arange(y.size, dtype=np.float64)
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def time_of_day_label(timestamp, buckets=DEFAULT_TIME_BUCKETS) -> str:
    ts = np.datetime64(str(timestamp).replace(" ", "T"), "s")
    hour = (ts - ts.astype("datetime64[D]")).astype(np.int64) / 3600.0
    label = buckets[0][1]
    for start, name in buckets:
        if hour >= start:
            label = name
    return label


def top_neighbours(adj: Adjacency, i: int, freeway_of: Sequence[str], k: int = 3) -> list[int]:
    """Up to ``k`` same-freeway sensors with the largest outgoing weight from ``i``."""
    row = adj.weights[i]
    cands = [j for j in range(row.shape[0]) if j != i and row[j] > 0 and freeway_of[j] == freeway_of[i]]
    cands.sort(key=lambda j: (-row[j], j))
    return cands[:k]


def build_context(table: FlowTable, adj: Adjacency, i: int, t: int, stats: SensorStats,
                  cfg: PromptConfig = PromptConfig(), neighbours: Sequence[int] | None = None):
    """Context for sensor ``i`` whose most recent observation is row ``t - 1``.

    Returns None when the history or a neighbour's recent flows have gaps.
    """
    L = cfg.lookback
    if t < L:
        return None
    hist = table.flows[t - L:t, i]
    if np.isnan(hist).any():
        return None
    if neighbours is None:
        neighbours = top_neighbours(adj, i, [s.freeway for s in table.sensors], cfg.n_neighbours)
    nb = []
    for j in neighbours:
        recent = table.flows[t - 4:t, j]
        if np.isnan(recent).any():
            return None
        nb.append((table.sensors[j].sensor_id, tuple(recent)))
    stamp = table.timestamps[t - 1]
    hour = int(_clock_hours(stamp[None])[0])
    in_deg, out_deg = weighted_degrees(adj, i)
    return PromptContext(
        meta=table.sensors[i],
        in_degree=in_deg,
        out_degree=out_deg,
        stats=stats,
        timestamp=format_timestamp(stamp),
        history=tuple(hist),
        trend_slope=trend_slope(hist[-4:]),
        net_change=net_change(hist),
        typical_hourly_mean=stats.hourly_profile[hour],
        time_of_day_label=time_of_day_label(stamp, cfg.time_buckets),
        neighbours=tuple(nb),
    )


# ---------------------------------------------------------------------------
# targets and labels
# ---------------------------------------------------------------------------


def adjust_targets(raw_future, ctx: PromptContext, cfg: PromptConfig = PromptConfig()) -> list[float]:
    """Anti-zero floor, range clamp, then anti-flat extrapolation (clamped again)."""
    lo, hi = ctx.stats.flow_min, ctx.stats.flow_max
    v = np.asarray(raw_future, dtype=np.float64).copy()
    hist_mean = float(np.mean(ctx.history))
    floor = None
    if hist_mean > cfg.activity_threshold * ctx.stats.mean_flow:
        floor = min(cfg.zero_floor * hist_mean, hi)

    def bound(x):
        if floor is not None:
            x = np.maximum(x, floor)
        return np.clip(x, lo, hi)

    v = bound(v)
    slope = ctx.trend_slope
    if v.max() - v.min() <= cfg.flat_tolerance and abs(slope) > cfg.flat_slope:
        v = bound(v[0] + slope * np.arange(v.size))
    return [float(x) for x in v]


def trend_label(predicted, last_observed: float, tol: float = 5.0) -> str:
    p = [float(x) for x in predicted]
    d = p[-1] - float(last_observed)
    steps = np.diff(p)
    if d > tol and np.all(steps >= -tol):
        return "increasing"
    if d < -tol and np.all(steps <= tol):
        return "decreasing"
    if abs(d) <= tol and np.all(np.abs(steps) <= tol):
        return "stable"
    return "mixed"


def congestion_band(ratio: float) -> str:
    if ratio < 0.15:
        return "low"
    if ratio < 0.4:
        return "moderate"
    return "high"


def flow_regime(history, flow_max: float) -> str:
    m = float(np.mean(history))
    if m < 0.4 * flow_max:
        return "free-flow"
    if m < 0.7 * flow_max:
        return "transitional"
    return "congested-capacity"


def coefficient_of_variation(history) -> float:
    h = np.asarray(history, dtype=np.float64)
    m = h.mean()
    return float(h.std() / m) if m > 0 else 0.0


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _num(x, nd: int = 3) -> str:
    v = round(float(x), nd)
    if v == 0:
        v = 0.0
    return repr(v)


def _signed(x, nd: int = 2) -> str:
    s = _num(x, nd)
    return s if s.startswith("-") else "+" + s


def _list(values, nd: int = 3) -> str:
    return "[" + ", ".join(_num(v, nd) for v in values) + "]"


def render_prompt(ctx: PromptContext) -> str:
    m, st = ctx.meta, ctx.stats
    ts = ctx.datetime
    weekday = WEEKDAYS[int(_weekdays(ts[None])[0])]
    lines = [
        "The following sensor information is provided:",
        f"- Location: Sensor ID {m.sensor_id}, District {m.district}.",
        f"- Coordinates: Latitude {m.latitude:.6f}, Longitude {m.longitude:.6f}.",
        f"- Freeway: {m.freeway} ({m.direction}) with {m.lanes} lanes, detector type {m.detector_type}.",
        f"- Range of observed flows: {_num(st.flow_min)}-{_num(st.flow_max)} vehicles / 15 min.",
        f"- Spatial metrics: in_degree={_num(ctx.in_degree)}, out_degree={_num(ctx.out_degree)}.",
    ]
    if ctx.neighbours:
        lines.append("- Top neighbouring sensors: " + ", ".join(sid for sid, _ in ctx.neighbours))
        lines.append("- Neighbour recent flows (last 1 hour): "
                     + "; ".join(f"{sid}: {_list(fl, 1)}" for sid, fl in ctx.neighbours))
    else:
        lines.append("- Top neighbouring sensors: none (no same-freeway neighbour in the sensor graph)")
    lines += [
        f"- Statistical summary: mean_flow={_num(st.mean_flow)}, std_flow={_num(st.std_flow)}, "
        f"congestion_ratio={_num(st.congestion_ratio)}",
        f"- Hourly profile (24-hour mean pattern): {_list(st.hourly_profile, 1)}",
        "- Weekly pattern (vehicles/15 min): "
        + ", ".join(f"{d}: {_num(v, 1)}" for d, v in zip(WEEKDAYS, st.weekly_profile)),
        f"- Typical hourly mean at this time: {_num(ctx.typical_hourly_mean, 1)} vehicles / 15 min",
        "",
        "Current time context:",
        f"- Timestamp: {ctx.timestamp} ({weekday}, {ctx.time_of_day_label})",
        f"- Past 12 flows: {_list(ctx.history, 1)}",
        f"- Recent trend slope (last 4 points): {_num(ctx.trend_slope)} vehicles / 15 min",
        f"- Net change over last 45 minutes: {_num(ctx.net_change)} vehicles",
        "",
        "Task: Predict the traffic flow for the next 15, 30, 45 and 60 minutes and explain the reasoning. "
        "Return the answer as valid JSON.",
    ]
    return "\n".join(lines)


_DIRECTION_WORDS = {
    "up": ("rise to", "strengthening"),
    "down": ("ease to", "softening"),
    "flat": ("hold near", "steady"),
}


def _direction(delta: float, tol: float) -> str:
    if delta > tol:
        return "up"
    if delta < -tol:
        return "down"
    return "flat"


def build_response(flows, ctx: PromptContext, cfg: PromptConfig = PromptConfig()) -> GroundTruthResponse:
    """Structured response for the given four horizon flows (no target adjustment)."""
    pred = tuple(round(float(v), 2) for v in flows)
    last = ctx.history[-1]
    avg = sum(pred) / len(pred)
    change = pred[-1] - last
    label = trend_label(pred, last, cfg.trend_tolerance)
    tod = ctx.time_of_day_label
    cr = ctx.stats.congestion_ratio
    band = congestion_band(cr)
    cv = coefficient_of_variation(ctx.history)
    regime = flow_regime(ctx.history, ctx.stats.flow_max)
    nb_ids = ", ".join(sid for sid, _ in ctx.neighbours)

    tails = (
        "indicating {mood} conditions in the next interval.",
        "along {freeway}.",
        "consistent with the {tod} period.",
        "relative to the most recent reading.",
    )
    intervals = {}
    for minutes, value, tail in zip(HORIZON_MINUTES, pred, tails):
        delta = value - last
        verb, mood = _DIRECTION_WORDS[_direction(delta, cfg.trend_tolerance)]
        intervals[f"{minutes}-min ahead"] = (
            f"Flow is expected to {verb} ~{_num(value, 2)} ({_signed(delta)}), "
            + tail.format(mood=mood, freeway=ctx.meta.freeway, tod=tod)
        )
    overall = (
        f"The sequence shows {'an' if label[0] in 'aeiou' else 'a'} {label} trend (net change over last 45 min = {_signed(ctx.net_change)} veh, "
        f"CV={_num(cv, 2)}, congestion ratio={_num(cr, 2)})."
    )
    if nb_ids:
        overall += f" Neighbour sensors {nb_ids} provide the local spatial context on {ctx.meta.freeway}."
    else:
        overall += " No same-freeway neighbour readings are available."
    intervals["Overall"] = overall

    outlook = {
        "increasing": "increase",
        "decreasing": "decrease",
        "stable": "remain stable",
        "mixed": "fluctuate",
    }[label]
    concise = (
        f"Traffic is expected to {outlook} over the next hour during the {tod} period, "
        f"with a {regime} regime at this sensor. [Congestion: {band}, ratio={_num(cr, 2)}]."
    )

    ts = ctx.datetime
    hhmm = f"{int(_clock_hours(ts[None])[0])}:{str(ctx.timestamp)[14:16]}"
    weekday = WEEKDAYS[int(_weekdays(ts[None])[0])]
    regime_note = {
        "free-flow": "<40% of observed capacity",
        "transitional": "40-70% of observed capacity",
        "congested-capacity": ">=70% of observed capacity",
    }[regime]
    slope12 = history_slope(ctx.history)
    spatial = (
        f"5. Spatial Context: Neighbouring sensors ({nb_ids}) share the {ctx.meta.freeway} corridor."
        if nb_ids
        else "5. Spatial Context: No same-freeway neighbours are connected downstream."
    )
    agree = (slope12 >= 0) == (change >= 0)
    interpretation = (
        f"7. Interpretation: The {label} outlook for {ctx.meta.freeway} "
        + ("agrees with" if agree else "departs from")
        + f" the recent {'rising' if slope12 >= 0 else 'falling'} history, in line with {tod} dynamics."
    )
    steps = (
        f"1. Time Context: {hhmm} on {weekday} ({tod}).",
        f"2. Historical Observation: Last 12 readings {_list(ctx.history, 2)}, avg={_num(np.mean(ctx.history), 2)}, "
        f"slope={_num(slope12, 2)}.",
        f"3. Flow Regime: {regime} regime ({regime_note}).",
        f"4. Congestion & Variability: ratio={_num(cr, 2)} ({band}), historical std={_num(ctx.stats.std_flow, 2)}, "
        f"CV={_num(cv, 2)}.",
        spatial,
        f"6. Predicted Future Trend: Next 15-60 min flows {_list(pred, 2)}, avg={_num(avg, 2)}, "
        f"delta(last)={_signed(change)}.",
        interpretation,
    )
    return GroundTruthResponse(
        predicted_flow=pred,
        avg_future_flow=avg,
        trend_change=change,
        trend_label=label,
        interval_explanations=intervals,
        concise_explanation=concise,
        step_by_step=steps,
        metadata={"sensor_id": ctx.meta.sensor_id, "timestamp": ctx.timestamp},
    )


def make_ground_truth(ctx: PromptContext, true_future, cfg: PromptConfig = PromptConfig()) -> GroundTruthResponse:
    return build_response(adjust_targets(true_future, ctx, cfg), ctx, cfg)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def make_record(ctx: PromptContext, true_future, cfg: PromptConfig = PromptConfig()) -> dict:
    resp = make_ground_truth(ctx, true_future, cfg)
    return {
        "system": SYSTEM_PROMPT,
        "user": render_prompt(ctx),
        "response": resp.to_json_dict(),
        "sensor_id": ctx.meta.sensor_id,
        "timestamp": ctx.timestamp,
        "corridor": ctx.meta.freeway,
        "targets": list(resp.predicted_flow),
        "true_future": [float(v) for v in true_future],
        "trend_label": resp.trend_label,
        "context": ctx.to_dict(),
    }


def generate_records(period: FlowTable, stats_period: FlowTable, adj: Adjacency, corridors: Sequence[str],
                     n_samples: int | None, seed: int, cfg: PromptConfig = PromptConfig()) -> list[dict]:
    """Prompt records for sensors of ``corridors`` drawn from ``period``.

    Statistics come from ``stats_period`` (the training span). ``adj`` is
    indexed like ``period.sensors``. Windows with any gap are skipped; when
    ``n_samples`` is given a seeded sample without replacement is taken.
    """
    wanted = set(corridors)
    freeway_of = [s.freeway for s in period.sensors]
    candidates = []
    stats_by_sensor = {}
    neighbours_by_sensor = {}
    for i, s in enumerate(period.sensors):
        if s.freeway not in wanted:
            continue
        try:
            st = sensor_stats(stats_period.flows[:, stats_period.index_of(s.sensor_id)], stats_period.timestamps,
                              cfg.congestion_theta)
        except (MissingHourError, ValueError) as exc:
            logger.warning("skipping sensor %s: %s", s.sensor_id, exc)
            continue
        if st.flow_max <= 0:
            logger.warning("skipping sensor %s: no positive flow in training span", s.sensor_id)
            continue
        stats_by_sensor[i] = st
        nbs = top_neighbours(adj, i, freeway_of, cfg.n_neighbours)
        neighbours_by_sensor[i] = nbs
        ok = kernels.valid_window_starts(period.flows[:, i], cfg.lookback, cfg.horizon)
        for j in nbs:
            ok &= kernels.valid_window_starts(period.flows[:, j], 4, 0)
        for t in np.flatnonzero(ok):
            candidates.append((i, int(t)))
    if n_samples is not None and n_samples < len(candidates):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(candidates), size=n_samples, replace=False))
        candidates = [candidates[k] for k in pick]
    records = []
    for i, t in candidates:
        ctx = build_context(period, adj, i, t, stats_by_sensor[i], cfg, neighbours_by_sensor[i])
        if ctx is None:
            continue
        future = period.flows[t:t + cfg.horizon, i]
        records.append(make_record(ctx, future, cfg))
    return records


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_context(record: dict) -> PromptContext:
    return PromptContext.from_dict(record["context"])
