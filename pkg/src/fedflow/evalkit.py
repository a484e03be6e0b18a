"""Forecast metrics, response parsing with a regex fallback, and report export."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyEvaluationError, OverlapError, SampleSizeError, ZeroSamplesError
from .promptgen import HORIZON_MINUTES, PromptConfig, record_context

REPORT_HEADER = ["scope", "horizon", "mae", "rmse", "mape", "r2", "n", "extraction_failures"]


@dataclass(frozen=True)
class MetricSet:
    mae: float
    rmse: float
    mape: float  # percent; NaN when every truth is zero
    r2: float  # NaN marks an undefined value (constant truths)
    n: int
    mape_excluded: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.rmse < self.mae * (1 - 1e-12) - 1e-12:
            raise ValueError(f"inconsistent metrics: mae={self.mae}, rmse={self.rmse}")
        if not math.isnan(self.r2) and self.r2 > 1 + 1e-12:
            raise ValueError(f"r2 above 1: {self.r2}")

    @property
    def r2_defined(self) -> bool:
        return not math.isnan(self.r2)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(y, yhat) -> MetricSet:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape[0]} truths vs {yhat.shape[0]} predictions")
    if y.size == 0:
        raise ValueError("metrics need at least one sample")
    err = yhat - y
    mae = float(np.abs(err).mean())
    rmse = float(math.sqrt((err ** 2).mean()))
    # guard against rounding putting rmse a hair below mae
    rmse = max(rmse, mae)
    nz = y != 0
    excluded = int((~nz).sum())
    with np.errstate(over="ignore"):
        mape = float(np.abs(err[nz] / y[nz]).mean() * 100.0) if nz.any() else float("nan")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = float("nan") if ss_tot == 0 else 1.0 - float((err ** 2).sum()) / ss_tot
    return MetricSet(mae, rmse, mape, r2, int(y.size), excluded)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Extraction:
    predicted_flow: tuple
    avg_future_flow: float | None = None
    trend_change: float | None = None
    trend_label: str | None = None
    strategy: str = "json"
    ok: bool = True


@dataclass(frozen=True)
class ExtractionFailure:
    json_error: str
    regex_error: str
    ok: bool = False

    def __str__(self):
        return f"json: {self.json_error}; regex: {self.regex_error}"


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_FLOW_RE = re.compile(r'"predicted_flow"\s*:\s*\[([^\]]*)\]?')
_AVG_RE = re.compile(r'"avg_future_flow"\s*:\s*(' + _NUM + ")")
_CHANGE_RE = re.compile(r'"trend_change"\s*:\s*(' + _NUM + ")")
_LABEL_RE = re.compile(r'"trend_label"\s*:\s*"?([A-Za-z]+)')


def _to_float(v):
    if isinstance(v, bool) or v is None:
        return None
    try:
        f = float(v)
    except (TypeError, ValueError):
        return None
    return f if math.isfinite(f) else None


def _from_json(text: str):
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        return None, f"not valid JSON ({exc})"
    if not isinstance(obj, dict):
        return None, "JSON value is not an object"
    flows = obj.get("predicted_flow")
    if not isinstance(flows, list) or len(flows) != 4:
        return None, "predicted_flow missing or not a list of 4"
    vals = [_to_float(v) for v in flows]
    if any(v is None for v in vals):
        return None, "predicted_flow has non-numeric entries"
    label = obj.get("trend_label")
    return Extraction(tuple(vals), _to_float(obj.get("avg_future_flow")), _to_float(obj.get("trend_change")),
                      label if isinstance(label, str) else None, "json"), ""


def _from_regex(text: str):
    m = _FLOW_RE.search(text)
    if m is None:
        return None, 'no "predicted_flow" list found'
    nums = re.findall(_NUM, m.group(1))[:4]
    if len(nums) < 4:
        return None, f"only {len(nums)} of 4 predicted_flow values recovered"
    vals = [float(v) for v in nums]
    if not all(math.isfinite(v) for v in vals):
        return None, "non-finite predicted_flow values"
    avg = _AVG_RE.search(text)
    change = _CHANGE_RE.search(text)
    label = _LABEL_RE.search(text)
    return Extraction(tuple(vals), float(avg.group(1)) if avg else None, float(change.group(1)) if change else None,
                      label.group(1) if label else None, "regex"), ""


def extract_prediction(text) -> Extraction | ExtractionFailure:
    """Read the forecast from model output text; never raises."""
    if not isinstance(text, str):
        return ExtractionFailure("input is not text", "input is not text")
    got, json_err = _from_json(text)
    if got is not None:
        return got
    got, regex_err = _from_regex(text)
    if got is not None:
        return got
    return ExtractionFailure(json_err, regex_err)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_horizon: dict  # minutes -> MetricSet
    overall: MetricSet
    n_records: int
    extraction_failures: int
    per_client: dict = field(default_factory=dict)
    zero_shot: bool = False
    scope: str = "global"

    @property
    def failure_rate(self) -> float:
        return self.extraction_failures / self.n_records if self.n_records else 0.0

    def rows(self, scope: str | None = None) -> list[dict]:
        scope = scope or self.scope
        out = []
        for h in HORIZON_MINUTES:
            out.append(_row(scope, h, self.per_horizon[h], self.extraction_failures))
        out.append(_row(scope, "overall", self.overall, self.extraction_failures))
        return out


def _row(scope, horizon, m: MetricSet, failures) -> dict:
    return {"scope": scope, "horizon": horizon, "mae": m.mae, "rmse": m.rmse, "mape": m.mape, "r2": m.r2,
            "n": m.n, "extraction_failures": failures}


def _responses(model, records: Sequence[dict], cfg: PromptConfig) -> list[str]:
    if hasattr(model, "forward"):
        from .adapter import featurize, render_response

        ctxs = [record_context(r) for r in records]
        X = np.stack([featurize(c) for c in ctxs])
        flows, logits = model.forward(X)
        return [render_response((flows[i], logits[i]), c, cfg) for i, c in enumerate(ctxs)]
    if callable(model):
        return [model(r) for r in records]
    raise TypeError("model must expose forward() or be a callable record -> text")


def evaluate(model, records: Sequence[dict], cfg: PromptConfig = PromptConfig(), scope: str = "global",
             truth_key: str = "true_future") -> EvalReport:
    """Render, extract and score. Flows are de-normalised with each record's flow_max."""
    if not records:
        raise ValueError("no records to evaluate")
    texts = _responses(model, records, cfg)
    ys, yhats, failures = [], [], 0
    for rec, text in zip(records, texts):
        got = extract_prediction(text)
        if not got.ok:
            failures += 1
            continue
        ys.append(rec[truth_key])
        yhats.append(got.predicted_flow)
    if not ys:
        raise EmptyEvaluationError(f"all {len(records)} extractions failed")
    Y = np.asarray(ys, dtype=np.float64)
    P = np.asarray(yhats, dtype=np.float64)
    per_h = {h: metrics(Y[:, j], P[:, j]) for j, h in enumerate(HORIZON_MINUTES)}
    return EvalReport(per_h, metrics(Y, P), len(records), failures, scope=scope)


def global_weighted(reports: Sequence, pooled: bool = False, residuals=None) -> MetricSet:
    """Sample-weighted average of per-client metrics.

    ``reports`` holds ``(MetricSet, n_k)`` pairs. With ``pooled=True`` the
    metrics are instead recomputed on ``residuals``, a list of per-client
    ``(y, yhat)`` arrays concatenated in the given order.
    """
    if pooled:
        if not residuals:
            raise ValueError("pooled mode needs per-client (y, yhat) residuals")
        y = np.concatenate([np.asarray(r[0], dtype=np.float64).ravel() for r in residuals])
        yhat = np.concatenate([np.asarray(r[1], dtype=np.float64).ravel() for r in residuals])
        return metrics(y, yhat)
    if not reports:
        raise ValueError("at least one client report is required")
    total = sum(n for _, n in reports)
    if total <= 0:
        raise ZeroSamplesError("zero total samples")

    def wavg(attr):
        vals = [(getattr(m, attr), n) for m, n in reports]
        vals = [(v, n) for v, n in vals if not math.isnan(v)]
        if not vals:
            return float("nan")
        tot = sum(n for _, n in vals)
        return sum(v * n for v, n in vals) / tot

    mae, rmse = wavg("mae"), wavg("rmse")
    return MetricSet(mae, max(rmse, mae), wavg("mape"), wavg("r2"), int(sum(m.n for m, _ in reports)),
                     int(sum(m.mape_excluded for m, _ in reports)))


def weighted_report(client_reports: Mapping[str, EvalReport]) -> EvalReport:
    """Combine per-client reports horizon by horizon with record-count weights."""
    if not client_reports:
        raise ValueError("at least one client report is required")
    reps = list(client_reports.values())
    per_h = {h: global_weighted([(r.per_horizon[h], r.n_records - r.extraction_failures) for r in reps])
             for h in HORIZON_MINUTES}
    overall = global_weighted([(r.overall, r.n_records - r.extraction_failures) for r in reps])
    return EvalReport(per_h, overall, sum(r.n_records for r in reps), sum(r.extraction_failures for r in reps),
                      per_client=dict(client_reports))


def zero_shot_eval(model, records: Sequence[dict], sample_sizes: Sequence[int], train_corridors, seed: int = 0,
                   cfg: PromptConfig = PromptConfig()) -> list[EvalReport]:
    """Evaluate on seeded samples of an unseen region; corridors must not overlap training."""
    overlap = sorted({r["corridor"] for r in records} & set(train_corridors))
    if overlap:
        raise OverlapError(f"zero-shot corridors overlap training corridors: {overlap}")
    out = []
    for size in sample_sizes:
        if size > len(records) or size <= 0:
            raise SampleSizeError(f"requested {size} samples, {len(records)} available")
        rng = np.random.default_rng([seed, size])
        idx = np.sort(rng.choice(len(records), size=size, replace=False))
        rep = evaluate(model, [records[i] for i in idx], cfg, scope=f"zero-shot-{size}")
        rep.zero_shot = True
        out.append(rep)
    return out


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def hourly_profile_baseline(record: dict) -> str:
    """Predict each horizon as the sensor's typical hourly mean; returns JSON text."""
    ctx = record_context(record)
    v = round(float(ctx.typical_hourly_mean), 2)
    return json.dumps({"predicted_flow": [v] * 4})


def ground_truth_model(record: dict) -> str:
    return json.dumps({"predicted_flow": list(record["true_future"])})


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_report_csv(reports: Mapping[str, EvalReport], path) -> None:
    """One block of rows per scope label (client-k, global, zero-shot...)."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER)
        w.writeheader()
        for scope, rep in reports.items():
            for row in rep.rows(scope):
                w.writerow(row)


def write_horizon_series_csv(reports: Mapping[str, EvalReport], path, metric_names=("mae", "rmse", "mape", "r2")):
    """Long-format per-horizon series for plotting: scope, metric, 15, 30, 45, 60."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "metric", *HORIZON_MINUTES])
        for scope, rep in reports.items():
            for name in metric_names:
                w.writerow([scope, name, *(getattr(rep.per_horizon[h], name) for h in HORIZON_MINUTES)])


def report_to_dict(rep: EvalReport) -> dict:
    return {
        "per_horizon": {str(h): m.to_dict() for h, m in rep.per_horizon.items()},
        "overall": rep.overall.to_dict(),
        "n_records": rep.n_records,
        "extraction_failures": rep.extraction_failures,
        "zero_shot": rep.zero_shot,
        "scope": rep.scope,
    }
