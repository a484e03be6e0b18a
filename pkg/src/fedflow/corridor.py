"""Corridor characterisation, clustering diagnostics and Composite Selection Score."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateDataError,
    EmptyCorridorError,
    InsufficientCandidatesError,
    InsufficientPopulationError,
    SelectionEmptyError,
    UndefinedSilhouetteError,
)
from .ingest import FlowTable

DEFAULT_CSS_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
MAX_LLOYD_ITERATIONS = 300


@dataclass(frozen=True)
class CorridorFeatures:
    corridor: str
    mean_flow: float
    std_flow: float
    zero_rate: float
    sensor_count: int

    def __post_init__(self):
        if self.std_flow < 0:
            raise ValueError("std_flow must be >= 0")
        if not 0.0 <= self.zero_rate <= 1.0:
            raise ValueError("zero_rate must be in [0, 1]")
        if self.sensor_count < 1:
            raise ValueError("sensor_count must be >= 1")

    def vector(self) -> np.ndarray:
        return np.array([self.mean_flow, self.std_flow, self.zero_rate, float(self.sensor_count)])


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    k: int
    labels: tuple  # corridor label per row of the clustered matrix
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    silhouette: float
    history: tuple = ()  # inertia after each Lloyd iteration of the winning restart

    def cluster_of(self, corridor: str) -> int:
        if corridor not in self.labels:
            raise ValueError(f"unknown corridor {corridor!r}")
        return int(self.assignments[self.labels.index(corridor)])

    def members(self, cluster: int) -> list[str]:
        return [c for c, a in zip(self.labels, self.assignments) if a == cluster]


@dataclass(frozen=True)
class CssEntry:
    corridor: str
    score: float
    features: CorridorFeatures


@dataclass(frozen=True)
class CssRanking:
    entries: tuple
    weights: tuple = DEFAULT_CSS_WEIGHTS

    def scores(self) -> dict[str, float]:
        return {e.corridor: e.score for e in self.entries}

    def order(self) -> list[str]:
        return [e.corridor for e in self.entries]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def corridor_features(table: FlowTable, group_by: Mapping[str, str] | None = None) -> list[CorridorFeatures]:
    """Pooled per-corridor descriptors, in order of first appearance.

    ``group_by`` maps sensor_id -> corridor label and defaults to each
    sensor's freeway label. Missing readings are ignored.
    """
    group_by = dict(group_by) if group_by is not None else table.corridor_map()
    order: list[str] = []
    columns: dict[str, list[int]] = {}
    for j, s in enumerate(table.sensors):
        if s.sensor_id not in group_by:
            raise KeyError(f"sensor {s.sensor_id} has no corridor assignment")
        c = group_by[s.sensor_id]
        if c not in columns:
            order.append(c)
            columns[c] = []
        columns[c].append(j)
    out = []
    for c in order:
        vals = table.flows[:, columns[c]].ravel()
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise EmptyCorridorError(f"corridor {c} has no present readings")
        out.append(CorridorFeatures(c, float(vals.mean()), float(vals.std()), float(np.mean(vals <= 0)),
                                    len(columns[c])))
    return out


def feature_matrix(features: Sequence[CorridorFeatures]) -> np.ndarray:
    return np.array([f.vector() for f in features])


def zscore(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise InsufficientPopulationError("zscore needs at least two rows")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    Z = np.zeros_like(X)
    ok = sd > 0
    Z[:, ok] = (X[:, ok] - mu[ok]) / sd[ok]
    return Z


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _kmeanspp(X, k, rng) -> np.ndarray:
    m = X.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=d2 / total))
        else:
            # every remaining point coincides with a centre
            rest = np.setdiff1d(np.arange(m), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X, C, k):
    labels, d2 = kernels.kmeans_assign(X, C)
    history = []
    for _ in range(MAX_LLOYD_ITERATIONS):
        C = C.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                # reseed to the point farthest from its own centroid, lowest index on ties
                far = int(np.argmax(d2))
                C[c] = X[far]
                labels[far] = c
                d2[far] = 0.0
        new_labels, d2 = kernels.kmeans_assign(X, C)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, C, float(d2.sum()), history


def inertia(X, assignments, centroids) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(((X - np.asarray(centroids)[np.asarray(assignments)]) ** 2).sum())


def kmeans(X, k: int, seed: int, n_init: int = 5, labels: Sequence[str] | None = None) -> ClusteringResult:
    """k-means++ seeded Lloyd iterations, best of ``n_init`` restarts by inertia."""
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if not 2 <= k <= m:
        raise ValueError(f"k must satisfy 2 <= k <= {m}, got {k}")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, r])
        C0 = _kmeanspp(X, k, rng)
        lab, C, J, hist = _lloyd(X, C0, k)
        if best is None or J < best[2]:
            best = (lab, C, J, hist)
    lab, C, J, hist = best
    sil = silhouette(X, lab) if len(np.unique(lab)) >= 2 else float("nan")
    names = tuple(labels) if labels is not None else tuple(str(i) for i in range(m))
    return ClusteringResult(k, names, lab, C, J, sil, tuple(hist))


def silhouette(X, assignments) -> float:
    X = np.asarray(X, dtype=np.float64)
    a = np.asarray(assignments, dtype=np.int64)
    if X.shape[0] < 2 or len(np.unique(a)) < 2:
        raise UndefinedSilhouetteError("silhouette needs at least two clusters and two points")
    # relabel to 0..k-1 so the kernels can index densely
    _, dense = np.unique(a, return_inverse=True)
    k = int(dense.max()) + 1
    return float(kernels.silhouette_samples(X, dense.astype(np.int64), k).mean())


def elbow_sweep(X, k_values, seed: int, n_init: int = 5, labels=None) -> dict[int, ClusteringResult]:
    return {k: kmeans(X, k, seed, n_init=n_init, labels=labels) for k in k_values}


def elbow_select(inertias: Mapping[int, float], override: int | None = None) -> int:
    """Interior k with the largest second difference of inertia; ties -> smallest k."""
    if override is not None:
        return int(override)
    ks = sorted(inertias)
    if len(ks) < 4 or ks != list(range(ks[0], ks[0] + len(ks))):
        raise ValueError("elbow_select needs at least four consecutive k values")
    best_k, best = None, -np.inf
    for k in ks[1:-1]:
        d2 = inertias[k - 1] - 2.0 * inertias[k] + inertias[k + 1]
        if d2 > best:
            best_k, best = k, d2
    return best_k


def pca2(X) -> np.ndarray:
    """Projection of centred rows onto the top two covariance eigenvectors."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 3:
        raise InsufficientPopulationError("pca2 needs at least three rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals[0] <= 1e-12 * max(1.0, np.abs(X).max() ** 2):
        raise DegenerateDataError("data has rank zero")
    top = vecs[:, :2].copy()
    for c in range(2):
        if top[np.argmax(np.abs(top[:, c])), c] < 0:
            top[:, c] = -top[:, c]
    return Xc @ top


# ---------------------------------------------------------------------------
# Composite Selection Score
# ---------------------------------------------------------------------------


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def css(features: Sequence[CorridorFeatures], weights=DEFAULT_CSS_WEIGHTS) -> CssRanking:
    features = list(features)
    if len(features) < 2:
        raise InsufficientPopulationError("CSS needs at least two corridors")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
        raise ValueError("CSS weights must be four non-negative numbers summing to 1")
    F = feature_matrix(features)
    terms = np.column_stack([_minmax(F[:, 0]), _minmax(F[:, 1]), 1.0 - _minmax(F[:, 2]), _minmax(F[:, 3])])
    scores = terms @ w
    entries = [CssEntry(f.corridor, float(s), f) for f, s in zip(features, scores)]
    entries.sort(key=lambda e: (-e.score, e.corridor))
    return CssRanking(tuple(entries), tuple(float(x) for x in w))


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def select_domain_corridors(ranking: CssRanking, clustering: ClusteringResult, target_cluster,
                            max_sensors: int) -> list[str]:
    """Corridors of the target cluster within the sensor cap, in CSS order.

    ``target_cluster`` is a cluster index or a corridor label whose cluster is used.
    """
    missing = [e.corridor for e in ranking.entries if e.corridor not in clustering.labels]
    if missing:
        raise ValueError(f"clustering does not cover corridors {missing}")
    if isinstance(target_cluster, str):
        target_cluster = clustering.cluster_of(target_cluster)
    chosen = [
        e.corridor
        for e in ranking.entries
        if clustering.cluster_of(e.corridor) == target_cluster and e.features.sensor_count <= max_sensors
    ]
    if not chosen:
        raise SelectionEmptyError(f"no corridor in cluster {target_cluster} with <= {max_sensors} sensors")
    return chosen


def select_fed_clients(features: Sequence[CorridorFeatures], band=(15, 40), exclusions=(), k: int = 4,
                       seed: int = 0, weights=DEFAULT_CSS_WEIGHTS, n_init: int = 5):
    """Top-CSS corridor per cluster of the band-filtered subset.

    Returns ``(selection, clustering, ranking)`` where selection is a list of
    ``(cluster_index, corridor)`` sorted by cluster index.
    """
    lo, hi = band
    excl = set(exclusions)
    pool = [f for f in features if lo <= f.sensor_count <= hi and f.corridor not in excl]
    if len(pool) < max(k, 2):
        raise InsufficientCandidatesError(f"{len(pool)} corridors remain after filtering, need {k}")
    ranking = css(pool, weights)
    Z = zscore(feature_matrix(pool))
    clustering = kmeans(Z, k, seed, n_init=n_init, labels=[f.corridor for f in pool])
    score = ranking.scores()
    selection = []
    for c in range(k):
        members = clustering.members(c)
        if members:
            best = min(members, key=lambda name: (-score[name], name))
            selection.append((c, best))
    return selection, clustering, ranking


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

RANKING_HEADER = ["rank", "corridor", "sensors", "mean_flow", "std_flow", "zero_rate", "css"]


def write_ranking_csv(ranking: CssRanking, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_HEADER)
        for r, e in enumerate(ranking.entries, start=1):
            f = e.features
            w.writerow([r, e.corridor, f.sensor_count, f"{f.mean_flow:.2f}", f"{f.std_flow:.2f}",
                        f"{f.zero_rate:.3f}", f"{e.score:.3f}"])


def read_features_csv(path) -> list[CorridorFeatures]:
    """Read corridor features from a ranking-shaped CSV (rank and css columns optional)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CorridorFeatures(row["corridor"], float(row["mean_flow"]), float(row["std_flow"]),
                                        float(row["zero_rate"]), int(row["sensors"])))
    return out


def write_clustering_csv(sweep: Mapping[int, ClusteringResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "inertia", "silhouette"])
        for k in sorted(sweep):
            w.writerow([k, repr(sweep[k].inertia), repr(sweep[k].silhouette)])


def write_pca_csv(labels: Sequence[str], coords: np.ndarray, assignments, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corridor", "pc1", "pc2", "cluster"])
        for name, (x, y), c in zip(labels, coords, assignments):
            w.writerow([name, repr(float(x)), repr(float(y)), int(c)])
