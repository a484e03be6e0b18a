"""Distance, clustering and window kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``FEDFLOW_DISABLE_NUMBA`` is unset or ``0``. Both paths are always
importable as ``<name>_numpy`` / ``<name>_numba`` so they can be compared.
"""

from __future__ import annotations

import os

import numpy as np

EARTH_RADIUS_KM = 6371.0088

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("FEDFLOW_DISABLE_NUMBA", "0") in ("", "0")


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def haversine_matrix_numpy(lat, lon):
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    lam = np.radians(np.asarray(lon, dtype=np.float64))
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(a, 1.0)))
    np.fill_diagonal(d, 0.0)
    return d


def kmeans_assign_numpy(X, C):
    """Nearest-centroid labels and squared distances; ties go to the lower index."""
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(X.shape[0]), labels]


def silhouette_samples_numpy(X, labels, k):
    m = X.shape[0]
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    # sums[i, c] = total distance from point i to members of cluster c
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    sums = D @ onehot
    out = np.zeros(m)
    for i in range(m):
        own = labels[i]
        if counts[own] <= 1:
            continue
        a = sums[i, own] / (counts[own] - 1.0)
        b = np.inf
        for c in range(k):
            if c != own and counts[c] > 0:
                b = min(b, sums[i, c] / counts[c])
        denom = max(a, b)
        out[i] = 0.0 if denom == 0.0 or b == np.inf else (b - a) / denom
    return out


def valid_window_starts_numpy(series, lookback, horizon):
    """Boolean mask over t: True where series[t-lookback:t+horizon] has no NaN."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    span = lookback + horizon
    if n < span:
        return out
    bad = np.isnan(x).astype(np.int64)
    csum = np.concatenate(([0], np.cumsum(bad)))
    starts = np.arange(lookback, min(n - horizon + 1, n))
    ok = (csum[starts + horizon] - csum[starts - lookback]) == 0
    out[starts] = ok
    return out


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _haversine_nb(lat, lon, radius):
        n = lat.shape[0]
        out = np.zeros((n, n))
        phi = np.radians(lat)
        lam = np.radians(lon)
        for i in range(n):
            for j in range(i + 1, n):
                s1 = np.sin((phi[i] - phi[j]) / 2.0)
                s2 = np.sin((lam[i] - lam[j]) / 2.0)
                a = s1 * s1 + np.cos(phi[i]) * np.cos(phi[j]) * s2 * s2
                if a > 1.0:
                    a = 1.0
                d = 2.0 * radius * np.arcsin(np.sqrt(a))
                out[i, j] = d
                out[j, i] = d
        return out

    @njit(cache=True)
    def _kmeans_assign_nb(X, C):
        m, p = X.shape
        k = C.shape[0]
        labels = np.empty(m, dtype=np.int64)
        best = np.empty(m)
        for i in range(m):
            bi = 0
            bd = np.inf
            for c in range(k):
                d = 0.0
                for f in range(p):
                    t = X[i, f] - C[c, f]
                    d += t * t
                if d < bd:
                    bd = d
                    bi = c
            labels[i] = bi
            best[i] = bd
        return labels, best

    @njit(cache=True)
    def _silhouette_nb(X, labels, k):
        m, p = X.shape
        counts = np.zeros(k)
        for i in range(m):
            counts[labels[i]] += 1.0
        out = np.zeros(m)
        sums = np.zeros(k)
        for i in range(m):
            own = labels[i]
            if counts[own] <= 1.0:
                continue
            sums[:] = 0.0
            for j in range(m):
                d = 0.0
                for f in range(p):
                    t = X[i, f] - X[j, f]
                    d += t * t
                sums[labels[j]] += np.sqrt(d)
            a = sums[own] / (counts[own] - 1.0)
            b = np.inf
            for c in range(k):
                if c != own and counts[c] > 0.0:
                    v = sums[c] / counts[c]
                    if v < b:
                        b = v
            denom = max(a, b)
            out[i] = 0.0 if denom == 0.0 or b == np.inf else (b - a) / denom
        return out

    @njit(cache=True)
    def _valid_windows_nb(x, lookback, horizon):
        n = x.shape[0]
        out = np.zeros(n, dtype=np.bool_)
        if n < lookback + horizon:
            return out
        # run = number of consecutive present values ending at index i
        run = 0
        runs = np.zeros(n, dtype=np.int64)
        for i in range(n):
            if np.isnan(x[i]):
                run = 0
            else:
                run += 1
            runs[i] = run
        for t in range(lookback, min(n - horizon + 1, n)):
            out[t] = runs[t + horizon - 1] >= lookback + horizon
        return out

    def haversine_matrix_numba(lat, lon):
        return _haversine_nb(
            np.ascontiguousarray(lat, dtype=np.float64),
            np.ascontiguousarray(lon, dtype=np.float64),
            EARTH_RADIUS_KM,
        )

    def kmeans_assign_numba(X, C):
        return _kmeans_assign_nb(
            np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(C, dtype=np.float64)
        )

    def silhouette_samples_numba(X, labels, k):
        return _silhouette_nb(
            np.ascontiguousarray(X, dtype=np.float64),
            np.ascontiguousarray(labels, dtype=np.int64),
            int(k),
        )

    def valid_window_starts_numba(series, lookback, horizon):
        return _valid_windows_nb(np.ascontiguousarray(series, dtype=np.float64), int(lookback), int(horizon))

else:  # pragma: no cover
    haversine_matrix_numba = haversine_matrix_numpy
    kmeans_assign_numba = kmeans_assign_numpy
    silhouette_samples_numba = silhouette_samples_numpy
    valid_window_starts_numba = valid_window_starts_numpy


if USE_NUMBA:
    haversine_matrix = haversine_matrix_numba
    kmeans_assign = kmeans_assign_numba
    silhouette_samples = silhouette_samples_numba
    valid_window_starts = valid_window_starts_numba
else:
    haversine_matrix = haversine_matrix_numpy
    kmeans_assign = kmeans_assign_numpy
    silhouette_samples = silhouette_samples_numpy
    valid_window_starts = valid_window_starts_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
