"""K-means++ seeding, Lloyd iterations, silhouette-based k selection and
assignment of new vectors to fitted clusters."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

MAX_ITER = 300
TOL = 1e-4
RESTARTS = 5


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class KScanEntry:
    k: int
    silhouette: float
    inertia: float


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (k, m)
    labels: np.ndarray  # (n,) training assignments
    inertia: float
    seed: int = 0
    n_iter: int = 0
    inertia_history: tuple[float, ...] = ()
    k_scan: tuple[KScanEntry, ...] = field(default=())

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def m(self) -> int:
        return self.centroids.shape[1]

    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.k).tolist()


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # cdist sums explicit differences (no |x|^2 - 2xc + |c|^2 expansion), so
    # coincident points give exact zeros, which the tie rules rely on
    return cdist(points, centroids, "sqeuclidean")


def _points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ClusterError(f"points must be 2-D, got shape {x.shape}")
    return x


def kmeanspp_indices(points, k: int, seed: int = 0) -> list[int]:
    x = _points(points)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ClusterError(f"k must satisfy 1 <= k <= n ({n}), got {k}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    closest = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            cum = np.cumsum(closest)
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
            while closest[idx] == 0:  # guard against landing on a zero-weight slot by rounding
                idx -= 1
        else:
            # only duplicates of chosen centres remain
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(free.size)])
        chosen.append(idx)
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return chosen


def kmeanspp_init(points, k: int, seed: int = 0) -> np.ndarray:
    """Pick k initial centres: first uniformly, the rest with D^2 weighting."""
    x = _points(points)
    return x[kmeanspp_indices(x, k, seed)].copy()


def assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (lowest index on ties) and squared distances."""
    d2 = _sq_dists(points, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def lloyd(points, init_centroids, max_iter: int = MAX_ITER, tol: float = TOL, seed: int = 0) -> ClusterModel:
    """Lloyd iterations from the given centres.

    Stops when no centroid moves by ``tol`` or more, or after ``max_iter``
    updates. A cluster that empties is moved onto the point currently farthest
    from its own centroid.
    """
    if max_iter < 1:
        raise ClusterError("max_iter must be >= 1")
    if tol < 0:
        raise ClusterError("tol must be >= 0")
    x = _points(points)
    c = np.array(init_centroids, dtype=np.float64, copy=True)
    if c.ndim != 2 or c.shape[1] != x.shape[1]:
        raise ClusterError(f"centroids shape {c.shape} does not match points width {x.shape[1]}")
    k = c.shape[0]
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = assign(x, c)
        history.append(float(d2.sum()))
        new = np.empty_like(c)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            far = d2.copy()
            for j in empty:
                idx = int(np.argmax(far))
                new[j] = x[idx]
                far[idx] = -1.0
        shift = float(np.max(np.linalg.norm(new - c, axis=1)))
        c = new
        if shift < tol:
            break
    labels, d2 = assign(x, c)
    inertia = float(d2.sum())
    history.append(inertia)
    return ClusterModel(c, labels, inertia, seed, n_iter, tuple(history))


def kmeans(points, k: int, seed: int = 0, restarts: int = RESTARTS, max_iter: int = MAX_ITER, tol: float = TOL) -> ClusterModel:
    """Best (lowest inertia) of ``restarts`` seeded K-means++ runs; run i uses seed + i."""
    x = _points(points)
    best = None
    for i in range(max(1, restarts)):
        model = lloyd(x, kmeanspp_init(x, k, seed + i), max_iter, tol, seed)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def silhouette(points, labels) -> float:
    x = _points(points)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ClusterError("silhouette needs at least 2 clusters")
    dist = cdist(x, x)
    n = x.shape[0]
    # mean distance from each point to each cluster
    onehot = (labels[:, None] == uniq[None, :]).astype(float)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot
    own = np.searchsorted(uniq, labels)
    own_size = sizes[own]
    scores = np.zeros(n)
    multi = own_size > 1
    a = sums[np.arange(n), own] / np.where(multi, own_size - 1, 1)
    other = sums / sizes
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    ok = multi & (denom > 0)
    scores[ok] = (b[ok] - a[ok]) / denom[ok]
    return float(scores.mean())


def default_k_range(n: int) -> tuple[int, int]:
    k_max = min(50, n // 10, n - 1)
    return 2, max(2, k_max)


def scan_k(
    points,
    k_min: int | None = None,
    k_max: int | None = None,
    restarts: int = RESTARTS,
    seed: int = 0,
    workers: int = 1,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
) -> ClusterModel:
    """Fit k = k_min..k_max and keep the model with the best silhouette.

    Ties go to the smaller k. With ``k_min == k_max`` this is a plain
    fixed-k fit.
    """
    x = _points(points)
    n = x.shape[0]
    if n < 3:
        raise ClusterError(f"scan_k needs at least 3 points, got {n}")
    d_min, d_max = default_k_range(n)
    k_min = d_min if k_min is None else k_min
    k_max = max(k_min, d_max) if k_max is None else k_max
    if not 2 <= k_min <= k_max <= n - 1:
        raise ClusterError(f"need 2 <= k_min <= k_max <= n-1 ({n - 1}), got {k_min}..{k_max}")

    def fit(k):
        model = kmeans(x, k, seed, restarts, max_iter, tol)
        if np.unique(model.labels).size < 2:
            return model, -1.0
        return model, silhouette(x, model.labels)

    ks = list(range(k_min, k_max + 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit, ks))
    else:
        results = [fit(k) for k in ks]
    scan = tuple(KScanEntry(k, s, m.inertia) for k, (m, s) in zip(ks, results))
    best = max(range(len(ks)), key=lambda i: (results[i][1], -ks[i]))
    return replace(results[best][0], k_scan=scan)


def predict(model: ClusterModel, vectors) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and Euclidean distances for new vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.m:
        raise ClusterError(f"expected vectors of width {model.m}, got {x.shape[1]}")
    labels, d2 = assign(x, model.centroids)
    return labels, np.sqrt(d2)


def inertia_of(points, labels, centroids) -> float:
    x = _points(points)
    c = np.asarray(centroids, dtype=np.float64)
    diff = x - c[np.asarray(labels)]
    return float(np.einsum("ij,ij->", diff, diff))


# ---------------------------------------------------------------------------
# persistence


def save_cluster_model(model: ClusterModel, path: str | os.PathLike) -> None:
    header = {
        "k": model.k,
        "m": model.m,
        "seed": model.seed,
        "inertia": model.inertia,
        "n_iter": model.n_iter,
        "labels": model.labels.tolist(),
        "k_scan": [[e.k, e.silhouette, e.inertia] for e in model.k_scan],
    }
    body = model.centroids.astype("<f4").tobytes()
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body)


def load_cluster_model(path: str | os.PathLike) -> ClusterModel:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    h = json.loads(raw[:nl])
    k, m = int(h["k"]), int(h["m"])
    if len(raw) - nl - 1 != 4 * k * m:
        raise ClusterError(f"{path}: centroid block size does not match k={k}, m={m}")
    cent = np.frombuffer(raw, dtype="<f4", offset=nl + 1).astype(np.float64).reshape(k, m)
    return ClusterModel(
        centroids=cent,
        labels=np.asarray(h.get("labels", []), dtype=int),
        inertia=float(h["inertia"]),
        seed=int(h.get("seed", 0)),
        n_iter=int(h.get("n_iter", 0)),
        k_scan=tuple(KScanEntry(int(a), float(b), float(c)) for a, b, c in h.get("k_scan", [])),
    )


def write_assignments(path: str | os.PathLike, ids: Sequence[str], labels, distances) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["crop_id", "label", "distance"])
        for cid, lab, dist in zip(ids, labels, distances):
            w.writerow([cid, int(lab), f"{float(dist):.9g}"])


def read_assignments(path: str | os.PathLike) -> list[tuple[str, int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["crop_id"], int(r["label"]), float(r["distance"])) for r in csv.DictReader(fh)]
