"""Clustering of description vectors: K-Means (Lloyd) and diagonal GMM (EM).

The number of clusters is selected by the mean silhouette coefficient. All
fits are deterministic given a seed; ties break toward the lowest index or
the smallest k so repeated runs agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

VARIANCE_FLOOR = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray  # (k, d)
    inertia: float
    iterations_run: int
    seed: int
    inertia_trace: tuple[float, ...]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "algo": "kmeans",
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "inertia": float(self.inertia),
            "iterations_run": self.iterations_run,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "KMeansModel":
        return cls(
            centroids=np.asarray(obj["centroids"], dtype=float),
            inertia=float(obj["inertia"]),
            iterations_run=int(obj["iterations_run"]),
            seed=int(obj["seed"]),
            inertia_trace=(),
        )


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d), floored
    log_likelihood: tuple[float, ...]
    iterations_run: int
    seed: int
    reinitialized: bool = False

    @property
    def k(self) -> int:
        return self.means.shape[0]

    def to_dict(self) -> dict:
        return {
            "algo": "gmm",
            "weights": [float(v) for v in self.weights],
            "means": [[float(v) for v in row] for row in self.means],
            "variances": [[float(v) for v in row] for row in self.variances],
            "iterations_run": self.iterations_run,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GmmModel":
        return cls(
            weights=np.asarray(obj["weights"], dtype=float),
            means=np.asarray(obj["means"], dtype=float),
            variances=np.asarray(obj["variances"], dtype=float),
            log_likelihood=(),
            iterations_run=int(obj["iterations_run"]),
            seed=int(obj["seed"]),
        )


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    k: int


def _as_matrix(X: Union[np.ndarray, Sequence[Sequence[float]]]) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a non-empty (n, d) matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    return X


def _sq_dist_to(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances, clamped against fp negatives
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * (X @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = _sq_dist_to(X, centers[:1]).ravel()
    for j in range(1, k):
        total = float(closest.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dist_to(X, centers[j : j + 1]).ravel())
    return centers


def kmeans_fit(
    X: Union[np.ndarray, Sequence[Sequence[float]]],
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> KMeansModel:
    """Lloyd's algorithm with k-means++ initialization.

    Empty clusters are re-seeded to the point farthest from its centroid.
    Stops when the largest centroid shift drops below ``tol``. The inertia
    trace (one entry per assignment step) is non-increasing.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(X, k, rng)
    trace: list[float] = []
    labels = np.zeros(n, dtype=np.intp)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_dist_to(X, centers)
        labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centers[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster to the worst-served point
            nearest = np.min(_sq_dist_to(X, new_centers), axis=1)
            new_centers[j] = X[int(np.argmax(nearest))]
        shift = float(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = _sq_dist_to(X, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    trace.append(inertia)
    return KMeansModel(
        centroids=centers,
        inertia=inertia,
        iterations_run=iterations,
        seed=seed,
        inertia_trace=tuple(trace),
    )


def _gmm_log_prob(X: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (n, k) log of weight_j * N(x | mean_j, diag(var_j))
    n, d = X.shape
    out = np.empty((n, weights.shape[0]))
    for j in range(weights.shape[0]):
        diff = X - means[j]
        out[:, j] = (
            math.log(max(weights[j], 1e-300))
            - 0.5 * (d * _LOG_2PI + float(np.log(variances[j]).sum()))
            - 0.5 * np.sum(diff * diff / variances[j], axis=1)
        )
    return out


def _logsumexp_rows(logp: np.ndarray) -> np.ndarray:
    mx = logp.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(logp - mx).sum(axis=1, keepdims=True))).ravel()


def gmm_fit(
    X: Union[np.ndarray, Sequence[Sequence[float]]],
    k: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-7,
    var_floor: float = VARIANCE_FLOOR,
) -> GmmModel:
    """EM for a Gaussian mixture with diagonal covariances.

    Initialized from a k-means++ pass (seed means, hard-assign, component
    stats). Stops once the log-likelihood gain falls below ``tol``; the
    trace is non-decreasing up to 1e-8 slack. A component that loses all
    responsibility mass is re-initialized once, then a second collapse is
    an error. Callers should cap dimensionality (e.g. TF-IDF max_terms).
    """
    X = _as_matrix(X)
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points n={n}")
    rng = np.random.default_rng(seed)

    global_var = np.maximum(X.var(axis=0), var_floor)
    means = _kmeanspp_init(X, k, rng)
    labels = np.argmin(_sq_dist_to(X, means), axis=1)
    weights = np.full(k, 1.0 / k)
    variances = np.tile(global_var, (k, 1))
    for j in range(k):
        mask = labels == j
        cnt = int(mask.sum())
        if cnt > 0:
            weights[j] = cnt / n
            means[j] = X[mask].mean(axis=0)
            variances[j] = np.maximum(X[mask].var(axis=0), var_floor)
    weights = weights / weights.sum()

    trace: list[float] = []
    reinitialized = False
    fresh_restart = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        logp = _gmm_log_prob(X, weights, means, variances)
        lse = _logsumexp_rows(logp)
        ll = float(lse.sum())
        converged = bool(trace) and not fresh_restart and ll - trace[-1] < tol
        trace.append(ll)
        fresh_restart = False
        if converged:
            break
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        dead = np.flatnonzero(nk < 1e-10)
        if dead.size:
            if reinitialized:
                raise ValueError("degenerate GMM component after re-initialization")
            reinitialized = True
            fresh_restart = True
            worst = np.argsort(lse)  # poorly explained points host new components
            for pos, j in enumerate(dead):
                means[j] = X[int(worst[pos % n])]
                variances[j] = global_var.copy()
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            continue
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        sq = (resp.T @ (X * X)) / nk[:, None]
        variances = np.maximum(sq - means * means, var_floor)
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood=tuple(trace),
        iterations_run=iterations,
        seed=seed,
        reinitialized=reinitialized,
    )


def gmm_responsibilities(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """Posterior component probabilities, one row per point."""
    logp = _gmm_log_prob(X, model.weights, model.means, model.variances)
    return np.exp(logp - _logsumexp_rows(logp)[:, None])


def cluster_assign(model: Union[KMeansModel, GmmModel], X: Union[np.ndarray, Sequence]) -> ClusterAssignment:
    """Assign points: nearest centroid (K-Means) or argmax posterior (GMM).

    Ties resolve to the lowest cluster index.
    """
    X = _as_matrix(X)
    if isinstance(model, KMeansModel):
        if X.shape[1] != model.centroids.shape[1]:
            raise ValueError("dimension mismatch between model and X")
        labels = np.argmin(_sq_dist_to(X, model.centroids), axis=1)
        return ClusterAssignment(labels=labels, k=model.k)
    if isinstance(model, GmmModel):
        if X.shape[1] != model.means.shape[1]:
            raise ValueError("dimension mismatch between model and X")
        labels = np.argmax(gmm_responsibilities(model, X), axis=1)
        return ClusterAssignment(labels=labels, k=model.k)
    raise TypeError(f"unsupported model type: {type(model).__name__}")


def silhouette(X: Union[np.ndarray, Sequence], labels: Sequence[int]) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    s(i) = (b - a) / max(a, b); points in singleton clusters score 0, as do
    points with a = b = 0.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != X.shape[0]:
        raise ValueError("labels must match X rows")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette requires at least 2 clusters")
    dist = np.sqrt(_sq_dist_to(X, X))
    n = X.shape[0]
    masks = {int(c): labels == c for c in uniq}
    sizes = {c: int(m.sum()) for c, m in masks.items()}
    scores = np.zeros(n)
    for i in range(n):
        own = int(labels[i])
        if sizes[own] == 1:
            continue
        a = float(dist[i, masks[own]].sum()) / (sizes[own] - 1)
        b = math.inf
        for c, mask in masks.items():
            if c == own:
                continue
            b = min(b, float(dist[i, mask].mean()))
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k(
    X: Union[np.ndarray, Sequence],
    algo: str,
    k_range: Sequence[int],
    seed: int = 0,
    sample_limit: int | None = None,
    **fit_kwargs,
) -> tuple[int, dict[int, float]]:
    """Fit each k in k_range and pick the best mean silhouette (ties: smallest k).

    Per-k fits use the derived seed ``seed + k`` so candidates are
    independent. ``sample_limit`` scores the silhouette on one shared seeded
    subsample, for corpora where the O(n^2) computation is impractical. A k
    whose fit collapses to a single effective cluster scores -inf.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range must be non-empty")
    if ks[0] < 2 or ks[-1] > n - 1:
        raise ValueError(f"k_range must lie within [2, {n - 1}]")
    if algo not in ("kmeans", "gmm"):
        raise ValueError(f"unknown algorithm: {algo!r}")

    if sample_limit is not None and n > sample_limit:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=sample_limit, replace=False))
    else:
        idx = np.arange(n)

    scores: dict[int, float] = {}
    best_k, best_score = None, -math.inf
    for k in ks:
        if algo == "kmeans":
            model: Union[KMeansModel, GmmModel] = kmeans_fit(X, k, seed=seed + k, **fit_kwargs)
        else:
            model = gmm_fit(X, k, seed=seed + k, **fit_kwargs)
        labels = cluster_assign(model, X).labels
        sub_labels = labels[idx]
        try:
            score = silhouette(X[idx], sub_labels)
        except ValueError:
            score = -math.inf
        scores[k] = score
        if score > best_score:
            best_k, best_score = k, score
    assert best_k is not None
    return best_k, scores


def cluster_catalog(
    labels: Sequence[int],
    X: Union[np.ndarray, Sequence],
    terms: Sequence[str],
    durations: Sequence[float],
    top_n: int = 3,
) -> list[dict]:
    """Summarize clusters: size, strongest terms and mean duration.

    This backs the exported procedure-catalog CSV.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.intp)
    durations = np.asarray(durations, dtype=float)
    rows = []
    for c in sorted(set(int(v) for v in labels)):
        mask = labels == c
        mean_weights = X[mask].mean(axis=0)
        order = np.argsort(-mean_weights, kind="stable")[:top_n]
        top = [terms[i] for i in order if mean_weights[i] > 0]
        rows.append(
            {
                "cluster_id": c,
                "size": int(mask.sum()),
                "top_terms": "|".join(top),
                "mean_duration_min": float(durations[mask].mean()),
            }
        )
    return rows
