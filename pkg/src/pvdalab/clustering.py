"""k-means with k-means++ seeding and Elkan's triangle-inequality bounds.

``lloyd_fit`` is the plain algorithm, kept as a reference for
``kmeans_fit``: both share the centroid update and the empty-cluster rule,
so from the same initial centroids they walk through the same sequence of
assignments.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import hashed_uniform

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 300


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    converged: bool
    n_iter: int
    per_cluster_mu: np.ndarray | None = None
    per_cluster_sigma: np.ndarray | None = None
    inertia_history: list = field(default_factory=list)
    reseed_events: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.centroids)

    def summary(self):
        return {
            "k": self.k,
            "converged": bool(self.converged),
            "iterations": int(self.n_iter),
            "inertia": float(self.inertia),
            "cluster_sizes": np.bincount(self.assignments, minlength=self.k).tolist(),
            "reseed_events": len(self.reseed_events),
        }


def _check_features(features):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"features must be a non-empty (n, d) array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    return X


def _check_k(k, n):
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples ({n})")


def _sq_dists(X, C):
    """Squared Euclidean distances, shape ``(len(X), len(C))``."""
    diff = X[:, None, :] - C[None, :, :]
    return (diff * diff).sum(axis=-1)


def kmeans_pp_init(features, k, seed):
    """k-means++ (D^2) seeding that ignores the order of the input rows.

    Each draw uses exponential races: point ``i`` gets key
    ``-log(U_i) / w_i`` with ``U_i`` hashed from ``(seed, draw, point)``
    and ``w_i`` its D^2 weight; the smallest key wins, which selects ``i``
    with probability ``w_i / sum(w)``.  The first draw uses ``w = 1``.
    """
    X = _check_features(features)
    _check_k(k, len(X))
    n = len(X)
    weights = np.ones(n)
    centroids = []
    closest = np.full(n, np.inf)
    for step in range(k):
        live = np.flatnonzero(weights > 0)
        if len(live) == 0:
            raise ValueError(f"k={k} exceeds the number of distinct points")
        keys = np.array([-np.log(hashed_uniform(seed, step, X[i])) / weights[i] for i in live])
        best = keys.min()
        tied = live[keys == best]
        # identical keys only arise for duplicate points; pick the smallest value
        pick = tied[0] if len(tied) == 1 else tied[np.lexsort(X[tied].T[::-1])[0]]
        c = X[pick].copy()
        centroids.append(c)
        closest = np.minimum(closest, ((X - c) ** 2).sum(axis=1))
        weights = closest
    return np.array(centroids)


def _update_centroids(X, labels, centroids):
    """Means of each cluster; empty clusters move to the farthest point."""
    k, d = centroids.shape
    sums = np.zeros((k, d))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    events = []
    if not filled.all():
        dist = ((X - centroids[labels]) ** 2).sum(axis=1)
        taken = set()
        for j in np.flatnonzero(~filled):
            order = np.argsort(-dist, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[j] = X[far]
            events.append((int(j), far))
    return new, events


def _inertia(X, centroids, labels):
    diff = X - centroids[labels]
    return float((diff * diff).sum())


def _lloyd_assign(X, centroids):
    return np.argmin(np.sqrt(_sq_dists(X, centroids)), axis=1)


def _run(X, centroids, max_iters, tol, assigner):
    centroids = np.array(centroids, dtype=np.float64)
    state = assigner.start(X, centroids)
    labels = state.labels
    history = [_inertia(X, centroids, labels)]
    events = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new, ev = _update_centroids(X, labels, centroids)
        if ev:
            log.info("k-means iteration %d reseeded empty clusters %s", n_iter, ev)
            events.extend((n_iter, j, i) for j, i in ev)
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1))
        centroids = new
        labels = assigner.step(X, centroids, shift)
        history.append(_inertia(X, centroids, labels))
        if shift.max() < tol:
            converged = True
            break
    if max_iters == 0:
        converged = False
    return ClusterModel(
        centroids=centroids,
        assignments=labels,
        inertia=history[-1],
        converged=converged,
        n_iter=n_iter,
        inertia_history=history,
        reseed_events=events,
    )


class _Lloyd:
    def start(self, X, C):
        self.labels = _lloyd_assign(X, C)
        return self

    def step(self, X, C, shift):
        self.labels = _lloyd_assign(X, C)
        return self.labels


class _Elkan:
    """Keeps an upper bound on the distance to the assigned centre and a
    lower bound on the distance to every centre."""

    def start(self, X, C):
        D = np.sqrt(_sq_dists(X, C))
        self.labels = np.argmin(D, axis=1)
        self.lower = D
        self.upper = D[np.arange(len(X)), self.labels]
        return self

    def step(self, X, C, shift):
        n, k = self.lower.shape
        self.lower = np.maximum(self.lower - shift[None, :], 0.0)
        self.upper = self.upper + shift[self.labels]
        stale = np.ones(n, dtype=bool)
        if k == 1:
            self.upper = np.sqrt(((X - C[0]) ** 2).sum(axis=1))
            return self.labels
        cc = np.sqrt(_sq_dists(C, C))
        np.fill_diagonal(cc, np.inf)
        half_sep = 0.5 * cc.min(axis=1)
        np.fill_diagonal(cc, 0.0)
        active = np.flatnonzero(self.upper > half_sep[self.labels])
        labels, upper, lower = self.labels, self.upper, self.lower
        for j in range(k):
            if len(active) == 0:
                break
            a = labels[active]
            cand = active[(a != j) & (upper[active] > lower[active, j]) & (upper[active] > 0.5 * cc[a, j])]
            if len(cand) == 0:
                continue
            tighten = cand[stale[cand]]
            if len(tighten):
                exact = np.sqrt(_sq_dists_rows(X[tighten], C, labels[tighten]))
                upper[tighten] = exact
                lower[tighten, labels[tighten]] = exact
                stale[tighten] = False
                a = labels[cand]
                cand = cand[(upper[cand] > lower[cand, j]) & (upper[cand] > 0.5 * cc[a, j])]
                if len(cand) == 0:
                    continue
            dj = np.sqrt(_sq_dists(X[cand], C[j : j + 1])[:, 0])
            lower[cand, j] = dj
            better = (dj < upper[cand]) | ((dj == upper[cand]) & (j < labels[cand]))
            moved = cand[better]
            labels[moved] = j
            upper[moved] = dj[better]
        self.labels = labels
        return labels


def _sq_dists_rows(X, C, idx):
    """Squared distance from each row of ``X`` to its own centre ``C[idx]``."""
    diff = X - C[idx]
    return (diff * diff).sum(axis=-1)


def lloyd_fit(features, k, init_centroids, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    X = _check_features(features)
    init = np.asarray(init_centroids, dtype=np.float64)
    _check_k(k, len(X))
    if init.shape != (k, X.shape[1]):
        raise ValueError(f"init centroids have shape {init.shape}, expected {(k, X.shape[1])}")
    if max_iters < 0 or tol < 0:
        raise ValueError("max_iters and tol must be nonnegative")
    return _run(X, init, max_iters, tol, _Lloyd())


def kmeans_fit(features, k, seed, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL, init_centroids=None):
    """Elkan-accelerated k-means from k-means++ seeds.

    Stops when no centroid moves by ``tol`` or more, or after ``max_iters``
    updates; the latter leaves ``converged=False`` and is logged, not raised.
    """
    X = _check_features(features)
    _check_k(k, len(X))
    if max_iters < 0 or tol < 0:
        raise ValueError("max_iters and tol must be nonnegative")
    init = kmeans_pp_init(X, k, seed) if init_centroids is None else np.asarray(init_centroids, dtype=np.float64)
    model = _run(X, init, max_iters, tol, _Elkan())
    if not model.converged:
        log.warning("k-means with k=%d did not converge in %d iterations", k, max_iters)
    return model


def cluster_distance_stats(model, features):
    """Attach per-cluster mean and population std of squared distances."""
    X = _check_features(features)
    tau = point_distances(model, X)
    k = model.k
    counts = np.bincount(model.assignments, minlength=k)
    mu = np.zeros(k)
    sigma = np.zeros(k)
    for c in range(k):
        members = tau[model.assignments == c]
        if len(members):
            mu[c] = members.mean()
            sigma[c] = members.std() if counts[c] > 1 else 0.0
    model.per_cluster_mu = mu
    model.per_cluster_sigma = sigma
    return model


def point_distances(model, features):
    """Squared distance of each point to its assigned centroid."""
    X = np.asarray(features, dtype=np.float64)
    diff = X - model.centroids[model.assignments]
    return (diff * diff).sum(axis=1)
