"""Class-weight aggregation and its certainty/cluster calibration."""

import csv
import logging
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import clustering
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class ClassWeight:
    raw: np.ndarray
    normalized: np.ndarray
    step: int = 0


@dataclass
class CalibrationConfig:
    beta: float = 0.5
    a: float = 5.0
    b: float = 1.0
    k: int = 4
    entropy_normalized: bool = True
    omega_floor: float = 0.0
    normalize_features: bool = False
    max_iters: int = clustering.DEFAULT_MAX_ITERS
    tol: float = clustering.DEFAULT_TOL

    def validate(self, prefix="calibration"):
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k must be a positive integer", f"{prefix}.k")
        if not self.beta >= 0:
            raise ConfigError("beta must be nonnegative", f"{prefix}.beta")
        if not self.omega_floor >= 0:
            raise ConfigError("omega_floor must be nonnegative", f"{prefix}.omega_floor")
        for name in ("a", "b"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite", f"{prefix}.{name}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1", f"{prefix}.max_iters")
        if not self.tol >= 0:
            raise ConfigError("tol must be nonnegative", f"{prefix}.tol")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d, prefix="calibration"):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown calibration field {key!r}", f"{prefix}.{key}")
        return cls(**d)


def _check_predictions(predictions):
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("predictions must be a list of equal-length probability vectors")
    if len(P) == 0:
        raise ValueError("no predictions to aggregate")
    return P


def raw_class_weight(predictions):
    """Mean of the softmax predictions."""
    try:
        P = _check_predictions(predictions)
    except ValueError as exc:
        if isinstance(predictions, (list, tuple)) and len({len(p) for p in predictions}) > 1:
            raise ValueError("predictions have mismatched lengths") from exc
        raise
    return P.mean(axis=0)


def normalize_gamma(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw class weight has negative entries")
    mean = raw.mean()
    if mean == 0:
        raise ValueError("raw class weight is all zero")
    return raw / mean


def entropy(p):
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def entropy_weight(prediction, cfg):
    """Certainty weight ``max(1 - H, omega_floor)``.

    With ``cfg.entropy_normalized`` the entropy is divided by ``log C`` so
    the certainty term lies in ``[0, 1]``.  Works row-wise on a stack.
    """
    p = np.asarray(prediction, dtype=np.float64)
    h = entropy(p)
    n_classes = p.shape[-1]
    if cfg.entropy_normalized and n_classes > 1:
        h = h / np.log(n_classes)
    return np.maximum(1.0 - h, cfg.omega_floor)


def cluster_weight(tau, mu, sigma, a, b):
    """Piecewise-linear weight on a sample's squared distance to its centroid.

    ``a`` up to ``mu - sigma``, ``b`` from ``mu + sigma`` on, linear in
    between; ``(a + b) / 2`` when the cluster has zero spread.
    """
    tau, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (tau, mu, sigma)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = 0.5 + (tau - mu) / (2.0 * sigma)
        ramp = a + t * (b - a)
    out = np.where(tau <= mu - sigma, a, np.where(tau >= mu + sigma, b, ramp))
    out = np.where(sigma == 0, 0.5 * (a + b), out)
    return out if out.ndim else float(out)


def fit_clusters(features, cfg, seed):
    X = np.asarray(features, dtype=np.float64)
    if cfg.normalize_features:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
    model = clustering.kmeans_fit(X, cfg.k, seed, max_iters=cfg.max_iters, tol=cfg.tol)
    clustering.cluster_distance_stats(model, X)
    return model, X


def calibrated_class_weight(predictions, fused_features, cfg, seed, use_entropy=True, use_cluster=True, step=0):
    """Calibrated class weight and per-sample diagnostics.

    Each prediction enters the average with weight
    ``beta * certainty + cluster_weight``; ``use_entropy`` / ``use_cluster``
    replace the respective term by 0 / 1 (used by the ablation variants).
    """
    P = _check_predictions(predictions)
    F = np.asarray(fused_features, dtype=np.float64)
    if F.ndim != 2 or len(F) != len(P):
        raise ValueError(f"{len(P)} predictions but features of shape {F.shape}")
    cfg.validate()

    certainty = entropy_weight(P, cfg) if use_entropy else np.zeros(len(P))
    diag = {}
    if use_cluster:
        if cfg.k > len(P):
            raise ValueError(f"k={cfg.k} exceeds the number of target samples ({len(P)})")
        distinct = len(np.unique(F, axis=0))
        k_used = min(cfg.k, distinct)
        if k_used < cfg.k:
            log.warning("only %d distinct feature points; clustering with k=%d instead of %d", distinct, k_used, cfg.k)
        model, X = fit_clusters(F, replace(cfg, k=k_used), seed)
        tau = clustering.point_distances(model, X)
        mu = model.per_cluster_mu[model.assignments]
        sigma = model.per_cluster_sigma[model.assignments]
        cluster_w = cluster_weight(tau, mu, sigma, cfg.a, cfg.b)
        diag["cluster"] = model.summary()
        diag["converged"] = bool(model.converged)
        diag["k_reduced"] = k_used < cfg.k
        diag["tau"] = tau
        diag["assignments"] = model.assignments
    else:
        cluster_w = np.ones(len(P))
        diag["cluster"] = None
        diag["converged"] = True
        diag["k_reduced"] = False

    weights = cfg.beta * certainty + cluster_w
    raw = (P * weights[:, None]).mean(axis=0)
    gamma = ClassWeight(raw=raw, normalized=normalize_gamma(raw), step=step)
    diag["weights"] = weights
    diag["certainty"] = certainty
    diag["cluster_weight"] = cluster_w
    return gamma, diag


def distribution_form(raw):
    """Raw class weight rescaled to sum to one."""
    raw = np.asarray(raw, dtype=np.float64)
    return raw / raw.sum()


GAMMA_CSV_COLUMNS = ["step", "class_index", "raw_mass", "normalized_weight", "is_target_class"]


def write_gamma_csv(path, snapshots, num_target_classes):
    """One row per (snapshot, class).  ``snapshots`` are ClassWeight or dicts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GAMMA_CSV_COLUMNS)
        for snap in snapshots:
            if isinstance(snap, dict):
                step, raw, norm = snap["step"], snap["raw"], snap["normalized"]
            else:
                step, raw, norm = snap.step, snap.raw, snap.normalized
            for c, (r, g) in enumerate(zip(raw, norm)):
                writer.writerow([step, c, repr(float(r)), repr(float(g)), int(c < num_target_classes)])


def read_gamma_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "step": int(row["step"]),
                    "class_index": int(row["class_index"]),
                    "raw_mass": float(row["raw_mass"]),
                    "normalized_weight": float(row["normalized_weight"]),
                    "is_target_class": bool(int(row["is_target_class"])),
                }
            )
    return rows
