"""Training loop, evaluation and ablation runs."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .calibration import (
    CalibrationConfig,
    ClassWeight,
    calibrated_class_weight,
    distribution_form,
    normalize_gamma,
    raw_class_weight,
)
from .data import true_label_distribution
from .errors import ConfigError, NumericalError
from .model import ArchConfig, ManModel
from .nn import sgd_step
from .rng import make_rng

log = logging.getLogger(__name__)

VARIANTS = (
    "MCAN",
    "MAN",
    "no_class_weight",
    "no_adversarial",
    "single_modality",
    "entropy_only",
    "cluster_only",
    "PADA_baseline",
)

# stream tags
_EPOCH, _TARGET_ORDER, _CALIBRATION = 101, 202, 303


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 24
    lr: float = 0.001
    momentum: float = 0.9
    alpha: float = 1.0
    s: int | None = None
    """gamma refresh interval in mini-batches; None means once per epoch"""
    variant: str = "MCAN"
    seed: int = 0
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def validate(self, prefix="train"):
        for name, low in (("epochs", 0), ("batch_size", 1), ("s", 1)):
            value = getattr(self, name)
            if name == "s" and value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, int) or value < low:
                raise ConfigError(f"{name} must be an integer >= {low}", f"{prefix}.{name}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive", f"{prefix}.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)", f"{prefix}.momentum")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be nonnegative", f"{prefix}.alpha")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}", f"{prefix}.variant")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", f"{prefix}.seed")
        self.calibration.validate(f"{prefix}.calibration")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d, prefix="train"):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown train field {key!r}", f"{prefix}.{key}")
        calib = d.pop("calibration", {})
        if isinstance(calib, dict):
            calib = CalibrationConfig.from_dict(calib, f"{prefix}.calibration")
        return cls(calibration=calib, **d)


@dataclass
class VariantSettings:
    weighting: str  # "calibrated", "plain" or "none"
    use_entropy: bool = True
    use_cluster: bool = True
    single_modality: bool = False
    fusion: str | None = None
    alpha_zero: bool = False
    beta_zero: bool = False


def variant_settings(variant):
    return {
        "MCAN": VariantSettings("calibrated"),
        "MAN": VariantSettings("plain"),
        "no_class_weight": VariantSettings("none"),
        "no_adversarial": VariantSettings("calibrated", alpha_zero=True),
        "single_modality": VariantSettings("calibrated", single_modality=True),
        "entropy_only": VariantSettings("calibrated", use_cluster=False),
        "cluster_only": VariantSettings("calibrated", beta_zero=True),
        "PADA_baseline": VariantSettings("plain", single_modality=True, fusion="avgpool"),
    }[variant]


@dataclass
class TrainReport:
    config: dict
    epochs: list
    snapshots: list
    true_distribution: list
    final_accuracy: float
    final_outlier_mass: float
    final_l1_distance: float
    confusion: list
    nonconverged_refreshes: int
    params: dict = field(repr=False, default_factory=dict)
    wall_clock: float = 0.0

    @property
    def accuracy_curve(self):
        return [e["target_accuracy"] for e in self.epochs]

    @property
    def outlier_mass_trajectory(self):
        return [s["outlier_mass"] for s in self.snapshots]

    def to_json_dict(self):
        """Everything except the parameters and the wall-clock time, so the
        serialized report is a pure function of config and data."""
        return {
            "schema_version": 1,
            "config": self.config,
            "true_distribution": self.true_distribution,
            "epochs": self.epochs,
            "snapshots": self.snapshots,
            "final": {
                "target_accuracy": self.final_accuracy,
                "outlier_mass": self.final_outlier_mass,
                "l1_distance": self.final_l1_distance,
                "confusion": self.confusion,
                "nonconverged_refreshes": self.nonconverged_refreshes,
            },
        }


def gamma_quality(raw, true_distribution):
    """``(outlier_mass, l1_distance)`` of a class weight against the true
    target label distribution.  Outlier classes are those with zero true
    mass; the weight is compared in its sum-to-one form."""
    raw = np.asarray(raw, dtype=np.float64)
    p = np.asarray(true_distribution, dtype=np.float64)
    if raw.shape != p.shape:
        raise ValueError(f"class weight has {raw.size} entries, distribution has {p.size}")
    q = distribution_form(raw)
    return float(q[p == 0].sum()), float(np.abs(q - p).sum())


def evaluate(model, params, target, clips, modalities=None):
    """Target accuracy, confusion matrix (rows = true class) and argmax predictions."""
    x = target.features if modalities is None else target.features[:, :, modalities]
    probs, _ = model.predict(params, x, clips)
    return evaluate_predictions(probs, target.labels, model.num_classes)


def evaluate_predictions(probs, labels, num_classes):
    pred = np.argmax(probs, axis=1)  # first maximum wins ties
    labels = np.asarray(labels)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float((pred == labels).mean()) if len(labels) else 0.0
    return accuracy, confusion, pred


def _calibration_seed(seed, step):
    return int(np.random.SeedSequence([int(seed), _CALIBRATION, int(step)]).generate_state(1, np.uint64)[0])


class _TargetStream:
    """Endless target index stream: a fresh permutation each pass."""

    def __init__(self, n, seed):
        self.n, self.seed, self.cycle = n, seed, 0
        self._order = np.empty(0, dtype=np.int64)

    def take(self, k):
        out = []
        while k > 0:
            if len(self._order) == 0:
                self._order = make_rng(self.seed, _TARGET_ORDER, self.cycle).permutation(self.n)
                self.cycle += 1
            out.append(self._order[:k])
            k -= len(out[-1])
            self._order = self._order[len(out[-1]) :]
        return np.concatenate(out)


def train(config, source, target, arch=None):
    """Run one training job and return its report.

    ``target.labels`` are only read to compute the reported metrics.
    """
    t0 = time.perf_counter()
    config.validate()
    arch = arch or ArchConfig()
    vs = variant_settings(config.variant)
    if vs.fusion:
        arch = replace(arch, fusion=vs.fusion)
    calib = config.calibration
    if vs.beta_zero:
        calib = replace(calib, beta=0.0)
    alpha = 0.0 if vs.alpha_zero else config.alpha

    if source.clip_shape != target.clip_shape:
        raise ConfigError(f"source clips {source.clip_shape} and target clips {target.clip_shape} differ", "data")
    if source.num_source_classes != target.num_source_classes:
        raise ConfigError("source and target disagree on the number of classes", "data")
    if source.labels is None:
        raise ConfigError("source dataset carries no labels", "data")
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("empty dataset", "data")
    N, M, d = source.clip_shape
    num_classes = source.num_source_classes
    mods = [0] if vs.single_modality else list(range(M))
    xs = source.features[:, :, mods].astype(np.float64)
    xt = target.features[:, :, mods].astype(np.float64)
    ys = source.labels
    true_dist = true_label_distribution(target, num_classes)

    model = ManModel(d, N, len(mods), num_classes, arch)
    params = model.init_params(config.seed)
    velocity = {}
    n_s, n_t = len(source), len(target)
    bsz = min(config.batch_size, n_s)
    batches_per_epoch = n_s // bsz
    s = config.s if config.s is not None else batches_per_epoch
    tstream = _TargetStream(n_t, config.seed)

    gamma = np.ones(num_classes)
    init_raw = np.full(num_classes, 1.0 / num_classes)
    snapshots = [_snapshot(0, 0, ClassWeight(init_raw, gamma.copy(), 0), true_dist, None)]
    epochs = []
    step = 0
    nonconverged = 0
    clips = {}

    for epoch in range(1, config.epochs + 1):
        rng = make_rng(config.seed, _EPOCH, epoch)
        clips = model.sample_clips(rng)
        order = rng.permutation(n_s)
        losses = []
        for b in range(batches_per_epoch):
            si = order[b * bsz : (b + 1) * bsz]
            ti = tstream.take(bsz)
            res = model.loss(params, xs[si], ys[si], xt[ti], gamma, alpha, clips)
            if not (np.isfinite(res.objective) and np.isfinite(res.surrogate)):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {step + 1} "
                    f"(objective={res.objective}, class_loss={res.class_loss}, domain_loss={res.domain_loss})"
                )
            params, velocity = sgd_step(params, res.grads, config.lr, config.momentum, velocity)
            losses.append((res.objective, res.class_loss, res.domain_loss))
            step += 1
            if step % s == 0:
                probs, fused = model.predict(params, xt, clips)
                cw, diag = _refresh(vs, calib, probs, fused, config.seed, step)
                gamma = cw.normalized
                if diag is not None and not diag["converged"]:
                    nonconverged += 1
                snapshots.append(_snapshot(step, epoch, cw, true_dist, diag))
        accuracy, _, _ = evaluate(model, params, target, clips, mods)
        arr = np.array(losses)
        epochs.append(
            {
                "epoch": epoch,
                "target_accuracy": accuracy,
                "objective": float(arr[:, 0].mean()),
                "class_loss": float(arr[:, 1].mean()),
                "domain_loss": float(arr[:, 2].mean()),
            }
        )
        log.debug("epoch %d acc %.4f gamma %s", epoch, accuracy, np.round(gamma, 3))

    if not clips:
        clips = model.sample_clips(make_rng(config.seed, _EPOCH, 0))
    accuracy, confusion, _ = evaluate(model, params, target, clips, mods)
    last = snapshots[-1]
    resolved = config.to_dict()
    resolved["calibration"] = asdict(calib)
    resolved["alpha"] = alpha
    report = TrainReport(
        config={"train": resolved, "model": asdict(arch)},
        epochs=epochs,
        snapshots=snapshots,
        true_distribution=true_dist.tolist(),
        final_accuracy=accuracy,
        final_outlier_mass=last["outlier_mass"],
        final_l1_distance=last["l1_distance"],
        confusion=confusion.tolist(),
        nonconverged_refreshes=nonconverged,
        params=params,
    )
    report.wall_clock = time.perf_counter() - t0
    return report


def _refresh(vs, calib, probs, fused, seed, step):
    if vs.weighting == "none":
        n = probs.shape[1]
        return ClassWeight(np.full(n, 1.0 / n), np.ones(n), step), None
    if vs.weighting == "plain":
        raw = raw_class_weight(probs)
        return ClassWeight(raw, normalize_gamma(raw), step), None
    return calibrated_class_weight(
        probs,
        fused,
        calib,
        _calibration_seed(seed, step),
        use_entropy=vs.use_entropy,
        use_cluster=vs.use_cluster,
        step=step,
    )


def _snapshot(step, epoch, cw, true_dist, diag):
    outlier, l1 = gamma_quality(cw.raw, true_dist)
    snap = {
        "step": step,
        "epoch": epoch,
        "raw": [float(v) for v in cw.raw],
        "normalized": [float(v) for v in cw.normalized],
        "outlier_mass": outlier,
        "l1_distance": l1,
    }
    if diag is not None:
        snap["cluster"] = diag["cluster"]
    return snap


@dataclass
class AblationResult:
    rows: list
    cells: list
    k_sweep: list

    def to_json_dict(self):
        return {"schema_version": 1, "rows": self.rows, "cells": self.cells, "k_sweep": self.k_sweep}


def _summarize(cells):
    acc = np.array([c["final_accuracy"] for c in cells])
    out = np.array([c["final_outlier_mass"] for c in cells])
    l1 = np.array([c["final_l1_distance"] for c in cells])
    return {
        "n_seeds": len(cells),
        "accuracy_mean": float(acc.mean()),
        "accuracy_std": float(acc.std()),
        "outlier_mass_mean": float(out.mean()),
        "outlier_mass_std": float(out.std()),
        "l1_mean": float(l1.mean()),
        "nonconverged_refreshes": int(sum(c["nonconverged_refreshes"] for c in cells)),
    }


def run_ablation_suite(base_config, source, target, variants, seeds, arch=None, k_values=None, workers=1):
    """Train every (variant, seed) cell, plus an MCAN run per (K, seed) when
    ``k_values`` is given, and aggregate per variant / per K.

    All variants share the seed list, so cells with the same seed start from
    the same initial parameters and data order.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed", "ablate.seeds")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}", "ablate.variants")
    jobs = []
    for v in variants:
        for sd in seeds:
            jobs.append(("variant", v, None, replace(base_config, variant=v, seed=sd)))
    for k in k_values or []:
        calib = replace(base_config.calibration, k=k)
        for sd in seeds:
            jobs.append(("k", "MCAN", k, replace(base_config, variant="MCAN", seed=sd, calibration=calib)))

    def run(job):
        kind, v, k, cfg = job
        rep = train(cfg, source, target, arch)
        return {
            "kind": kind,
            "variant": v,
            "k": cfg.calibration.k,
            "seed": cfg.seed,
            "final_accuracy": rep.final_accuracy,
            "final_outlier_mass": rep.final_outlier_mass,
            "final_l1_distance": rep.final_l1_distance,
            "nonconverged_refreshes": rep.nonconverged_refreshes,
            "accuracy_curve": rep.accuracy_curve,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run, jobs))
    else:
        cells = [run(j) for j in jobs]

    rows = []
    for v in variants:
        group = [c for c in cells if c["kind"] == "variant" and c["variant"] == v]
        rows.append({"variant": v, "k": base_config.calibration.k, **_summarize(group)})
    k_sweep = []
    for k in k_values or []:
        group = [c for c in cells if c["kind"] == "k" and c["k"] == k]
        k_sweep.append({"variant": "MCAN", "k": k, **_summarize(group)})
    return AblationResult(rows=rows, cells=cells, k_sweep=k_sweep)
