"""Multi-modal adversarial network over pre-extracted frame features.

Data flow for one clip ``x`` of shape ``(N, M, d)``::

    per-modality extractor   f[j, m] = G_f,m(x[j, m])                (N, M, e)
    temporal relation fusion fused = sum_m sum_r sum_l g_r(f[clip_l, m])   (d_f,)
    classifier               logits = G_y(fused)                         (C,)
    per-modality discriminator  G_d,m(GRL(mean_j f[j, m]))               (2,)

Everything is batched: arrays carry a leading sample axis.
"""

import itertools
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .nn import MLP, grl_backward, grl_forward, softmax, softmax_cross_entropy
from .rng import make_rng

SOURCE_DOMAIN, TARGET_DOMAIN = 0, 1


@dataclass
class ArchConfig:
    embed_dim: int = 16
    extractor_hidden: list = field(default_factory=lambda: [32])
    extractor_final_relu: bool = True
    relation_hidden: list = field(default_factory=lambda: [32])
    fused_dim: int = 32
    classifier_hidden: list = field(default_factory=list)
    disc_hidden: list = field(default_factory=lambda: [32])
    share_relation: bool = True
    fusion: str = "trn"
    max_clips: int = 5

    def validate(self):
        for name in ("embed_dim", "fused_dim", "max_clips"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer", f"model.{name}")
        for name in ("extractor_hidden", "relation_hidden", "classifier_hidden", "disc_hidden"):
            widths = getattr(self, name)
            if not isinstance(widths, list) or any(
                isinstance(w, bool) or not isinstance(w, int) or w < 1 for w in widths
            ):
                raise ConfigError(f"{name} must be a list of positive integers", f"model.{name}")
        if self.fusion not in ("trn", "avgpool"):
            raise ConfigError("fusion must be 'trn' or 'avgpool'", "model.fusion")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown model field {key!r}", f"model.{key}")
        return cls(**d)


def clip_count(num_frames, r, max_clips=5):
    """Number of r-frame clips used at one scale: ``min(C(N, r), max_clips)``."""
    return min(math.comb(num_frames, r), max_clips)


def sample_clips(num_frames, rng, max_clips=5):
    """Draw the temporally ordered frame index sets for every scale.

    Returns ``{r: int array of shape (L_r, r)}`` for ``r`` in ``[2, N]``;
    rows are distinct and sorted ascending.
    """
    if num_frames < 2:
        raise ValueError(f"relation fusion needs at least 2 frames, got {num_frames}")
    clips = {}
    for r in range(2, num_frames + 1):
        total = math.comb(num_frames, r)
        want = min(total, max_clips)
        if total <= 100_000:
            combos = list(itertools.combinations(range(num_frames), r))
            pick = np.sort(rng.choice(total, size=want, replace=False)) if want < total else range(total)
            rows = [combos[i] for i in pick]
        else:
            seen = set()
            while len(seen) < want:
                seen.add(tuple(sorted(rng.choice(num_frames, size=r, replace=False).tolist())))
            rows = sorted(seen)
        clips[r] = np.array(rows, dtype=np.int64).reshape(len(rows), r)
    return clips


@dataclass
class LossResult:
    objective: float
    """Value of the min-max objective (classifier minus weighted domain terms)."""
    surrogate: float
    """Value actually descended; its gradient is ``grads``."""
    grads: dict
    class_loss: float
    domain_loss: float


def pvda_objective(class_losses, src_domain_losses, tgt_domain_losses, weights, alpha):
    """Single-branch objective built from per-sample losses.

    ``mean_i w_i (Ly_i - alpha Ld_i) - alpha mean_j Ld_j``
    """
    total = 0.0
    for w, ly, ld in zip(weights, class_losses, src_domain_losses):
        total += w * (ly - alpha * ld)
    tgt = sum(tgt_domain_losses)
    return total / len(class_losses) - alpha * tgt / len(tgt_domain_losses)


class ManModel:
    def __init__(self, input_dim, num_frames, num_modalities, num_classes, arch=None):
        self.arch = arch or ArchConfig()
        self.arch.validate()
        self.input_dim = input_dim
        self.num_frames = num_frames
        self.num_modalities = num_modalities
        self.num_classes = num_classes
        a = self.arch
        e = a.embed_dim
        self.extractors = [
            MLP(f"extractor.{m}", [input_dim, *a.extractor_hidden, e], a.extractor_final_relu)
            for m in range(num_modalities)
        ]
        self.relations = {}
        if a.fusion == "trn":
            if num_frames < 2:
                raise ConfigError("relation fusion needs at least 2 frames", "data.frames_per_sample")
            for r in range(2, num_frames + 1):
                widths = [r * e, *a.relation_hidden, a.fused_dim]
                if a.share_relation:
                    self.relations[r] = [MLP(f"relation.{r}", widths)]
                else:
                    self.relations[r] = [MLP(f"relation.{r}.m{m}", widths) for m in range(num_modalities)]
            fused = a.fused_dim
        else:
            fused = e
        self.fused_dim = fused
        self.classifier = MLP("classifier", [fused, *a.classifier_hidden, num_classes])
        self.discriminators = [
            MLP(f"discriminator.{m}", [e, *a.disc_hidden, 2]) for m in range(num_modalities)
        ]

    def _mlps(self):
        yield from self.extractors
        for r in sorted(self.relations):
            yield from self.relations[r]
        yield self.classifier
        yield from self.discriminators

    def init_params(self, seed):
        rng = make_rng(seed, 17)
        params = {}
        for mlp in self._mlps():
            mlp.init(params, rng)
        return params

    @staticmethod
    def is_discriminator(name):
        return name.startswith("discriminator.")

    def sample_clips(self, rng):
        if self.arch.fusion != "trn":
            return {}
        return sample_clips(self.num_frames, rng, self.arch.max_clips)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.num_frames, self.num_modalities, self.input_dim):
            raise ValueError(
                f"clip shape {x.shape[1:]} does not match model "
                f"({self.num_frames}, {self.num_modalities}, {self.input_dim})"
            )

    # forward pieces

    def extract(self, params, x):
        """Frame features ``(B, N, M, e)`` plus the per-modality tapes."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        B, N, M, _ = x.shape
        out = np.empty((B, N, M, self.arch.embed_dim))
        tapes = []
        for m, mlp in enumerate(self.extractors):
            h, tape = mlp.forward(params, x[:, :, m, :].reshape(B * N, -1))
            out[:, :, m, :] = h.reshape(B, N, -1)
            tapes.append(tape)
        return out, tapes

    def fuse(self, params, feats, clips):
        """Fused feature ``(B, d_f)`` and a cache for ``fuse_backward``."""
        B, N, M, e = feats.shape
        if self.arch.fusion == "avgpool":
            return feats.mean(axis=1).sum(axis=1), None
        if N < 2:
            raise ValueError("relation fusion needs at least 2 frames")
        fused = np.zeros((B, self.fused_dim))
        cache = []
        for r in sorted(self.relations):
            idx = clips[r]
            L = len(idx)
            # (B, L, r, M, e) -> (B, M, L, r*e)
            grouped = feats[:, idx].transpose(0, 3, 1, 2, 4).reshape(B, M, L, r * e)
            if self.arch.share_relation:
                h, tape = self.relations[r][0].forward(params, grouped.reshape(B * M * L, r * e))
                fused += h.reshape(B, M * L, -1).sum(axis=1)
                cache.append((r, [tape]))
            else:
                tapes = []
                for m in range(M):
                    h, tape = self.relations[r][m].forward(params, grouped[:, m].reshape(B * L, r * e))
                    fused += h.reshape(B, L, -1).sum(axis=1)
                    tapes.append(tape)
                cache.append((r, tapes))
        return fused, cache

    def fuse_backward(self, params, feats_shape, clips, cache, upstream, grads):
        B, N, M, e = feats_shape
        if self.arch.fusion == "avgpool":
            return np.broadcast_to(upstream[:, None, None, :] / N, feats_shape).copy()
        dfeats = np.zeros(feats_shape)
        for r, tapes in cache:
            idx = clips[r]
            L = len(idx)
            if self.arch.share_relation:
                up = np.repeat(upstream, M * L, axis=0)
                dg = self.relations[r][0].backward(params, tapes[0], up, grads).reshape(B, M, L, r, e)
            else:
                parts = []
                up = np.repeat(upstream, L, axis=0)
                for m in range(M):
                    parts.append(self.relations[r][m].backward(params, tapes[m], up, grads).reshape(B, L, r, e))
                dg = np.stack(parts, axis=1)
            np.add.at(dfeats, (slice(None), idx), dg.transpose(0, 2, 3, 1, 4))
        return dfeats

    def classify(self, params, fused):
        return self.classifier.forward(params, fused)[0]

    def discriminate(self, params, m, pooled):
        return self.discriminators[m].forward(params, grl_forward(pooled))[0]

    def forward(self, params, x, clips):
        """Forward-only pass: ``(logits, fused)``."""
        feats, _ = self.extract(params, x)
        fused, _ = self.fuse(params, feats, clips)
        return self.classify(params, fused), fused

    def predict(self, params, x, clips, chunk=1024):
        """Softmax predictions and fused features for a whole dataset."""
        probs, fused = [], []
        for start in range(0, len(x), chunk):
            logits, f = self.forward(params, x[start : start + chunk], clips)
            probs.append(softmax(logits))
            fused.append(f)
        return np.concatenate(probs), np.concatenate(fused)

    # objective

    def per_sample_losses(self, params, src_x, src_y, tgt_x, clips):
        """``(class (B_s,), source domain (B_s, M), target domain (B_t, M))`` losses."""
        feats, _ = self.extract(params, src_x)
        fused, _ = self.fuse(params, feats, clips)
        ly, _ = softmax_cross_entropy(self.classify(params, fused), src_y)
        lds = np.stack(
            [
                softmax_cross_entropy(self.discriminate(params, m, feats[:, :, m].mean(axis=1)), np.zeros(len(src_y), int))[0]
                for m in range(self.num_modalities)
            ],
            axis=1,
        )
        tfeats, _ = self.extract(params, tgt_x)
        ldt = np.stack(
            [
                softmax_cross_entropy(self.discriminate(params, m, tfeats[:, :, m].mean(axis=1)), np.ones(len(tgt_x), int))[0]
                for m in range(self.num_modalities)
            ],
            axis=1,
        )
        return ly, lds, ldt

    def _domain_branch(self, params, feats, domain, scale, grads):
        """Domain losses ``(B, M)``; adds reversed gradients to a feature-grad array."""
        B, N, M, _ = feats.shape
        losses = np.empty((B, M))
        dfeats = np.zeros(feats.shape)
        labels = np.full(B, domain)
        for m, disc in enumerate(self.discriminators):
            pooled = feats[:, :, m, :].mean(axis=1)
            logits, tape = disc.forward(params, grl_forward(pooled))
            losses[:, m], dlogits = softmax_cross_entropy(logits, labels)
            dpooled = disc.backward(params, tape, dlogits * scale[:, None], grads)
            dfeats[:, :, m, :] = grl_backward(dpooled, 1.0)[:, None, :] / N
        return losses, dfeats

    def loss(self, params, src_x, src_y, tgt_x, gamma, alpha, clips):
        """Class-weighted adversarial objective and its gradients.

        ``objective = mean_i g[y_i] (Ly_i - alpha sum_m Lds_im) - alpha mean_j sum_m Ldt_jm``

        Gradients are those of the surrogate in which the domain terms enter
        with a plus sign and a gradient reversal layer sits in front of each
        discriminator.  Descending it moves the classifier and extractors
        down the objective and the discriminators up it.
        """
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma.shape != (self.num_classes,):
            raise ValueError(f"gamma has length {gamma.size}, expected {self.num_classes}")
        if np.any(gamma < 0):
            raise ValueError("gamma entries must be nonnegative")
        src_y = np.asarray(src_y)
        n_s, n_t = len(src_y), len(tgt_x)
        if n_s == 0 or n_t == 0:
            raise ValueError("source and target batches must be non-empty")
        w = gamma[src_y]
        grads = {}

        feats, ext_tapes = self.extract(params, src_x)
        fused, fuse_cache = self.fuse(params, feats, clips)
        logits, cls_tape = self.classifier.forward(params, fused)
        ly, dlogits = softmax_cross_entropy(logits, src_y)
        dfused = self.classifier.backward(params, cls_tape, dlogits * (w / n_s)[:, None], grads)
        dfeats = self.fuse_backward(params, feats.shape, clips, fuse_cache, dfused, grads)
        lds, dfeats_d = self._domain_branch(params, feats, SOURCE_DOMAIN, alpha * w / n_s, grads)
        dfeats += dfeats_d
        self._extract_backward(params, ext_tapes, dfeats, grads)

        tfeats, tgt_tapes = self.extract(params, tgt_x)
        ldt, dtfeats = self._domain_branch(params, tfeats, TARGET_DOMAIN, np.full(n_t, alpha / n_t), grads)
        self._extract_backward(params, tgt_tapes, dtfeats, grads)

        src_dom = lds.sum(axis=1)
        tgt_dom = ldt.sum(axis=1)
        objective = float((w * (ly - alpha * src_dom)).mean() - alpha * tgt_dom.mean())
        surrogate = float((w * (ly + alpha * src_dom)).mean() + alpha * tgt_dom.mean())
        return LossResult(
            objective=objective,
            surrogate=surrogate,
            grads=grads,
            class_loss=float((w * ly).mean()),
            domain_loss=float(src_dom.mean() + tgt_dom.mean()),
        )

    def _extract_backward(self, params, tapes, dfeats, grads):
        B, N, M, e = dfeats.shape
        for m, mlp in enumerate(self.extractors):
            mlp.backward(params, tapes[m], dfeats[:, :, m, :].reshape(B * N, e), grads)
