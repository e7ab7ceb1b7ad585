"""Small dense-network toolkit with hand-written backward passes.

Arrays are float64.  Every op accepts a single vector or a batch of row
vectors; batch gradients are summed over rows.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MalformedHeaderError,
    NumericalError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

CHECKPOINT_MAGIC = b"PVDAPAR1"


def linear_forward(weights, bias, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"shape mismatch: weights {weights.shape}, bias {bias.shape}, input {x.shape}"
        )
    return x @ weights.T + bias


def linear_backward(weights, x, upstream):
    """Return ``(weight_grad, bias_grad, input_grad)`` for ``y = W x + b``."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != weights.shape[0] or x.shape[-1] != weights.shape[1]:
        raise ValueError(f"shape mismatch: weights {weights.shape}, upstream {upstream.shape}")
    up2 = upstream.reshape(-1, weights.shape[0])
    x2 = x.reshape(-1, weights.shape[1])
    return up2.T @ x2, up2.sum(axis=0), upstream @ weights


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, upstream, 0.0)


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs, label):
    """Negative log-likelihood of ``label`` under a probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= probs.shape[-1]):
        raise ValueError(f"label out of range for {probs.shape[-1]} classes")
    if probs.ndim == 1:
        return float(-np.log(probs[int(label)]))
    picked = np.take_along_axis(probs, label.reshape(-1, 1), axis=-1)[:, 0]
    return -np.log(picked)


def softmax_cross_entropy(logits, labels):
    """Per-row loss and its gradient with respect to the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return losses, grad


def grl_forward(x):
    return x


def grl_backward(upstream, alpha):
    """Gradient reversal: identity forward, ``-alpha * upstream`` backward."""
    return -alpha * np.asarray(upstream, dtype=np.float64)


class MLP:
    """Stack of dense layers with ReLU between them.

    Parameters live in an external ``{name: array}`` dict under
    ``{prefix}.{i}.weight`` / ``{prefix}.{i}.bias`` so that whole models
    can be checkpointed and stepped as one flat mapping.
    """

    def __init__(self, prefix, widths, activate_last=False):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.prefix = prefix
        self.widths = list(widths)
        self.activate_last = activate_last

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def names(self):
        for i in range(len(self.widths) - 1):
            yield f"{self.prefix}.{i}.weight"
            yield f"{self.prefix}.{i}.bias"

    def init(self, params, rng):
        """Zero biases; He-uniform weights before a ReLU, Glorot-uniform otherwise."""
        n_layers = len(self.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if i < n_layers - 1 or self.activate_last:
                bound = np.sqrt(6.0 / fan_in)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{self.prefix}.{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            params[f"{self.prefix}.{i}.bias"] = np.zeros(fan_out)

    def forward(self, params, x):
        """Return the output and a tape of the activations backward needs."""
        tape = []
        n_layers = len(self.widths) - 1
        h = x
        for i in range(n_layers):
            z = linear_forward(params[f"{self.prefix}.{i}.weight"], params[f"{self.prefix}.{i}.bias"], h)
            act = i < n_layers - 1 or self.activate_last
            tape.append((h, z if act else None))
            h = relu(z) if act else z
        return h, tape

    def backward(self, params, tape, upstream, grads):
        """Accumulate parameter gradients into ``grads``; return the input gradient."""
        g = upstream
        for i in reversed(range(len(tape))):
            x_in, z = tape[i]
            if z is not None:
                g = relu_backward(z, g)
            w_name, b_name = f"{self.prefix}.{i}.weight", f"{self.prefix}.{i}.bias"
            dw, db, g = linear_backward(params[w_name], x_in, g)
            grads[w_name] = grads.get(w_name, 0.0) + dw
            grads[b_name] = grads.get(b_name, 0.0) + db
        return g


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """One momentum-SGD update; returns ``(new_params, new_velocity)``.

    ``v <- momentum * v + g``; ``p <- p - lr * v``.  Parameters without a
    gradient are left alone.
    """
    velocity = {} if velocity is None else velocity
    new_params = dict(params)
    new_velocity = dict(velocity)
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(params[name]):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
        v = momentum * velocity[name] + g if name in velocity else g
        new_velocity[name] = v
        new_params[name] = params[name] - lr * v
    return new_params, new_velocity


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_param: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _rel_error(a, n):
    num = np.linalg.norm(a - n)
    den = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if den == 0.0 else float(num / den)


def grad_check(fn, params, tolerance=1e-4, step=1e-5, value_fn=None):
    """Compare analytic gradients against central finite differences.

    ``fn(params) -> (loss, grads)``.  The relative error of each tensor is
    ``|analytic - numeric| / (|analytic| + |numeric|)`` in the Frobenius
    norm; the report carries the worst tensor.  ``value_fn(params) -> loss``,
    when given, is used for the perturbed evaluations instead of ``fn``.
    """
    if value_fn is None:
        value_fn = lambda p: fn(p)[0]  # noqa: E731
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = fn(params)
    report = GradCheckReport(0.0, 0.0, tolerance=tolerance)
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = value_fn(params)
            flat[i] = orig - step
            minus = value_fn(params)
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2 * step)
        a = np.broadcast_to(np.asarray(analytic.get(name, 0.0), dtype=np.float64), value.shape)
        rel = _rel_error(a, numeric)
        report.per_param[name] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
        report.max_abs_error = max(report.max_abs_error, float(np.max(np.abs(a - numeric), initial=0.0)))
    return report


_U32 = struct.Struct("<I")


def save_checkpoint(path, tensors):
    """Write named float64 tensors; names are written in sorted order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_U32.pack(len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
            fh.write(_U32.pack(arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise MalformedHeaderError(f"{path}: not a checkpoint file (bad magic {blob[:8]!r})")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedPayloadError(f"{path}: file ends at byte {len(blob)}, needed {pos + n}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = _U32.unpack(take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = _U32.unpack(take(4))
        if rank > 32:
            raise MalformedHeaderError(f"{path}: tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), "<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise ShapeMismatchError(f"{path}: {len(blob) - pos} trailing bytes after {count} tensors")
    return tensors
