"""Cross entropy, generalized cross entropy and the distribution-restrained softmax loss.

The restrained loss adds ``tau * d(softmax(z), uniform)`` to cross entropy,
where ``d`` is the Euclidean distance or the cosine distance
``1 - cos(p, u)``. Minimising it pulls the softmax output toward the uniform
distribution, which keeps non-true-class probabilities evenly spread.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, LabelError, NumericError
from .tensor import Tensor, as_tensor, clip_min, exp, gather, log_softmax, mul, softmax, sqrt, tsum

KINDS = ("ce", "gce", "drsl")
METRICS = ("euclidean", "cosine")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    q: float = 0.7
    tau: float = 0.0
    metric: str = "euclidean"
    restrict_to_non_true: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).lower())
        object.__setattr__(self, "metric", str(self.metric).lower())
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "gce" and not 0 < self.q <= 1:
            raise ConfigError(f"GCE needs 0 < q <= 1, got {self.q}")
        if self.kind == "drsl":
            if not self.tau >= 0:
                raise ConfigError(f"DRSL needs tau >= 0, got {self.tau}")
            if self.metric not in METRICS:
                raise ConfigError(f"unknown distance metric {self.metric!r}")

    @property
    def label(self):
        if self.kind == "ce":
            return "ce"
        if self.kind == "gce":
            return f"gce-q{self.q:g}"
        suffix = "-nontrue" if self.restrict_to_non_true else ""
        return f"drsl-{self.metric}-tau{self.tau:g}{suffix}"

    def __call__(self, logits, labels):
        return compute_loss(self, logits, labels)


def uniform_distribution(num_classes):
    """The probability vector with every entry ``1/C``."""
    if num_classes < 2:
        raise ConfigError(f"uniform distribution needs at least 2 classes, got {num_classes}")
    u = np.full(num_classes, 1.0 / num_classes)
    return u / u.sum()


# -- distances ---------------------------------------------------------------

def _rowwise_euclidean(a, b):
    d = a - b
    return sqrt(tsum(mul(d, d), axis=-1))


def _rowwise_cosine(a, b):
    na = np.sqrt(np.sum(a.data * a.data, axis=-1))
    nb = np.sqrt(np.sum(b.data * b.data, axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine distance is undefined for a zero-norm vector")
    dot = tsum(mul(a, b), axis=-1)
    norm_a = sqrt(tsum(mul(a, a), axis=-1))
    norm_b = sqrt(tsum(mul(b, b), axis=-1))
    return 1.0 - dot / (norm_a * norm_b)


def _distance(fn, a, b):
    tensor_in = isinstance(a, Tensor) or isinstance(b, Tensor)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:] or a.shape[-1] < 1:
        raise DimensionError(f"distance needs equal trailing lengths, got {a.shape} and {b.shape}")
    out = fn(a, b)
    if tensor_in:
        return out
    return float(out.data) if out.ndim == 0 else out.data


def euclidean_distance(a, b):
    """``sqrt(sum((a - b)**2))`` along the last axis."""
    return _distance(_rowwise_euclidean, a, b)


def cosine_distance(a, b):
    """``1 - a.b / (|a| |b|)`` along the last axis; lies in [0, 2]."""
    return _distance(_rowwise_cosine, a, b)


DISTANCES = {"euclidean": euclidean_distance, "cosine": cosine_distance}


def max_distance_to_uniform(metric, num_classes):
    """Largest distance any probability vector can have from uniform (attained at a one-hot)."""
    if metric == "euclidean":
        return math.sqrt((num_classes - 1) / num_classes)
    if metric == "cosine":
        return 1.0 - 1.0 / math.sqrt(num_classes)
    raise ConfigError(f"unknown distance metric {metric!r}")


# -- losses ------------------------------------------------------------------

def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, C), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels must have shape ({logits.shape[0]},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def ce_loss(logits, labels):
    """Mean cross entropy, via log-sum-exp."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    return -gather(log_softmax(logits), labels).mean()


def gce_loss(logits, labels, q=0.7):
    """Mean of ``(1 - p_y**q) / q`` with ``p_y`` floored at 1e-12."""
    if not 0 < q <= 1:
        raise ConfigError(f"GCE needs 0 < q <= 1, got {q}")
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    logp = clip_min(gather(log_softmax(logits), labels), math.log(PROB_FLOOR))
    return ((1.0 - exp(q * logp)) / q).mean()


def distance_to_uniform(probs, metric="euclidean", labels=None):
    """Per-row distance of probability rows to the uniform distribution.

    With ``labels`` given, the true-class entry is dropped and the remaining
    entries are renormalised before comparing with uniform over ``C - 1``.
    """
    probs = as_tensor(probs)
    C = probs.shape[-1]
    fn = DISTANCES[metric]
    if labels is None:
        return fn(probs, Tensor(uniform_distribution(C)))
    mask = np.ones(probs.shape)
    mask[np.arange(probs.shape[0]), np.asarray(labels, dtype=np.int64)] = 0.0
    rest = mul(probs, mask)
    rest = rest / tsum(rest, axis=-1, keepdims=True)
    return fn(rest, Tensor(mask / (C - 1)))


def drsl_loss(logits, labels, tau, metric="euclidean", restrict_to_non_true=False):
    """Cross entropy plus ``tau`` times the mean distance of softmax rows to uniform."""
    if not tau >= 0:
        raise ConfigError(f"DRSL needs tau >= 0, got {tau}")
    if metric not in METRICS:
        raise ConfigError(f"unknown distance metric {metric!r}")
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    ce = ce_loss(logits, labels)
    dist = distance_to_uniform(softmax(logits), metric, labels if restrict_to_non_true else None)
    return ce + tau * dist.mean()


def compute_loss(spec, logits, labels):
    if spec.kind == "ce":
        return ce_loss(logits, labels)
    if spec.kind == "gce":
        return gce_loss(logits, labels, spec.q)
    return drsl_loss(logits, labels, spec.tau, spec.metric, spec.restrict_to_non_true)
