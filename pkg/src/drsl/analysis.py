"""Measurements over frozen models: accuracy, attack success, softmax spread,
second-argmax agreement, correlation and PCA."""

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attacks import AdvBatch, run_attack
from .errors import ContractError, DimensionError, NumericError
from .losses import DISTANCES, max_distance_to_uniform, uniform_distribution
from .models import predict_logits


def softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check(model, dataset):
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if tuple(dataset.images.shape[1:]) != model.config.input_shape:
        raise DimensionError(f"dataset images {dataset.images.shape[1:]} do not match model input {model.config.input_shape}")


def predict_probs(model, dataset):
    _check(model, dataset)
    return softmax_np(predict_logits(model, dataset.images))


def accuracy(model, dataset):
    """Fraction of examples whose argmax logit (lowest index on ties) equals the label."""
    _check(model, dataset)
    pred = np.argmax(predict_logits(model, dataset.images), axis=1)
    return float(np.mean(pred == dataset.labels))


# -- attacks -----------------------------------------------------------------

@dataclass
class AttackEvaluation:
    """Clean and post-attack predictions on one dataset under one attack."""

    labels: np.ndarray
    clean_probs: np.ndarray
    adv: AdvBatch

    @property
    def clean_pred(self):
        return np.argmax(self.clean_probs, axis=1)

    @property
    def clean_correct(self):
        return self.clean_pred == self.labels

    @property
    def succeeded(self):
        """Clean-correct examples that the attack pushed to a wrong class."""
        return self.clean_correct & (self.adv.predicted != self.labels)

    @property
    def n(self):
        return len(self.labels)

    @property
    def n_correct(self):
        return int(self.clean_correct.sum())

    @property
    def n_success(self):
        return int(self.succeeded.sum())

    @property
    def clean_accuracy(self):
        return self.n_correct / self.n

    @property
    def robust_accuracy(self):
        return (self.n_correct - self.n_success) / self.n

    @property
    def asr(self):
        if self.n_correct == 0:
            warnings.warn("no clean-correct examples; attack success rate reported as 0", RuntimeWarning, stacklevel=2)
            return 0.0
        return self.n_success / self.n_correct

    def identity_holds(self):
        """robust = clean * (1 - ASR), checked in exact rational arithmetic."""
        if self.n_correct == 0:
            return self.n_success == 0
        clean = Fraction(self.n_correct, self.n)
        asr = Fraction(self.n_success, self.n_correct)
        return Fraction(self.n_correct - self.n_success, self.n) == clean * (1 - asr)


def evaluate_attack(model, dataset, attack_spec, training_loss=None, chunk=500):
    _check(model, dataset)
    probs = predict_probs(model, dataset)
    adv = run_attack(model, dataset.images, dataset.labels, attack_spec, training_loss=training_loss, chunk=chunk)
    return AttackEvaluation(dataset.labels, probs, adv)


def attack_success_rate(model, dataset, attack_spec, training_loss=None):
    """Share of clean-correct examples that are misclassified after the attack."""
    return evaluate_attack(model, dataset, attack_spec, training_loss).asr


# -- softmax spread ----------------------------------------------------------

@dataclass
class StochasticityReport:
    distances: np.ndarray
    mean: float
    std: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    metric: str


def stochasticity_from_probs(probs, metric="euclidean", bins=20):
    probs = np.asarray(probs, dtype=np.float64)
    d = np.atleast_1d(DISTANCES[metric](probs, uniform_distribution(probs.shape[1])))
    top = max_distance_to_uniform(metric, probs.shape[1])
    # rounding can push a saturated row a hair past the analytic maximum
    d = np.clip(d, 0.0, top)
    hist, edges = np.histogram(d, bins=bins, range=(0.0, top))
    return StochasticityReport(d, float(np.mean(d)), float(np.std(d)), hist, edges, metric)


def stochasticity(model, dataset, metric="euclidean", bins=20):
    """Distance of every softmax output to the uniform distribution."""
    return stochasticity_from_probs(predict_probs(model, dataset), metric, bins)


# -- second argmax -----------------------------------------------------------

@dataclass
class SecondArgmaxReport:
    overall: float
    per_class: np.ndarray
    success_counts: np.ndarray
    match_counts: np.ndarray
    chance: float
    empty: bool


def second_argmax(probs):
    """Index of the second-highest entry per row (lowest index wins ties)."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, 1]


def second_argmax_report(evaluation, num_classes):
    succeeded = evaluation.succeeded
    second = second_argmax(evaluation.clean_probs)
    match = succeeded & (evaluation.adv.predicted == second)
    labels = evaluation.labels
    success_counts = np.bincount(labels[succeeded], minlength=num_classes)
    match_counts = np.bincount(labels[match], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(success_counts > 0, match_counts / np.maximum(success_counts, 1), np.nan)
    total = int(success_counts.sum())
    overall = float(match_counts.sum() / total) if total else float("nan")
    return SecondArgmaxReport(overall, per_class, success_counts, match_counts, 1.0 / (num_classes - 1), total == 0)


def second_argmax_match_rate(model, dataset, attack_spec, training_loss=None):
    """Among successful attacks, how often the new prediction is the clean second choice."""
    ev = evaluate_attack(model, dataset, attack_spec, training_loss)
    return second_argmax_report(ev, model.config.num_classes)


# -- statistics --------------------------------------------------------------

def pearson_correlation(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise DimensionError("pearson_correlation needs two equal-length vectors of length >= 2")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise NumericError("correlation is undefined for a constant input")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


@dataclass
class PCAResult:
    projected: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray  # (out_dims, D)
    mean: np.ndarray

    def transform(self, points):
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components.T


def pca_project(points, out_dims=2):
    """Project mean-centred points onto the leading covariance eigenvectors.

    Each component is signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < out_dims:
        raise DimensionError(f"pca_project needs (N >= 2, D >= {out_dims}) points, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    total = evals.sum()
    if not total > 0:
        raise NumericError("all points coincide; nothing to project")
    order = np.argsort(-evals, kind="stable")[:out_dims]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = np.clip(evals[order], 0.0, None) / total
    return PCAResult(xc @ comps.T, ratios, comps, mu)
