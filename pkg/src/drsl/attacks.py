"""l-infinity gradient-sign attacks against a frozen classifier.

All attacks work in [0, 1] pixel space. After every step the candidate is
clamped into the epsilon-ball around the clean input and then into [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .losses import LossSpec, ce_loss, compute_loss
from .models import forward
from .tensor import Tape, Tensor

KINDS = ("fgsm", "ifgsm", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    """Attack hyperparameters.

    ``alpha`` is the I-FGSM step, ``step_size`` the PGD step; ``steps`` is the
    iteration count of either. ``loss`` selects the attack objective: ``"ce"``
    or ``"training-loss"`` (the victim's own training loss).
    """

    kind: str = "pgd"
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 40
    step_size: float = 0.01
    random_start: bool = False
    loss: str = "ce"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).lower())
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.loss not in ("ce", "training-loss"):
            raise ConfigError(f"attack loss must be 'ce' or 'training-loss', got {self.loss!r}")
        if self.kind in ("ifgsm", "pgd") and self.steps < 1:
            raise ConfigError("iterative attacks need steps >= 1")
        if self.kind == "ifgsm" and not self.alpha > 0:
            raise ConfigError("I-FGSM needs alpha > 0")
        if self.kind == "pgd" and not self.step_size > 0:
            raise ConfigError("PGD needs step_size > 0")

    def with_epsilon(self, epsilon, step_fraction=None):
        """Copy at a new budget, optionally rescaling the step to ``step_fraction * epsilon``."""
        kw = dict(self.__dict__)
        kw["epsilon"] = float(epsilon)
        if step_fraction is not None and epsilon > 0:
            kw["step_size"] = step_fraction * epsilon
            kw["alpha"] = step_fraction * epsilon
        return AttackSpec(**kw)


@dataclass
class AdvBatch:
    original: np.ndarray
    adversarial: np.ndarray
    success: np.ndarray
    predicted: np.ndarray

    @property
    def success_rate(self):
        return float(self.success.mean()) if self.success.size else 0.0


def project_linf(adv, orig, epsilon):
    """Clamp ``adv`` into ``[orig - eps, orig + eps]`` and then into ``[0, 1]``."""
    as_t = isinstance(adv, Tensor)
    a = adv.data if as_t else np.asarray(adv, dtype=np.float64)
    o = orig.data if isinstance(orig, Tensor) else np.asarray(orig, dtype=np.float64)
    if a.shape != o.shape:
        raise DimensionError(f"adversarial shape {a.shape} differs from original {o.shape}")
    if epsilon < 0:
        raise ContractError("epsilon must be non-negative")
    out = np.clip(np.clip(a, o - epsilon, o + epsilon), 0.0, 1.0)
    return Tensor(out) if as_t else out


def input_gradient(model, images, labels, objective=None):
    """Gradient of the mean attack objective with respect to the input batch."""
    x = Tensor(np.array(images, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        logits = forward(model, x)
        loss = ce_loss(logits, labels) if objective is None else compute_loss(objective, logits, labels)
    tape.backward(loss)
    g = np.zeros_like(x.data) if x.grad is None else x.grad
    if not np.all(np.isfinite(g)):
        raise NumericError("attack gradient contains NaN or Inf")
    return g


def _objective(spec, training_loss):
    if spec.loss == "ce":
        return None
    if training_loss is None:
        raise ContractError("attack.loss = 'training-loss' needs the victim's LossSpec")
    return training_loss if isinstance(training_loss, LossSpec) else LossSpec(**training_loss)


def _prepare(model, batch, labels):
    if not model.frozen:
        raise ContractError("attacks need a frozen model (call model.freeze())")
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != labels.shape[0]:
        raise DimensionError("batch and labels differ in length")
    return x, labels


def _finish(model, x, adv, labels):
    pred = np.argmax(forward(model, Tensor(adv)).data, axis=1) if len(adv) else np.zeros(0, np.int64)
    return AdvBatch(x, adv, pred != labels, pred)


def _iterate(model, x, labels, epsilon, step, steps, start, objective):
    adv = start
    for _ in range(steps):
        g = input_gradient(model, adv, labels, objective)
        adv = project_linf(adv + step * np.sign(g), x, epsilon)
    return adv


def _chunked(fn, model, batch, labels, chunk):
    x, labels = _prepare(model, batch, labels)
    if chunk is None or len(x) <= chunk:
        adv = fn(x, labels) if len(x) else x.copy()
    else:
        adv = np.concatenate([fn(x[i:i + chunk], labels[i:i + chunk]) for i in range(0, len(x), chunk)])
    return _finish(model, x, adv, labels)


def fgsm(model, batch, labels, spec, training_loss=None, chunk=500):
    """One signed-gradient step of size epsilon."""
    objective = _objective(spec, training_loss)

    def run(x, y):
        g = input_gradient(model, x, y, objective)
        return project_linf(x + spec.epsilon * np.sign(g), x, spec.epsilon)

    return _chunked(run, model, batch, labels, chunk)


def ifgsm(model, batch, labels, spec, training_loss=None, chunk=500):
    """``steps`` signed-gradient steps of size ``alpha``, projected after each one."""
    objective = _objective(spec, training_loss)

    def run(x, y):
        return _iterate(model, x, y, spec.epsilon, spec.alpha, spec.steps, x, objective)

    return _chunked(run, model, batch, labels, chunk)


def pgd(model, batch, labels, spec, training_loss=None, chunk=500):
    """Projected gradient-sign ascent, optionally from a uniform random start in the ball."""
    objective = _objective(spec, training_loss)
    rng = np.random.default_rng(spec.seed)

    def run(x, y):
        start = x
        if spec.random_start and spec.epsilon > 0:
            start = project_linf(x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), x, spec.epsilon)
        return _iterate(model, x, y, spec.epsilon, spec.step_size, spec.steps, start, objective)

    return _chunked(run, model, batch, labels, chunk)


ATTACKS = {"fgsm": fgsm, "ifgsm": ifgsm, "pgd": pgd}


def run_attack(model, batch, labels, spec, training_loss=None, chunk=500):
    return ATTACKS[spec.kind](model, batch, labels, spec, training_loss=training_loss, chunk=chunk)
