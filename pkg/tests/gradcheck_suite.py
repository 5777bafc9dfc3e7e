"""Randomized gradient checks shared by the unit tests and the acceptance gate.

Each case is ``(name, function, point, coords)``; ``coords`` limits the
finite-difference probe to a sample of flat indices for big tensors.
"""

import numpy as np

from drsl import tensor as T
from drsl.losses import LossSpec, compute_loss
from drsl.models import CIFAR_VGG_SMALL, MNIST_MLP, Model, ModelConfig, forward, init_model
from drsl.tensor import Tensor

LOSSES = [LossSpec("ce"), LossSpec("gce", q=0.7), LossSpec("drsl", tau=0.5, metric="euclidean"),
          LossSpec("drsl", tau=1.0, metric="cosine"),
          LossSpec("drsl", tau=0.5, metric="euclidean", restrict_to_non_true=True)]


def _away_from_zero(rng, shape, margin=0.05):
    """Normal draws pushed off the ReLU / max kinks so h-probes never straddle them."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def primitive_cases(rng):
    """One randomized instance of every differentiable primitive."""
    s = (3, 4)
    c = Tensor(rng.normal(size=s))
    r = Tensor(rng.normal(size=(4,)))  # broadcast partner
    pos = lambda: np.abs(rng.normal(size=s)) + 0.5
    w = Tensor(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 4, size=3)
    cw = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    cb = Tensor(rng.normal(size=3))
    grid = Tensor(np.linspace(-1, 1, 100).reshape(2, 2, 5, 5))
    return [
        ("add", lambda t: ((t + c) * c).sum(), rng.normal(size=s), None),
        ("add-broadcast", lambda t: ((c + t) * c).sum(), rng.normal(size=(4,)), None),
        ("sub", lambda t: ((t - r) * c).sum(), rng.normal(size=s), None),
        ("rsub", lambda t: ((2.0 - t) * c).sum(), rng.normal(size=s), None),
        ("mul", lambda t: (t * t * c).sum(), rng.normal(size=s), None),
        ("div", lambda t: (c / t).sum(), pos(), None),
        ("div-numerator", lambda t: (t / (c * c + 1.0)).sum(), rng.normal(size=s), None),
        ("neg", lambda t: ((-t) * c).sum(), rng.normal(size=s), None),
        ("relu", lambda t: (t.relu() * c).sum(), _away_from_zero(rng, s), None),
        ("exp", lambda t: (t.exp() * c).sum(), rng.normal(size=s), None),
        ("log", lambda t: (t.log() * c).sum(), pos(), None),
        ("sqrt", lambda t: (t.sqrt() * c).sum(), pos(), None),
        ("clip_min", lambda t: (T.clip_min(t, 0.3) * c).sum(), 0.3 + _away_from_zero(rng, s), None),
        ("sum-axis", lambda t: (T.tsum(t, axis=1) * T.tsum(t, axis=1)).sum(), rng.normal(size=s), None),
        ("mean", lambda t: (T.mean(t, axis=0, keepdims=True) * c).sum() + T.mean(t * t), rng.normal(size=s), None),
        ("reshape", lambda t: (t.reshape(2, 6) * c.reshape(2, 6)).sum(), rng.normal(size=s), None),
        ("gather", lambda t: (T.gather(t, labels) * T.gather(c, labels)).sum(), rng.normal(size=s), None),
        ("matmul", lambda t: (T.matmul(t, w) * T.matmul(t, w)).sum(), rng.normal(size=s), None),
        ("matmul-rhs", lambda t: (T.matmul(c, t) * T.matmul(c, t)).sum(), rng.normal(size=(4, 5)), None),
        ("softmax", lambda t: (T.softmax(t) * c).sum(), rng.normal(size=s) * 2, None),
        ("log_softmax", lambda t: (T.log_softmax(t) * c).sum(), rng.normal(size=s) * 2, None),
        ("conv2d-input", lambda t: _sq(T.conv2d(t, cw, cb)).sum(), rng.normal(size=(2, 2, 5, 5)), None),
        ("conv2d-weight", lambda t: _sq(T.conv2d(grid, t, cb)).sum(), rng.normal(size=(3, 2, 3, 3)), None),
        ("conv2d-bias", lambda t: T.conv2d(grid, cw, t).exp().sum(),
         rng.normal(size=3) * 0.1, None),
        ("maxpool2d", lambda t: (T.maxpool2d(t) * T.maxpool2d(t)).sum(), _distinct(rng, (2, 3, 4, 6)), None),
    ]


def _sq(t):
    return t * t


def _distinct(rng, shape):
    """Values whose pairwise gaps are far larger than any probe step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


def _model_loss_case(model, x, y, spec, target, coords):
    params = model.params
    if target == "input":
        f = lambda t: compute_loss(spec, forward(model, t), y)
        return f, x, coords
    base = params[target]

    def f(t):
        m = Model(model.config, {**params, target: t})
        return compute_loss(spec, forward(m, Tensor(x)), y)

    return f, base.data.copy(), coords


def model_cases(rng, vgg_full=True):
    """MLP and VGG-small loss compositions for all losses, w.r.t. input and parameters."""
    cases = []
    mlp_cfg = ModelConfig("mlp", (1, 6, 6), 4, widths=(7, 5))
    small_vgg = ModelConfig("vgg-small", (3, 8, 8), 5, widths=(6,), channels=(3, 4), convs_per_block=2)
    for spec in LOSSES:
        for cfg, nb in ((mlp_cfg, 3), (small_vgg, 2)):
            model = init_model(cfg, int(rng.integers(1 << 30))).freeze()
            x = rng.uniform(0, 1, size=(nb,) + cfg.input_shape)
            y = rng.integers(0, cfg.num_classes, size=nb)
            for target in ["input"] + [n for n in model.params]:
                f, point, coords = _model_loss_case(model, x, y, spec, target, None)
                cases.append((f"{cfg.architecture}-small/{spec.label}/{target}", f, point, coords))
    # shipped architectures, sampled coordinates
    for cfg in (MNIST_MLP, CIFAR_VGG_SMALL) if vgg_full else (MNIST_MLP,):
        model = init_model(cfg, 7).freeze()
        x = rng.uniform(0, 1, size=(2,) + cfg.input_shape)
        y = rng.integers(0, 10, size=2)
        for spec in LOSSES[:3]:
            targets = ["input", "fc0.weight"] + (["conv0.weight", "conv5.bias"] if cfg.architecture == "vgg-small" else [])
            for target in targets:
                size = x.size if target == "input" else model.params[target].size
                coords = rng.choice(size, size=min(size, 6), replace=False)
                f, point, _ = _model_loss_case(model, x, y, spec, target, coords)
                cases.append((f"{cfg.architecture}/{spec.label}/{target}", f, point, coords))
    return cases


def run(seed=0, primitive_rounds=4, vgg_full=True, h=1e-6):
    """Returns [(name, relative error)] for every trial."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(primitive_rounds):
        for name, f, point, coords in primitive_cases(rng):
            results.append((name, T.grad_check(f, point, h=h, coords=coords)))
    for name, f, point, coords in model_cases(rng, vgg_full=vgg_full):
        results.append((name, T.grad_check(f, point, h=h, coords=coords)))
    return results
