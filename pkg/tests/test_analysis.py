import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drsl.analysis import (AttackEvaluation, accuracy, attack_success_rate, evaluate_attack, pca_project,
                           pearson_correlation, second_argmax, second_argmax_match_rate, second_argmax_report,
                           stochasticity, stochasticity_from_probs)
from drsl.attacks import AdvBatch, AttackSpec
from drsl.data import Dataset
from drsl.errors import ContractError, DimensionError, NumericError
from drsl.models import Model, ModelConfig, init_model
from drsl.tensor import Tensor


def _constant_model(c, num_classes=10, dim=4):
    cfg = ModelConfig("mlp", (1, 1, dim), num_classes, widths=())
    b = np.zeros(num_classes)
    b[c] = 1.0
    return Model(cfg, {"fc0.weight": Tensor(np.zeros((dim, num_classes))), "fc0.bias": Tensor(b)}).freeze()


def _ds(n, dim=4, C=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(size=(n, 1, 1, dim)), rng.integers(0, C, size=n), "MNIST", "test", C)


def _fake_eval(rng, n=200, C=10):
    """Random clean probabilities and post-attack predictions."""
    probs = rng.dirichlet(np.ones(C) * 0.5, size=n)
    labels = rng.integers(0, C, size=n)
    pred = rng.integers(0, C, size=n)
    adv = AdvBatch(np.zeros((n, 1)), np.zeros((n, 1)), pred != labels, pred)
    return AttackEvaluation(labels, probs, adv)


# --------------------------------------------------------------- accuracy / ASR

def test_constant_model_accuracy_is_label_frequency():
    ds = _ds(300)
    for c in (0, 3, 9):
        assert accuracy(_constant_model(c), ds) == pytest.approx(np.mean(ds.labels == c), abs=1e-15)


def test_empty_dataset_and_shape_mismatch_rejected():
    m = _constant_model(0)
    with pytest.raises(ContractError):
        accuracy(m, _ds(0))
    with pytest.raises(DimensionError):
        accuracy(m, _ds(5, dim=3))


def test_eps_zero_gives_zero_asr():
    m = init_model(ModelConfig("mlp", (1, 1, 4), 10, widths=(6,)), 0).freeze()
    assert attack_success_rate(m, _ds(100), AttackSpec("pgd", 0.0, step_size=0.01, steps=3)) == 0.0


def test_asr_denominator_is_clean_correct_subset():
    m = init_model(ModelConfig("mlp", (1, 1, 4), 10, widths=(6,)), 1).freeze()
    ds = _ds(500, seed=3)
    ev = evaluate_attack(m, ds, AttackSpec("fgsm", 0.5))
    assert ev.n_correct == int(np.sum(np.argmax(m(Tensor(ds.images)).data, 1) == ds.labels))
    assert ev.n_correct < len(ds) / 3  # untrained: roughly N / C correct
    assert ev.asr == ev.n_success / ev.n_correct
    assert ev.identity_holds()


def test_asr_with_no_correct_examples_warns():
    ev = AttackEvaluation(np.array([1, 1]), np.array([[0.9, 0.1], [0.8, 0.2]]),
                          AdvBatch(np.zeros(2), np.zeros(2), np.array([True, True]), np.array([0, 0])))
    with pytest.warns(RuntimeWarning):
        assert ev.asr == 0.0
    assert ev.identity_holds()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 300), st.integers(2, 10))
def test_robust_identity_is_exact(seed, n, C):
    ev = _fake_eval(np.random.default_rng(seed), n, C)
    assert ev.identity_holds()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert ev.robust_accuracy == pytest.approx(ev.clean_accuracy * (1 - ev.asr), abs=1e-15)


# --------------------------------------------------------------- stochasticity

def test_zero_final_layer_has_zero_distance():
    m = init_model(ModelConfig("mlp", (1, 1, 4), 10, widths=(6,)), 0).freeze()
    m.params["fc1.weight"].data[:] = 0
    for metric in ("euclidean", "cosine"):
        rep = stochasticity(m, _ds(50), metric)
        np.testing.assert_allclose(rep.distances, 0.0, atol=1e-15)
        assert rep.mean == pytest.approx(0.0, abs=1e-15)


def test_saturated_one_hot_distance():
    p = np.eye(10)[[0, 3, 7]]
    rep = stochasticity_from_probs(p, "euclidean")
    np.testing.assert_allclose(rep.distances, math.sqrt(0.9), atol=1e-15)
    assert rep.distances[0] == pytest.approx(0.94868, abs=1e-5)
    assert rep.histogram.sum() == 3 and rep.histogram[-1] == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(1, 200), st.integers(0, 10_000), st.sampled_from(["euclidean", "cosine"]))
def test_stochasticity_report_invariants(C, n, seed, metric):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(C) * 0.3, size=n)
    rep = stochasticity_from_probs(p, metric, bins=7)
    assert rep.mean == pytest.approx(float(np.sum(rep.distances)) / n, abs=1e-12)
    top = math.sqrt((C - 1) / C) if metric == "euclidean" else 1 - 1 / math.sqrt(C)
    assert np.all(rep.distances >= 0) and np.all(rep.distances <= top)
    assert rep.histogram.sum() == n
    perm = stochasticity_from_probs(p[rng.permutation(n)], metric, bins=7)
    assert perm.mean == pytest.approx(rep.mean, abs=1e-12)


# --------------------------------------------------------------- second argmax

def test_second_argmax_ties_pick_lowest_index():
    np.testing.assert_array_equal(second_argmax(np.array([[0.5, 0.25, 0.25], [0.2, 0.2, 0.6]])), [1, 0])


def test_two_class_match_rate_is_one():
    rng = np.random.default_rng(0)
    n = 100
    probs = rng.dirichlet([1, 1], size=n)
    labels = probs.argmax(1)  # all clean-correct
    pred = np.where(rng.random(n) < 0.4, 1 - labels, labels)
    ev = AttackEvaluation(labels, probs, AdvBatch(np.zeros(n), np.zeros(n), pred != labels, pred))
    rep = second_argmax_report(ev, 2)
    assert not rep.empty and rep.overall == 1.0 and rep.chance == 1.0


def test_never_successful_attack_flags_empty():
    ds = _ds(40)
    m = init_model(ModelConfig("mlp", (1, 1, 4), 10, widths=(6,)), 0).freeze()
    rep = second_argmax_match_rate(m, ds, AttackSpec("fgsm", 0.0))
    assert rep.empty and math.isnan(rep.overall) and np.all(np.isnan(rep.per_class))
    assert rep.chance == pytest.approx(1 / 9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 10))
def test_second_argmax_counts_are_consistent(seed, C):
    ev = _fake_eval(np.random.default_rng(seed), 300, C)
    rep = second_argmax_report(ev, C)
    assert rep.success_counts.sum() == ev.n_success
    assert np.all(rep.match_counts <= rep.success_counts)
    if not rep.empty:
        ok = rep.success_counts > 0
        weighted = np.sum(rep.per_class[ok] * rep.success_counts[ok]) / rep.success_counts.sum()
        assert rep.overall == pytest.approx(weighted, abs=1e-12)
        assert 0 <= rep.overall <= 1 and np.all((rep.per_class[ok] >= 0) & (rep.per_class[ok] <= 1))


# --------------------------------------------------------------- pearson

def test_pearson_examples():
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_correlation(xs, 2 * xs) == pytest.approx(1.0, abs=1e-15)
    assert pearson_correlation(xs, -xs + 5) == pytest.approx(-1.0, abs=1e-15)
    assert pearson_correlation([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(NumericError):
        pearson_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        pearson_correlation([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 50))
def test_pearson_matches_numpy(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    assert pearson_correlation(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


# --------------------------------------------------------------- PCA

def test_pca_points_on_a_line():
    t = np.linspace(-2, 3, 40)
    pts = np.outer(t, [1.0, -2.0, 0.5, 3.0]) + [1, 2, 3, 4]
    res = pca_project(pts)
    assert res.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert res.explained_ratio[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_two_dims_preserves_distances():
    pts = np.random.default_rng(1).normal(size=(30, 2)) @ np.array([[2.0, 0.3], [0.3, 0.5]])
    proj = pca_project(pts, 2).projected
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-12)


def test_pca_gaussian_cloud_ratios_and_svd_oracle():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(200, 6)) * [3, 2, 1.5, 1, 0.5, 0.1]
    res = pca_project(pts, 3)
    assert np.all(np.diff(res.explained_ratio) <= 0) and res.explained_ratio.sum() <= 1 + 1e-12
    # independent route: SVD of the centred data
    xc = pts - pts.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    np.testing.assert_allclose(res.explained_ratio, (s ** 2 / (s ** 2).sum())[:3], atol=1e-12)
    for k in range(3):
        v = vt[k] * np.sign(vt[k][np.argmax(np.abs(vt[k]))])
        np.testing.assert_allclose(res.components[k], v, atol=1e-10)
    np.testing.assert_allclose(res.transform(pts), res.projected, atol=1e-12)


def test_pca_deterministic_and_degenerate():
    pts = np.random.default_rng(3).dirichlet(np.ones(10), size=100)
    a, b = pca_project(pts), pca_project(pts)
    assert a.projected.tobytes() == b.projected.tobytes()
    with pytest.raises(NumericError):
        pca_project(np.ones((5, 3)))
    with pytest.raises(DimensionError):
        pca_project(np.ones(5))


@pytest.mark.slow
def test_mlp_reaches_95_percent_on_full_mnist(mnist_dir):
    from drsl.data import load_dataset
    from drsl.losses import LossSpec
    from drsl.models import MNIST_MLP
    from drsl.training import TrainConfig, train

    train_set = load_dataset("MNIST", mnist_dir, "train")
    test_set = load_dataset("MNIST", mnist_dir, "test")
    model = init_model(MNIST_MLP, 0)
    train(model, train_set, LossSpec("ce"), TrainConfig(epochs=3))
    assert accuracy(model.freeze(), test_set) >= 0.95
