import json
import os
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drsl import tensor as T
from drsl.errors import ContractError, DimensionError, NumericError, ReuseError
from drsl.optim import AdamState, adam_step
from drsl.tensor import Tape, Tensor, grad, grad_check

HERE = os.path.dirname(os.path.abspath(__file__))
FROZEN = json.load(open(os.path.join(HERE, "frozen", "oracle_values.json")))

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_for_equal_logits():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4, atol=1e-15)


def test_softmax_worked_example_matches_oracle():
    p = T.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(p, [0.09003, 0.24473, 0.66524], atol=1e-5)
    np.testing.assert_allclose(p, FROZEN["worked"]["softmax_123"], atol=1e-15)


def test_softmax_large_logits_no_overflow():
    with np.errstate(over="raise"):
        p = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert p[1] < 1e-300


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros(0)))
    with pytest.raises(NumericError):
        T.softmax(Tensor([1.0, np.nan]))
    with pytest.raises(NumericError):
        T.log_softmax(Tensor([np.inf, 0.0]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(z, c):
    p = T.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(T.softmax(Tensor(z + c)).data, p, atol=1e-9)


# ---------------------------------------------------------------- backward

def test_backward_square_at_three():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0])


def test_sum_gives_ones_for_any_shape():
    for shape in [(1,), (4,), (2, 3), (2, 3, 4)]:
        np.testing.assert_array_equal(grad(lambda x: x.sum(), np.random.default_rng(0).normal(size=shape)),
                                      np.ones(shape))


def test_ce_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = int(rng.integers(2, 11))
        z = rng.normal(0, 2, size=(1, c))
        y = int(rng.integers(c))
        f = lambda t: -T.gather(T.log_softmax(t), np.array([y])).sum()
        g = grad(f, z)
        expect = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        expect[0, y] -= 1.0
        np.testing.assert_allclose(g, expect, atol=1e-12)
        assert grad_check(f, z, h=1e-6) <= 1e-4


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as tape:
        s = (x * x).sum()
    tape.backward(s)
    with pytest.raises(ReuseError):
        tape.backward(s)


def test_gradient_accumulates_when_subgraph_used_twice():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 4))
    g = lambda t: T.log_softmax(t * t).sum()
    single = grad(g, z)
    double = grad(lambda t: g(t) + g(t), z)
    np.testing.assert_array_equal(double, 2.0 * single)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    f = lambda x: T.maxpool2d(T.conv2d(x, w).relu()).sum()
    np.testing.assert_array_equal(grad(f, x0), grad(f, x0))


def test_replay_order_is_reverse_of_recording():
    x = Tensor([2.0], requires_grad=True)
    seen = []
    with Tape() as tape:
        a = x * 3.0
        b = a.exp()
        c = b.sum()
    for rec, name in zip(tape.records, "abc"):
        inner = rec.backward
        rec.backward = lambda g, inner=inner, name=name: (seen.append(name), inner(g))[1]
    tape.backward(c)
    assert seen == ["c", "b", "a"]


def test_ops_outside_tape_are_not_recorded():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert T.current_tape() is None
    with Tape() as tape:
        z = (x * 2.0).sum()
    assert len(tape) == 2
    tape.backward(z)
    assert x.grad[0] == 2.0
    assert y.data[0] == 2.0


def test_tapes_are_thread_confined():
    z = {s: np.random.default_rng(s).normal(size=(4, 5)) for s in range(4)}
    f = lambda t: (T.log_softmax(t) * T.log_softmax(t)).sum()
    expected = {s: grad(f, z[s]) for s in z}
    results, errors = {}, []

    def work(seed):
        try:
            for _ in range(20):
                results[seed] = grad(f, z[seed])
                assert np.array_equal(results[seed], expected[seed])
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in z]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert T.current_tape() is None


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_is_exact():
    # no truncation error for a linear map, so a coarse step only shrinks round-off
    a = np.random.default_rng(4).normal(size=7)
    x = np.random.default_rng(5).normal(size=7)
    assert grad_check(lambda t: (t * Tensor(a)).sum(), x, h=2.0 ** -4) <= 1e-10


def test_grad_check_constant_function_is_zero():
    assert grad_check(lambda t: (t * 0.0).sum() + 5.0, np.ones(3)) == 0.0


def test_grad_check_two_layer_mlp():
    rng = np.random.default_rng(5)
    w1 = Tensor(rng.normal(size=(6, 8)) * 0.5)
    w2 = Tensor(rng.normal(size=(8, 4)) * 0.5)
    y = np.array([0, 3, 1])
    f = lambda x: -T.gather(T.log_softmax(T.matmul(T.matmul(x, w1).relu(), w2)), y).mean()
    assert grad_check(f, rng.normal(size=(3, 6)), h=1e-6) <= 1e-4


def test_grad_check_contract_errors():
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, np.ones(3))
    with pytest.raises(ContractError):
        grad_check(lambda t: t.sum(), np.ones(3), h=0.0)


def test_sqrt_derivative_at_zero_is_zero():
    g = grad(lambda t: T.sqrt(t).sum(), np.array([0.0, 4.0]))
    np.testing.assert_array_equal(g, [0.0, 0.25])


# --------------------------------------------------------------- adam

def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.t == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState())
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert p["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-10)


def test_adam_identical_params_get_identical_updates():
    p = {"a": np.array([0.3, 0.3]), "b": np.array([0.3, 0.3])}
    st_ = AdamState()
    for k in range(5):
        g = np.array([0.1 * k - 0.2, 0.1 * k - 0.2])
        adam_step(p, {"a": g, "b": g.copy()}, st_)
    np.testing.assert_array_equal(p["a"], p["b"])
    assert p["a"][0] == p["a"][1]


def test_adam_shape_mismatch_and_bad_hyperparameters():
    from drsl.errors import ConfigError

    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    for kw in [dict(lr=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0.0)]:
        with pytest.raises(ConfigError):
            AdamState(**kw)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(6)
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    st_ = AdamState(lr=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-13, atol=1e-15)
