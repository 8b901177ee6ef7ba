import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosfairnet.errors import ConfigError, DegenerateVectorError
from cosfairnet.linalg import Rng, cosine
from cosfairnet.losses import (
    ConstraintMode,
    LossConfig,
    constraint_loss,
    cosine_and_grad,
    difficulty_weight,
    difficulty_weights,
    gce,
    softmax,
    softmax_ce,
    weighted_ce,
)


def logits_with_py(p, c=2):
    """Logits whose softmax puts probability p on class 0 (rest uniform)."""
    rest = (1 - p) / (c - 1)
    return np.array([[math.log(p)] + [math.log(rest)] * (c - 1)])


def numeric_dlogits(fn, logits, eps=1e-6):
    g = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += eps
        lm[idx] -= eps
        g[idx] = (fn(lp) - fn(lm)) / (2 * eps)
    return g


def test_ce_uniform():
    loss, _ = softmax_ce(np.zeros((1, 10)), [3])
    assert loss[0] == pytest.approx(math.log(10), abs=1e-15)


def test_ce_half():
    loss, _ = softmax_ce(np.array([[0.0, 0.0]]), [1])
    assert loss[0] == pytest.approx(math.log(2), abs=1e-15)


def test_ce_stable_for_large_logits():
    loss, d = softmax_ce(np.array([[1000.0, 0.0, -1000.0]]), [0])
    assert loss[0] == 0.0 and np.all(np.isfinite(d))


def test_ce_gradient_matches_fd():
    r = Rng(11)
    logits = r.normal(12).reshape(3, 4)
    y = np.array([0, 3, 1])
    _, d = softmax_ce(logits, y)
    num = numeric_dlogits(lambda z: softmax_ce(z, y)[0].mean(), logits)
    assert np.max(np.abs(d - num) / np.maximum(np.abs(d), 1e-12)) <= 1e-6


def test_ce_dlogits_convention():
    logits = Rng(2).normal(6).reshape(2, 3)
    y = np.array([2, 0])
    _, d = softmax_ce(logits, y)
    expected = (softmax(logits) - np.eye(3)[y]) / 2
    assert np.allclose(d, expected, rtol=0, atol=1e-16)


@pytest.mark.parametrize("bad", [[3], [-1]])
def test_labels_out_of_range(bad):
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((1, 3)), bad)
    with pytest.raises(ValueError):
        gce(np.zeros((1, 3)), bad, 0.7)


@pytest.mark.parametrize("q", [0.1, 0.7, 1.0])
def test_gce_certain_is_zero(q):
    loss, _ = gce(np.array([[800.0, 0.0, 0.0]]), [0], q)
    assert loss[0] == 0.0


def test_gce_q1_closed_form():
    loss, _ = gce(logits_with_py(0.3), [0], 1.0)
    assert abs(loss[0] - 0.7) <= 1e-12


def test_gce_reference_value():
    ref = (1 - mpmath.mpf("0.5") ** mpmath.mpf("0.7")) / mpmath.mpf("0.7")
    loss, _ = gce(np.array([[0.0, 0.0]]), [0], 0.7)
    assert abs(loss[0] - float(ref)) <= 1e-15
    assert round(float(ref), 7) == 0.5491826


@pytest.mark.parametrize("q", [0.0, -0.1, 1.01])
def test_gce_q_out_of_range(q):
    with pytest.raises(ValueError):
        gce(np.zeros((1, 2)), [0], q)


@given(st.integers(0, 10**6), st.sampled_from([0.3, 0.7, 1.0]))
def test_gce_gradient_identity(seed, q):
    r = Rng(seed)
    logits = r.normal(20).reshape(4, 5) * 3
    y = r.integers(0, 5, 4)
    p_y = softmax(logits)[np.arange(4), y]
    _, d_gce = gce(logits, y, q)
    _, d_ce = softmax_ce(logits, y)
    assert np.max(np.abs(d_gce - (p_y**q)[:, None] * d_ce)) <= 1e-9


@given(st.integers(0, 10**6))
def test_gce_tends_to_ce(seed):
    r = Rng(seed)
    logits = r.normal(30).reshape(3, 10) * 2
    y = r.integers(0, 10, 3)
    assert np.max(np.abs(gce(logits, y, 1e-6)[0] - softmax_ce(logits, y)[0])) <= 1e-4


def test_gce_gradient_matches_fd():
    r = Rng(5)
    logits = r.normal(15).reshape(3, 5)
    y = np.array([4, 0, 2])
    _, d = gce(logits, y, 0.7)
    num = numeric_dlogits(lambda z: gce(z, y, 0.7)[0].mean(), logits)
    assert np.max(np.abs(d - num) / np.maximum(np.abs(d), 1e-12)) <= 1e-6


def test_weighted_ce_reduces_to_ce():
    logits = Rng(1).normal(12).reshape(4, 3)
    y = np.array([0, 1, 2, 0])
    lw, dw = weighted_ce(logits, y, np.ones(4))
    l0, d0 = softmax_ce(logits, y)
    assert np.array_equal(lw, l0) and np.array_equal(dw, d0)


def test_weighted_ce_gradient():
    logits = Rng(4).normal(12).reshape(4, 3)
    y = np.array([2, 1, 0, 0])
    w = np.array([0.1, 0.9, 0.5, 0.0])
    _, d = weighted_ce(logits, y, w)
    num = numeric_dlogits(lambda z: weighted_ce(z, y, w)[0].mean(), logits)
    assert np.max(np.abs(d - num)) <= 1e-9


def test_difficulty_examples():
    assert difficulty_weight(1.3, 1.3) == 0.5
    assert difficulty_weight(2.0, 1.0) == pytest.approx(2 / 3, abs=1e-15)
    assert difficulty_weight(0.0, 1.0) == 0.0
    assert difficulty_weight(0.0, 0.0) == 0.5
    assert difficulty_weight(4e-13, 4e-13) == 0.5


def test_difficulty_negative():
    with pytest.raises(ValueError):
        difficulty_weight(-1e-3, 1.0)
    with pytest.raises(ValueError):
        difficulty_weights(np.array([1.0]), np.array([-1.0]))


nonneg = st.floats(0.0, 1e6, allow_nan=False, allow_infinity=False)


@given(nonneg, nonneg)
def test_difficulty_properties(a, b):
    w = difficulty_weight(a, b)
    assert 0.0 <= w <= 1.0
    if a + b > 0:
        assert difficulty_weight(a, b) + difficulty_weight(b, a) == 1.0


def test_difficulty_vectorised_matches_scalar():
    r = Rng(3)
    a = r.uniform(1000) * 5
    b = r.uniform(1000) * 5
    a[:3] = 0.0
    b[:2] = 0.0
    vec = difficulty_weights(a, b)
    assert all(vec[i] == difficulty_weight(a[i], b[i]) for i in range(1000))


def test_constraint_fixed_points():
    u = Rng(0).normal(10)
    loss, grad = constraint_loss(ConstraintMode.SIM, u, u, 0.1)
    assert loss == 0.0 and np.max(np.abs(grad)) <= 1e-16
    loss, grad = constraint_loss(ConstraintMode.DISSIM, -u, u, 0.1)
    assert loss == 0.0 and np.max(np.abs(grad)) <= 1e-16
    loss, grad = constraint_loss(ConstraintMode.NONE, u, -u, 0.1)
    assert loss == 0.0 and np.all(grad == 0)


def test_constraint_sim_half_cosine():
    u = np.array([1.0, 0.0])
    v = np.array([0.5, math.sqrt(3) / 2])
    loss, grad = constraint_loss("sim", u, v, 0.1)
    assert loss == pytest.approx(0.05, abs=1e-15)
    eps = 1e-6
    num = np.array([(constraint_loss("sim", u + eps * e, v, 0.1)[0] - constraint_loss("sim", u - eps * e, v, 0.1)[0]) / (2 * eps)
                    for e in np.eye(2)])
    # the first coordinate's exact gradient is 0; compare it absolutely
    assert abs(grad[0]) <= 1e-17 and abs(num[0]) <= 1e-10
    assert abs(grad[1] - num[1]) <= 1e-6 * abs(grad[1])


@pytest.mark.parametrize("mode,expect", [("sim", lambda s: 0.3 * (1 - s)), ("dissim", lambda s: 0.3 * (1 + s)),
                                         ("orth", lambda s: 0.3 * s * s)])
def test_constraint_values(mode, expect):
    r = Rng(8)
    u, v = r.normal(7), r.normal(7)
    assert constraint_loss(mode, u, v, 0.3)[0] == pytest.approx(expect(cosine(u, v)), abs=1e-15)


def test_constraint_degenerate():
    with pytest.raises(DegenerateVectorError):
        constraint_loss("sim", np.zeros(3), np.ones(3), 0.1)
    with pytest.raises(DegenerateVectorError):
        constraint_loss("dissim", np.ones(3), np.zeros(3), 0.1)


@given(st.integers(0, 10**6), st.integers(2, 30))
def test_cosine_gradient_tangent(seed, n):
    # the cosine is scale invariant, so its gradient is orthogonal to u
    r = Rng(seed)
    u, v = r.normal(n), r.normal(n)
    _, g = cosine_and_grad(u, v)
    assert abs(g @ u) <= 1e-12 * np.linalg.norm(g) * np.linalg.norm(u) + 1e-300
    for mode in ("sim", "dissim", "orth"):
        loss, grad = constraint_loss(mode, u, v, 0.5)
        assert loss >= 0.0
        assert abs(grad @ u) <= 1e-12 * max(np.linalg.norm(grad) * np.linalg.norm(u), 1e-300)


def test_constraint_grad_zero_at_orthogonality():
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0])
    loss, grad = constraint_loss("orth", u, v, 1.0)
    assert loss == 0.0 and np.all(grad == 0)


def test_mode_parse():
    assert ConstraintMode.parse("Similarity") is ConstraintMode.SIM
    assert ConstraintMode.parse(" DISSIM ") is ConstraintMode.DISSIM
    assert ConstraintMode.parse("orthogonality") is ConstraintMode.ORTH
    assert ConstraintMode.parse("none") is ConstraintMode.NONE
    with pytest.raises(ConfigError):
        ConstraintMode.parse("cosine")


@pytest.mark.parametrize("kw", [dict(q=0.0), dict(q=1.5), dict(lambda_c=-0.1)])
def test_loss_config_validation(kw):
    with pytest.raises(ConfigError):
        LossConfig(**kw)
