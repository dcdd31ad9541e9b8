import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf
from mpmath import log as mlog
from oracles import central_diff, numeric_gradient, rel_err, scalar_fuzzy_term, second_diff

from fuzzycurriculum import losses
from fuzzycurriculum.errors import InvalidParameter, InvalidTarget, NonFiniteInput, ShapeMismatch
from fuzzycurriculum.losses import FixedRho, RhoPair

MU = 17 / 26


def _one(p, mu=MU, r1=0.5, r2=0.5):
    return losses.fuzzy_loss(np.array([p]), np.array([mu]), r1, r2)[0]


def _mp_reference():
    mp.dps = 30
    mu, p, r = mpf(17) / 26, mpf("0.7"), mpf("0.5")
    loss = -(mu * mlog(p) + r * (1 - mu) * mlog(r * (1 - p)))
    d_rho2 = -(1 - mu) * mlog(r * (1 - p))
    curv = mu / p**2 + r * (1 - mu) / (1 - p) ** 2
    return float(loss), float(d_rho2), float(curv), float(mu / (mu + r * (1 - mu)))


def test_reference_point_matches_high_precision():
    loss, d_rho2, curv, p_star = _mp_reference()
    # values frozen from the 30-digit computation above
    assert loss == pytest.approx(0.5615582299594199, rel=1e-15)
    assert _one(0.7) == pytest.approx(loss, rel=1e-13)
    g = losses.fuzzy_loss_grad_p(np.array([0.7]), np.array([MU]), 0.5, 0.5)[0]
    assert g == pytest.approx(-0.35714285714285715, rel=1e-13)
    d1, d2 = losses.fuzzy_loss_grad_rho(np.array([0.7]), np.array([MU]), 0.5, 0.5)
    assert d1 == pytest.approx(-0.34615384615384615, rel=1e-13)
    assert d2 == pytest.approx(d_rho2, rel=1e-13) and d2 == pytest.approx(0.6566953793835743, rel=1e-13)
    c = losses.fuzzy_loss_curvature(np.array([0.7]), np.array([MU]), 0.5, 0.5)[0]
    assert c == pytest.approx(curv, rel=1e-13) and c == pytest.approx(3.2574568288854003, rel=1e-13)
    assert losses.equilibrium_prob(MU, 0.5) == pytest.approx(p_star, rel=1e-15)
    assert p_star == pytest.approx(0.7906976744186046, rel=1e-15)


def test_softmax_examples():
    np.testing.assert_allclose(losses.softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(losses.softmax([1000.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(losses.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)
    with pytest.raises(NonFiniteInput):
        losses.softmax([np.nan, 0.0])


def test_confident_correct_prediction_costs_nothing():
    assert _one(1.0, mu=1.0) == pytest.approx(0.0, abs=1e-6)
    assert _one(0.5, mu=1.0) == pytest.approx(math.log(2), rel=1e-14)


def test_clamp_keeps_loss_finite():
    assert np.isfinite(_one(0.0, mu=1.0)) and np.isfinite(_one(1.0, mu=0.0))
    assert _one(0.0, mu=1.0) == pytest.approx(-math.log(1e-7), rel=1e-9)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        losses.fuzzy_loss(np.ones((2, 2)) / 2, np.ones((2, 3)) / 3, 0.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(
    p=st.floats(0.02, 0.98),
    mu=st.floats(0.0, 1.0),
    r1=st.floats(0.05, 0.95),
    r2=st.floats(0.05, 0.95),
)
def test_derivatives_match_finite_differences(p, mu, r1, r2):
    f = lambda q: scalar_fuzzy_term(mu, q, r1, r2)  # noqa: E731
    assert _one(p, mu, r1, r2) == pytest.approx(f(p), rel=1e-12)
    g = losses.fuzzy_loss_grad_p(np.array([p]), np.array([mu]), r1, r2)[0]
    assert rel_err(g, central_diff(f, p, 1e-7), floor=1e-4) < 1e-5
    c = losses.fuzzy_loss_curvature(np.array([p]), np.array([mu]), r1, r2)[0]
    assert rel_err(c, second_diff(f, p, 1e-4), floor=1e-4) < 1e-4
    d1, d2 = losses.fuzzy_loss_grad_rho(np.array([p]), np.array([mu]), r1, r2)
    assert rel_err(d1, central_diff(lambda q: scalar_fuzzy_term(mu, p, q, r2), r1, 1e-7), floor=1e-4) < 1e-5
    assert rel_err(d2, central_diff(lambda q: scalar_fuzzy_term(mu, p, r1, q), r2, 1e-7), floor=1e-4) < 1e-5


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0.0, 1.0), mu=st.floats(0.0, 1.0), r1=st.floats(0.01, 0.99), r2=st.floats(0.01, 0.99))
def test_rho_gradient_signs(p, mu, r1, r2):
    d1, d2 = losses.fuzzy_loss_grad_rho(np.array([p]), np.array([mu]), r1, r2)
    # raising rho1 never increases the loss; raising rho2 never decreases it while rho1 (1 - p) < 1
    assert d1 <= 0.0
    assert d2 >= 0.0


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(0.0, 1.0), r2=st.floats(0.01, 1.0))
def test_equilibrium_is_stationary_and_minimal(mu, r2):
    p_star = losses.equilibrium_prob(mu, r2)
    if losses.P_MIN < p_star < losses.P_MAX:
        g = losses.fuzzy_loss_grad_p(np.array([p_star]), np.array([mu]), 0.5, r2)[0]
        assert abs(g) < 1e-9 * max(1.0, 1.0 / p_star, 1.0 / (1.0 - p_star))
        for q in (0.5 * p_star, p_star + 0.5 * (1.0 - p_star)):
            assert _one(q, mu, 0.5, r2) >= _one(p_star, mu, 0.5, r2) - 1e-15


def test_equilibrium_with_full_credibility_is_membership():
    mu = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(losses.equilibrium_prob(mu, 1.0), mu)


def test_loss_is_convex_in_p(rng):
    p = rng.uniform(0, 1, size=500)
    mu = rng.uniform(0, 1, size=500)
    assert np.all(losses.fuzzy_loss_curvature(p, mu, 0.3, 0.7) > 0)


def test_ce_curvature_explodes_where_fuzzy_stays_bounded():
    mu, r2 = 0.5, 0.5
    p_star = losses.equilibrium_prob(mu, r2)
    fuzzy = losses.fuzzy_loss_curvature(np.array([p_star]), np.array([mu]), 0.5, r2)[0]
    ce = losses.ce_curvature(np.array([1e-6]), np.array([1.0]))[0]
    assert ce > 1e11 and ce / fuzzy > 1e6


def test_ce_examples():
    loss, _ = losses.ce_loss(np.array([0.5]), np.array([1.0]))
    assert loss == pytest.approx(math.log(2))
    assert losses.ce_grad(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(-2.0)
    assert losses.ce_curvature(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(4.0)
    with pytest.raises(InvalidTarget):
        losses.ce_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    with pytest.raises(InvalidTarget):
        losses.ce_loss(np.array([0.5, 0.5]), np.array([1.0, 1.0]))


def test_degenerates_to_cross_entropy(rng):
    for _ in range(100):
        c = int(rng.integers(2, 5))
        shape = tuple(rng.integers(1, 5, size=3)) + (c,)
        p = losses.softmax(rng.normal(scale=3, size=shape))
        y = np.eye(c)[rng.integers(0, c, size=shape[:-1])]
        fz, fz_vox = losses.fuzzy_loss(p, y, 1.0, 1.0)
        ce, ce_vox = losses.ce_loss(p, y)
        assert abs(fz - ce) <= 1e-12
        np.testing.assert_allclose(fz_vox, ce_vox, rtol=0, atol=1e-12)


def _brute_dice(p, t, smooth=1e-5):
    c = p.shape[-1]
    total = 0.0
    for k in range(1, c):
        a = p[..., k].ravel().tolist()
        b = t[..., k].ravel().tolist()
        num = 2 * sum(x * y for x, y in zip(a, b)) + smooth
        den = sum(x * x for x in a) + sum(y * y for y in b) + smooth
        total += 1 - num / den
    return total / (c - 1)


def test_dice_value_and_gradient(rng):
    for c in (2, 3):
        p = rng.uniform(0.01, 0.99, size=(3, 3, 3, c))
        t = np.eye(c)[rng.integers(0, c, size=(3, 3, 3))]
        loss, g = losses.dice_loss(p, t)
        assert loss == pytest.approx(_brute_dice(p, t), rel=1e-13)
        assert rel_err(g, numeric_gradient(lambda q: _brute_dice(q, t), p), floor=1e-6) < 1e-5


def test_dice_extremes():
    t = np.eye(2)[np.array([0, 1, 1, 0])]
    assert losses.dice_loss(t, t)[0] == pytest.approx(0.0, abs=1e-12)
    disjoint = t[:, ::-1]
    assert losses.dice_loss(disjoint, t)[0] == pytest.approx(1.0 - 1e-5 / (4 + 1e-5), rel=1e-12)


def _brute_total(z, mu, t, raw1, raw2, lam):
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    r1, r2 = 1 / (1 + math.exp(-raw1)), 1 / (1 + math.exp(-raw2))
    fuzzy = 0.0
    for pv, mv in zip(p.reshape(-1), mu.reshape(-1)):
        fuzzy += scalar_fuzzy_term(mv, pv, r1, r2)
    return _brute_dice(p, t) + lam * fuzzy / (p.size // p.shape[-1])


def test_total_gradient_matches_finite_differences(rng):
    z = rng.normal(size=(3, 3, 3, 3))
    mu = rng.dirichlet(np.ones(3), size=(3, 3, 3))
    t = np.eye(3)[rng.integers(0, 3, size=(3, 3, 3))]
    raw = (0.4, -0.7)
    lam = 0.8
    out, g = losses.total_loss(z, mu, t, RhoPair(*raw), lam)
    assert out.total == pytest.approx(_brute_total(z, mu, t, *raw, lam), rel=1e-12)
    assert rel_err(g.d_logits, numeric_gradient(lambda q: _brute_total(q, mu, t, *raw, lam), z), floor=1e-4) < 1e-4
    n1 = central_diff(lambda q: _brute_total(z, mu, t, q, raw[1], lam), raw[0])
    n2 = central_diff(lambda q: _brute_total(z, mu, t, raw[0], q, lam), raw[1])
    assert rel_err(g.d_rho1_raw, n1) < 1e-5 and rel_err(g.d_rho2_raw, n2) < 1e-5
    np.testing.assert_allclose(g.d_logits, g.d_logits_dice + lam * g.d_logits_fuzzy, atol=1e-15)


def test_zero_lambda_is_pure_dice(rng):
    z = rng.normal(size=(2, 2, 2, 2))
    mu = rng.dirichlet(np.ones(2), size=(2, 2, 2))
    t = np.eye(2)[rng.integers(0, 2, size=(2, 2, 2))]
    out, g = losses.total_loss(z, mu, t, RhoPair(0.0, 0.0), 0.0)
    assert out.total == out.dice
    assert g.d_rho1_raw == 0.0 and g.d_rho2_raw == 0.0
    with pytest.raises(InvalidParameter):
        losses.total_loss(z, mu, t, RhoPair(0.0, 0.0), -1.0)


def test_two_class_rho1_gradient_is_constant(rng):
    # for two classes the memberships sum to one, so d/d rho1 = -rho2 / rho1 at every voxel
    mu = rng.dirichlet(np.ones(2), size=(4, 4, 4))
    p = losses.softmax(rng.normal(size=(4, 4, 4, 2)))
    d1, _ = losses.fuzzy_loss_grad_rho(p, mu, 0.4, 0.3)
    assert d1 == pytest.approx(-0.3 / 0.4, rel=1e-14)


def test_rho_pair_parameterization():
    pair = RhoPair.from_values(0.9, 0.5)
    assert pair.rho1_raw == pytest.approx(2.1972245773362196, rel=1e-14)
    assert pair.rho2_raw == 0.0
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InvalidParameter):
            RhoPair.from_values(bad, 0.5)
    assert FixedRho(1.0, 1.0).step(5.0, 5.0, 1.0) == FixedRho(1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(raw=st.floats(-1e6, 1e6))
def test_sigmoid_stays_inside_unit_interval(raw):
    r = RhoPair(raw, -raw)
    assert 0.0 < r.rho1 < 1.0 and 0.0 < r.rho2 < 1.0
