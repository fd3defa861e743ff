import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskalloc.estimators import (CovEstimator, JacEstimator, SingularJacobianError, asymptotic_cov,
                                  ci_half_width, confidence_interval, diagnose_gain, normal_quantile,
                                  update_cov, update_jac)
from riskalloc.loss import LossKind, LossSpec, field
from riskalloc.oracle import ExpGaussModel
from riskalloc.samplers import GaussianSpec, make_rng

EXP = LossSpec(LossKind.EXPONENTIAL, 2, 1.0, 1.0)
PPQ = LossSpec(LossKind.POSPART_QUADRATIC, 2, 1.0)
Z_STAR = np.array([0.5, 0.5, 1.0])


def random_spd(rng, dim):
    m = rng.normal(size=(dim, dim))
    return m @ m.T + 0.1 * np.eye(dim)


class TestCov:
    def test_constant_e1(self):
        est = CovEstimator(3)
        for _ in range(17):
            update_cov(est, [1.0, 0.0, 0.0])
        expected = np.zeros((3, 3))
        expected[0, 0] = 1.0
        np.testing.assert_array_equal(est.sigma, expected)

    def test_streaming_equals_batch(self):
        rng = np.random.default_rng(0)
        hs = rng.normal(size=(5000, 4)) * [1, 10, 0.1, 3]
        s1 = CovEstimator(4)
        for h in hs:
            s1.update(h)
        s2 = CovEstimator(4)
        for block in np.array_split(hs, 7):
            s2.update_many(block)
        batch = hs.T @ hs / len(hs)
        for s in (s1, s2):
            assert np.linalg.norm(s.sigma - batch) <= 1e-12 * np.linalg.norm(batch)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                  elements=st.floats(-1e3, 1e3)))
    def test_symmetric_psd(self, hs):
        est = CovEstimator(3).update_many(hs)
        s = est.sigma
        assert np.array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() >= -1e-10 * max(1.0, np.abs(s).max())

    def test_batched_axis(self):
        rng = np.random.default_rng(1)
        hs = rng.normal(size=(100, 5, 3))
        est = CovEstimator(3, batch_shape=(5,)).update_many(hs)
        single = CovEstimator(3).update_many(hs[:, 2])
        np.testing.assert_allclose(est.sigma[2], single.sigma, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            CovEstimator(2).sigma


class TestJac:
    def test_affine_exact(self):
        """Deep in the negative orthant the quadratic loss is linear, so H is affine in z."""
        rng = np.random.default_rng(2)
        x = rng.uniform(-20, -10, size=(200, 2))
        z = np.c_[rng.uniform(0, 2, size=(200, 2)), rng.uniform(0.5, 2, 200)]
        exact = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [-1.0, -1.0, 0.0]])
        for eps in (1e-3, 0.1, 0.7):
            est = JacEstimator(3, eps).update_many(PPQ, x, z)
            np.testing.assert_allclose(est.jacobian, exact, atol=1e-12)

    def test_streaming_equals_block(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(300, 2))
        z = Z_STAR + 0.1 * rng.normal(size=(300, 3))
        a = JacEstimator(3, 1e-3)
        for xi, zi in zip(x, z):
            update_jac(a, EXP, xi, zi)
        b = JacEstimator(3, 1e-3).update_many(EXP, x, z)
        np.testing.assert_allclose(a.jacobian, b.jacobian, rtol=1e-12, atol=1e-14)

    def test_forward_difference_bias_is_first_order(self):
        x = GaussianSpec(np.eye(2)).sample(make_rng(4), 20_000)
        z = np.broadcast_to(Z_STAR, (len(x), 3))
        a = {e: JacEstimator(3, e).update_many(EXP, x, z).jacobian for e in (0.04, 0.02, 0.01)}
        d1 = np.linalg.norm(a[0.04] - a[0.02])
        d2 = np.linalg.norm(a[0.02] - a[0.01])
        assert 1.6 < d1 / d2 < 2.4

    def test_error_shrinks_with_epsilon_and_n(self):
        analytic = ExpGaussModel(EXP, np.eye(2)).jacobian(Z_STAR)
        errs = []
        for k, (eps, n) in enumerate([(0.2, 5_000), (0.1, 20_000), (0.05, 80_000)]):
            x = GaussianSpec(np.eye(2)).sample(make_rng(50 + k), n)
            a = JacEstimator(3, eps).update_many(EXP, x, np.broadcast_to(Z_STAR, (n, 3))).jacobian
            errs.append(np.linalg.norm(a - analytic))
        assert errs[2] < errs[0]

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            JacEstimator(3, 0.0)


class TestAsymptoticCov:
    def test_identity(self):
        np.testing.assert_array_equal(asymptotic_cov(np.eye(3), np.eye(3)), np.eye(3))

    def test_two_identity(self):
        np.testing.assert_allclose(asymptotic_cov(np.eye(3), 2 * np.eye(3)), np.eye(3) / 4)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.1, 10))
    def test_scaling(self, seed, s):
        rng = np.random.default_rng(seed)
        sigma = random_spd(rng, 3)
        a = -random_spd(rng, 3) + 0.3 * rng.normal(size=(3, 3))
        v = asymptotic_cov(sigma, a)
        np.testing.assert_allclose(asymptotic_cov(sigma, s * a), v / s ** 2, rtol=1e-8, atol=1e-12)

    def test_symmetrized(self):
        rng = np.random.default_rng(5)
        v = asymptotic_cov(random_spd(rng, 4), rng.normal(size=(4, 4)) + 3 * np.eye(4))
        assert np.array_equal(v, v.T)

    def test_near_singular(self):
        a = np.diag([1.0, 1.0, 1e-10])
        with pytest.raises(SingularJacobianError):
            asymptotic_cov(np.eye(3), a)

    def test_stacked(self):
        rng = np.random.default_rng(6)
        sig = np.stack([random_spd(rng, 3) for _ in range(4)])
        a = np.stack([random_spd(rng, 3) for _ in range(4)])
        v = asymptotic_cov(sig, a)
        np.testing.assert_allclose(v[1], asymptotic_cov(sig[1], a[1]), rtol=1e-12)


class TestConfidenceInterval:
    def test_quantile(self):
        q = normal_quantile(0.05)
        assert q == pytest.approx(1.959964, abs=1e-6)
        # erf identity: P(|N| <= q) = erf(q / sqrt 2)
        assert math.erf(q / math.sqrt(2)) == pytest.approx(0.95, abs=1e-14)

    def test_degenerate(self):
        ci = confidence_interval([0.5, 0.4, 1.0], np.zeros((3, 3)), 10 ** 5, 10.0, 0.7, 2.0)
        np.testing.assert_array_equal(ci[:, 0], ci[:, 1])

    def test_printed_formula(self):
        v = np.diag([2.0, 1.0, 0.05])
        ci = confidence_interval([0.5, 0.5, 1.0], v, 10 ** 5, 10.0, 0.7, 2.0, 0.05)
        half = 1.959963984540054 * math.sqrt(2.0 / (10 * 10 ** 3.5))
        assert ci[0, 1] - 0.5 == pytest.approx(half, rel=1e-12)

    def test_step_scaling(self):
        v = np.array([3.0])
        ratio = ci_half_width(v, 1000, 10.0, 0.7, 2.5, "step") / ci_half_width(v, 1000, 10.0, 0.7, 2.5)
        assert ratio[0] == pytest.approx(math.sqrt(2.5))

    def test_negative_diagonal(self):
        with pytest.raises(ValueError):
            confidence_interval([0.0, 0.0], np.diag([1.0, -1e-9]), 100, 1.0, 0.7, 1.0)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            normal_quantile(1.0)


class TestDiagnoseGain:
    def test_minus_identity_pass(self):
        r = diagnose_gain(1.0, -np.eye(3))
        assert r["hurwitz"] and r["passed"] and r["c_minus_p_pd"]
        np.testing.assert_allclose(r["lyapunov_p"], np.eye(3) / 2)

    def test_small_gain_fails(self):
        r = diagnose_gain(0.4, -np.eye(3))
        assert not r["hurwitz"] and not r["passed"]

    def test_symmetric_negative_definite(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = -random_spd(rng, 3)
            c = rng.uniform(0.05, 3)
            r = diagnose_gain(c, a)
            np.testing.assert_allclose(r["lyapunov_p"], -np.linalg.inv(a) / 2, rtol=1e-8, atol=1e-12)
            nd = np.all(np.linalg.eigvalsh(c * a + np.eye(3) / 2) < 0)
            assert r["passed"] == nd

    def test_not_hurwitz_is_finding(self):
        r = diagnose_gain(1.0, np.eye(2))
        assert not r["lyapunov_solved"] and not r["passed"] and "finding" in r

    def test_gain_matrix(self):
        r = diagnose_gain(2 * np.eye(2), -np.eye(2))
        assert r["passed"]


def test_estimators_fed_by_field():
    """Sigma_n at a frozen point equals the sample second moment of H."""
    x = GaussianSpec(np.eye(2)).sample(make_rng(8), 1000)
    h = field(EXP, x, Z_STAR)
    est = CovEstimator(3)
    for hk in h:
        est.update(hk)
    np.testing.assert_allclose(est.sigma, h.T @ h / 1000, rtol=1e-12)
