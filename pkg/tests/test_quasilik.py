import math

import numpy as np
import pytest
from scipy import linalg

from conftest import random_dataset
from qpselect.core import Dataset, FixedDispersion, FullModelQMLE, L1Regularized
from qpselect.errors import (
    DimensionMismatchError,
    InsufficientSamplesError,
    NonPositiveDispersionError,
    WrongFamilyError,
)
from qpselect.families import LinearIdentity, NegBinLog, PoissonLog, family_from_name
from qpselect.quasilik import (
    PSI_FLOOR,
    THETA_MAX,
    ExactFitWarning,
    estimate_dispersion,
    estimate_dispersion_detail,
    estimate_nb_theta,
    fit_qmle,
    quasi_eval,
    quasi_loglik,
)
from qpselect.simbench import ScenarioSpec, generate

FAMILIES = [LinearIdentity(), PoissonLog(), NegBinLog(2.0)]


def _fd_gradient(f, beta):
    g = np.empty_like(beta)
    for j in range(len(beta)):
        h = 1e-6 * (1 + abs(beta[j]))
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (f(beta + e) - f(beta - e)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestKernels:
    def test_linear_zero(self):
        d = Dataset.from_arrays([0.0], [[0.0]])
        assert quasi_loglik(d, [0], [0.0], 1.0, LinearIdentity()) == 0.0

    def test_poisson_at_zero_predictor(self):
        d = Dataset.from_arrays([1.0], [[0.0]])
        assert quasi_loglik(d, [0], [0.0], 1.0, PoissonLog()) == -1.0

    def test_poisson_matches_naive_sum(self, rng):
        d = random_dataset(rng, 5, 3, "poisson")
        beta = rng.standard_normal(3) * 0.3
        naive = 0.0
        for i in range(5):
            eta = sum(d.X[i, j] * beta[j] for j in range(3))
            naive += d.y[i] * eta - math.exp(eta)
        assert quasi_loglik(d, [0, 1, 2], beta, 1.0, PoissonLog()) == pytest.approx(naive, rel=1e-12)

    def test_negbin_kernel_is_integral_of_score(self):
        # d/dmu of the kernel must be (y - mu) / V(mu)
        fam = NegBinLog(3.0)
        y, eta = 4.0, 0.7
        h = 1e-6
        dk = (fam.kernel(y, eta + h) - fam.kernel(y, eta - h)) / (2 * h)
        mu = math.exp(eta)
        assert dk == pytest.approx((y - mu) / (mu + mu * mu / 3.0) * mu, rel=1e-8)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.name)
    def test_scale_identity(self, fam, rng):
        d = random_dataset(rng, 20, 4, "poisson")
        beta = 0.2 * rng.standard_normal(4)
        base = quasi_loglik(d, range(4), beta, 1.0, fam)
        for psi in (0.1, 2.5, 40.0):
            assert quasi_loglik(d, range(4), beta, psi, fam) == pytest.approx(base / psi, rel=1e-13)

    def test_dimension_and_dispersion_errors(self):
        d = Dataset.from_arrays([1.0, 2.0], np.ones((2, 2)))
        with pytest.raises(DimensionMismatchError):
            quasi_loglik(d, [0, 1], [1.0], 1.0, LinearIdentity())
        with pytest.raises(NonPositiveDispersionError):
            quasi_loglik(d, [0], [1.0], 0.0, LinearIdentity())

    def test_family_names(self):
        assert isinstance(family_from_name("poisson"), PoissonLog)
        with pytest.raises(ValueError):
            family_from_name("gamma")


class TestDerivatives:
    def test_linear_hessian_is_gram(self, rng):
        d = random_dataset(rng, 15, 3)
        ev = quasi_eval(d, [0, 1, 2], rng.standard_normal(3), 2.0, LinearIdentity())
        np.testing.assert_array_equal(ev.neg_hessian, ev.fisher_neg_hessian)
        np.testing.assert_allclose(ev.neg_hessian, d.X.T @ d.X / 2.0, rtol=1e-14)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.name)
    def test_finite_differences(self, fam, rng):
        for _ in range(100):
            n, k = int(rng.integers(6, 30)), int(rng.integers(1, 5))
            d = random_dataset(rng, n, k, "poisson")
            beta = 0.3 * rng.standard_normal(k)
            psi = float(rng.uniform(0.5, 3.0))
            cols = list(range(k))
            ev = quasi_eval(d, cols, beta, psi, fam)
            assert ev.value == pytest.approx(quasi_loglik(d, cols, beta, psi, fam), rel=1e-14)
            g_fd = _fd_gradient(lambda b: quasi_loglik(d, cols, b, psi, fam), beta)
            assert _rel_err(ev.gradient, g_fd) <= 1e-5
            H_fd = np.empty((k, k))
            for j in range(k):
                h = 1e-6 * (1 + abs(beta[j]))
                e = np.zeros(k)
                e[j] = h
                H_fd[:, j] = -(quasi_eval(d, cols, beta + e, psi, fam).gradient
                               - quasi_eval(d, cols, beta - e, psi, fam).gradient) / (2 * h)
            assert _rel_err(ev.neg_hessian, H_fd) <= 1e-4
            np.testing.assert_allclose(ev.neg_hessian, ev.neg_hessian.T, rtol=1e-12)

    @pytest.mark.parametrize("fam", [LinearIdentity(), PoissonLog()], ids=lambda f: f.name)
    def test_concavity(self, fam, rng):
        for _ in range(1000):
            d = random_dataset(rng, 12, 3, "poisson")
            ev = quasi_eval(d, [0, 1, 2], rng.standard_normal(3), 1.0, fam)
            linalg.cholesky(ev.neg_hessian)
            np.testing.assert_allclose(fam.concavity_defect(rng.standard_normal(5)), 0.0, atol=1e-12)

    def test_negbin_flags_non_concavity(self):
        fam = NegBinLog(2.0)
        assert not fam.globally_concave
        assert np.max(np.abs(fam.concavity_defect(np.linspace(-2, 2, 9)))) > 1e-3

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.name)
    def test_fisher_positive_definite(self, fam, rng):
        for _ in range(200):
            d = random_dataset(rng, 12, 3, "poisson")
            ev = quasi_eval(d, [0, 1, 2], 2 * rng.standard_normal(3), 1.0, fam)
            linalg.cholesky(ev.fisher_neg_hessian)


class TestDispersion:
    def test_intercept_only_example(self):
        d = Dataset.from_arrays([1.0, 2.0, 3.0], np.ones((3, 1)))
        est = estimate_dispersion_detail(d, LinearIdentity())
        assert est.beta[0] == pytest.approx(2.0)
        assert est.psi == pytest.approx(1.0)

    def test_exact_fit_clamped(self):
        d = Dataset.from_arrays([1.0, 2.0, 3.0], np.column_stack([np.ones(3), [0.0, 1.0, 2.0]]))
        with pytest.warns(ExactFitWarning):
            est = estimate_dispersion_detail(d, LinearIdentity())
        assert est.psi == PSI_FLOOR and est.exact_fit

    def test_fixed_value(self):
        d = Dataset.from_arrays([1.0, 2.0], np.ones((2, 1)))
        assert estimate_dispersion(d, LinearIdentity(), FixedDispersion(3.5)) == 3.5

    def test_insufficient_samples(self):
        d = Dataset.from_arrays([1.0, 2.0], np.eye(2))
        with pytest.raises(InsufficientSamplesError):
            estimate_dispersion(d, LinearIdentity(), FullModelQMLE())

    def test_count_generator_recovers_psi(self):
        small = [estimate_dispersion(generate(ScenarioSpec("counts", 50, s)), PoissonLog()) for s in range(20)]
        # n - p = 30 residual degrees of freedom, so single estimates are noisy
        assert np.mean([2.0 <= v <= 12.0 for v in small]) >= 0.9
        big = [estimate_dispersion(generate(ScenarioSpec("counts", 2000, s)), PoissonLog()) for s in range(5)]
        assert np.mean(np.abs(np.array(big) - 5.5)) < np.mean(np.abs(np.array(small) - 5.5))
        assert abs(np.mean(big) - 5.5) < 0.5

    def test_lasso_dispersion_linear(self, rng):
        n, p = 200, 10
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        y = X[:, :3] @ np.array([1.0, 2.0, -1.0]) + 0.5 * rng.standard_normal(n)
        d = Dataset.from_arrays(y, X)
        est = estimate_dispersion_detail(d, LinearIdentity(), L1Regularized(), forced=(0,), seed=1)
        assert est.psi == pytest.approx(0.25, rel=0.3)
        assert est.dof >= n - p

    def test_lasso_rejects_negbin(self, rng):
        d = random_dataset(rng, 30, 3, "poisson")
        with pytest.raises(WrongFamilyError):
            estimate_dispersion(d, NegBinLog(2.0), L1Regularized())


class TestNegBinTheta:
    def test_equidispersed_hits_cap(self, rng):
        n = 5000
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = rng.poisson(np.exp(1.0 + 0.3 * X[:, 1])).astype(float)
        # equidispersed data: the Pearson statistic sits near n - p, so the root
        # is either the cap or very large
        theta = estimate_nb_theta(Dataset.from_arrays(y, X))
        assert theta == THETA_MAX or theta > 50

    def test_underdispersed_hits_cap(self, rng):
        n = 500
        X = np.ones((n, 1))
        y = rng.binomial(10, 0.5, n).astype(float)
        assert estimate_nb_theta(Dataset.from_arrays(y, X)) == THETA_MAX

    def test_recovers_theta_five(self, rng):
        n, theta = 2000, 5.0
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        mu = np.exp(1.5 + 0.4 * X[:, 1])
        y = rng.negative_binomial(theta, theta / (theta + mu)).astype(float)
        assert 3.0 <= estimate_nb_theta(Dataset.from_arrays(y, X)) <= 8.0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamplesError):
            estimate_nb_theta(Dataset.from_arrays([1.0, 2.0], np.eye(2)))


class TestQmle:
    def test_poisson_score_zero_at_optimum(self, rng):
        d = random_dataset(rng, 80, 4, "poisson")
        res = fit_qmle(d, range(4), PoissonLog())
        ev = quasi_eval(d, range(4), res.beta, 1.0, PoissonLog())
        assert np.max(np.abs(ev.gradient)) < 1e-6

    def test_linear_matches_least_squares(self, rng):
        d = random_dataset(rng, 40, 3)
        res = fit_qmle(d, range(3), LinearIdentity())
        np.testing.assert_allclose(res.beta, np.linalg.lstsq(d.X, d.y, rcond=None)[0], rtol=1e-9)

    def test_negbin_converges_from_far_start(self, rng):
        n = 300
        X = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
        mu = np.exp(4.5 + X[:, 1:] @ np.array([0.5, -0.3, 0.0]))
        y = rng.negative_binomial(5.0, 5.0 / (5.0 + mu)).astype(float)
        res = fit_qmle(Dataset.from_arrays(y, X), range(4), NegBinLog(5.0))
        assert res.converged and res.iterations < 40
