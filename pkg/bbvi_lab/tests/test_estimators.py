import unittest

import numpy as np

from bbvi.errors import ContractViolation
from bbvi.estimators import (
    assumption_convexity_stat,
    assumption_smoothness_stat,
    energy_grad,
    expected_smoothness_samples,
    finite_difference,
    fixed_draw_objective,
    per_sample_stl_grads,
    single_sample_grad,
    total_grad_cfe,
    total_grad_stl,
)
from bbvi.family import Conditioner, FamilyConfig, VariationalParams, elbo_grad_closed_form, energy_grad_closed_form, flatten, initial_params
from bbvi.targets import QuadraticTarget, make_conditioned_gaussian, make_logistic_target, optimal_params
from bbvi.utils import clone_stream, make_stream
from tests.helpers import random_params


class TestSingleSampleGradient(unittest.TestCase):
    """Single-sample gradients against central differences of lambda -> l(T_lambda(u))."""

    def _check(self, target, family_kind, conditioner, points, rng):
        config = FamilyConfig(kind=family_kind, dim=target.dim, conditioner=Conditioner(conditioner))
        for _ in range(points):
            params = random_params(config, rng)
            u = rng.standard_normal(config.dim)
            exact = single_sample_grad(params, config, target, u)
            numeric = finite_difference(fixed_draw_objective(config, target, u), flatten(params))
            error = np.linalg.norm(exact - numeric)
            self.assertLessEqual(error, 1e-6 * max(1.0, np.linalg.norm(exact)))

    def test_quadratic_target(self):
        rng = make_stream(21)
        target = make_conditioned_gaussian(3, 5.0, 5.0, rng)
        for conditioner in ("identity", "softplus", "exp"):
            for family_kind in ("cholesky", "meanfield"):
                self._check(target, family_kind, conditioner, 100, rng)

    def test_logistic_target(self):
        rng = make_stream(22)
        target = make_logistic_target(40, 3, 1.0, rng)
        for conditioner in ("identity", "softplus", "exp"):
            self._check(target, "cholesky", conditioner, 100, rng)


class TestEstimatorMeans(unittest.TestCase):

    def setUp(self):
        self.rng = make_stream(31)
        self.target = make_conditioned_gaussian(3, 4.0, 4.0, self.rng)

    def _assert_within_se(self, estimate, expected):
        deviation = np.abs(estimate.mean - expected)
        self.assertTrue(np.all(deviation <= 4 * estimate.standard_error + 1e-12), f"deviation {deviation} vs SE {estimate.standard_error}")

    def test_energy_gradient_is_unbiased(self):
        config = FamilyConfig(dim=3)
        params = random_params(config, self.rng)
        estimate = energy_grad(params, config, self.target, 100_000, self.rng)
        self._assert_within_se(estimate, energy_grad_closed_form(params, config, self.target))

    def test_total_gradients_are_unbiased(self):
        for conditioner in ("identity", "softplus", "exp"):
            config = FamilyConfig(dim=3, conditioner=Conditioner(conditioner))
            params = random_params(config, self.rng)
            expected = elbo_grad_closed_form(params, config, self.target)
            for estimator in (total_grad_cfe, total_grad_stl):
                self._assert_within_se(estimator(params, config, self.target, 100_000, self.rng), expected)

    def test_common_random_numbers(self):
        config = FamilyConfig(dim=3)
        params = random_params(config, self.rng)
        a = energy_grad(params, config, self.target, 10, clone_stream(self.rng))
        b = energy_grad(params, config, self.target, 10, clone_stream(self.rng))
        np.testing.assert_array_equal(a.mean, b.mean)

    def test_single_sample_has_infinite_standard_error(self):
        config = FamilyConfig(dim=3)
        estimate = energy_grad(initial_params(config), config, self.target, 1, self.rng)
        self.assertEqual(estimate.samples_used, 1)
        self.assertTrue(np.all(np.isinf(estimate.standard_error)))
        self.assertTrue(np.isinf(estimate.per_sample_trace_variance))

    def test_sample_count_contract(self):
        config = FamilyConfig(dim=3)
        with self.assertRaises(ContractViolation):
            energy_grad(initial_params(config), config, self.target, 0, self.rng)


class TestStickingTheLanding(unittest.TestCase):

    def test_hand_computed_case(self):
        config = FamilyConfig(dim=1)
        params = VariationalParams(m=[0.0], s=[2.0], L=[])
        grads = per_sample_stl_grads(params, config, QuadraticTarget([[1.0]]), [[1.0]])
        np.testing.assert_allclose(grads[0], [1.5, 1.5])

    def test_zero_variance_at_the_optimum(self):
        rng = make_stream(41)
        target = make_conditioned_gaussian(5, 10.0, 10.0, rng)
        config = FamilyConfig(dim=5)
        params = optimal_params(target, config)
        grads = per_sample_stl_grads(params, config, target, rng.standard_normal((1000, 5)))
        self.assertLessEqual(np.max(np.linalg.norm(grads, axis=1)), 1e-9)
        estimate = total_grad_stl(params, config, target, 100, rng)
        self.assertLessEqual(estimate.per_sample_trace_variance, 1e-18)

    def test_closed_form_entropy_is_stationary_but_noisy_at_the_optimum(self):
        rng = make_stream(42)
        target = make_conditioned_gaussian(5, 10.0, 10.0, rng)
        config = FamilyConfig(dim=5)
        params = optimal_params(target, config)
        cfe = total_grad_cfe(params, config, target, 100_000, rng)
        self.assertTrue(np.all(np.abs(cfe.mean) <= 4 * cfe.standard_error + 1e-12))
        self.assertGreater(cfe.per_sample_trace_variance, 1.0)
        stl = total_grad_stl(params, config, target, 1000, rng)
        self.assertLess(stl.per_sample_trace_variance, 1e-12 * cfe.per_sample_trace_variance)


class TestAssumptionStatistics(unittest.TestCase):

    def test_identity_scale_on_identity_target(self):
        config = FamilyConfig(dim=3)
        stat = assumption_convexity_stat(initial_params(config), config, QuadraticTarget(np.eye(3)), 100_000, make_stream(51))
        self.assertTrue(np.all(np.abs(stat.mean - 1.0) <= 4 * stat.standard_error))

    def test_counterexample_coordinate_is_negative(self):
        target = QuadraticTarget([[1.0, -2.0], [-2.0, 5.0]])
        config = FamilyConfig(dim=2)
        params = VariationalParams(m=np.zeros(2), s=np.ones(2), L=[1.0])
        stat = assumption_convexity_stat(params, config, target, 200_000, make_stream(52))
        self.assertLessEqual(abs(stat.mean[0] + 1.0), 4 * stat.standard_error[0])
        self.assertLessEqual(abs(stat.mean[1] - 5.0), 4 * stat.standard_error[1])

    def test_smoothness_stat_is_exactly_zero_for_identity(self):
        config = FamilyConfig(dim=2)
        stat = assumption_smoothness_stat(initial_params(config), config, QuadraticTarget(np.eye(2)), 10, make_stream(53))
        np.testing.assert_array_equal(stat.mean, np.zeros(2))
        np.testing.assert_array_equal(stat.standard_error, np.zeros(2))

    def test_smoothness_stat_for_softplus(self):
        # With A = I and m = mu, E g_i u_i phi''(s_i) = phi(s_i) phi''(s_i).
        config = FamilyConfig(dim=2, conditioner=Conditioner("softplus"))
        params = VariationalParams(m=np.zeros(2), s=[0.0, 1.2], L=[0.0])
        stat = assumption_smoothness_stat(params, config, QuadraticTarget(np.eye(2)), 200_000, make_stream(54))
        phi = Conditioner("softplus")
        expected = phi.value(params.s) * phi.second_derivative(params.s)
        self.assertTrue(np.all(np.abs(stat.mean - expected) <= 4 * stat.standard_error))


class TestExpectedSmoothnessSamples(unittest.TestCase):

    def test_identical_parameters_give_zero(self):
        rng = make_stream(61)
        target = make_conditioned_gaussian(3, 3.0, 3.0, rng)
        config = FamilyConfig(dim=3)
        params = random_params(config, rng)
        np.testing.assert_array_equal(expected_smoothness_samples(params, params, config, target, 50, rng), np.zeros(50))


class TestFiniteDifference(unittest.TestCase):

    def test_quadratic(self):
        grad = finite_difference(lambda x: float(x @ x), np.array([1.0, -2.0]))
        np.testing.assert_allclose(grad, [2.0, -4.0], atol=1e-8)

    def test_step_contract(self):
        with self.assertRaises(ContractViolation):
            finite_difference(lambda x: 0.0, np.zeros(1), step=0.0)


if __name__ == '__main__':
    unittest.main()
