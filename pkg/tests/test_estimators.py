import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localel.elcore import MomentModel, Sample
from localel.estimators import (
    AllInfeasible,
    NotInvertible,
    SimplexOptions,
    el_global,
    gmm_two_step,
    instrumental_variables,
    least_squares,
    simplex_search,
)
from localel.experiments import LinearDGPConfig, gen_linear, linear_moment_model, linear_sample
from localel.numerics import RngStream


class TestLeastSquares:
    def test_exact_fit(self):
        gen = np.random.Generator(np.random.Philox(key=[1, 0]))
        x = gen.standard_normal((50, 2))
        theta = np.array([1.5, -0.7])
        res = least_squares(x @ theta, x)
        np.testing.assert_allclose(res.theta_hat, theta, atol=1e-12)

    def test_scalar_example(self):
        res = least_squares(np.array([2.0, 4.0]), np.array([[1.0], [2.0]]))
        assert abs(res.theta_hat[0] - 2.0) <= 1e-14

    def test_matches_dense_inversion(self):
        gen = np.random.Generator(np.random.Philox(key=[2, 0]))
        x = gen.standard_normal((80, 3))
        y = gen.standard_normal(80)
        res = least_squares(y, x)
        brute = np.linalg.inv(x.T @ x) @ (x.T @ y)
        np.testing.assert_allclose(res.theta_hat, brute, atol=1e-10)

    def test_residual_orthogonality(self):
        gen = np.random.Generator(np.random.Philox(key=[3, 0]))
        x = gen.standard_normal((60, 2))
        y = gen.standard_normal(60)
        res = least_squares(y, x)
        assert np.abs(x.T @ (y - x @ res.theta_hat)).max() <= 1e-10


class TestInstrumentalVariables:
    def test_z_equals_x_matches_ls(self):
        gen = np.random.Generator(np.random.Philox(key=[4, 0]))
        x = gen.standard_normal((60, 1))
        y = gen.standard_normal(60)
        iv = instrumental_variables(y, x, x)
        ls = least_squares(y, x)
        np.testing.assert_allclose(iv.theta_hat, ls.theta_hat, atol=1e-12)

    def test_exact_model(self):
        gen = np.random.Generator(np.random.Philox(key=[5, 0]))
        z = gen.standard_normal((60, 1)) + 1.0
        x = z + 0.5 * gen.standard_normal((60, 1))
        y = (x @ np.array([2.0]))
        res = instrumental_variables(y, x, z)
        np.testing.assert_allclose(res.theta_hat, [2.0], atol=1e-12)

    def test_moment_equation_residual(self):
        gen = np.random.Generator(np.random.Philox(key=[6, 0]))
        z = gen.standard_normal((100, 1)) + 1.0
        x = z + 0.3 * gen.standard_normal((100, 1))
        y = x[:, 0] * 1.7 + gen.standard_normal(100)
        res = instrumental_variables(y, x, z)
        assert np.abs(z.T @ (y - x @ res.theta_hat)).max() <= 1e-10

    def test_singular_cross_product(self):
        with pytest.raises(NotInvertible):
            instrumental_variables(np.array([1.0, 2.0]),
                                   np.array([[1.0], [1.0]]),
                                   np.array([[0.0], [0.0]]))


class TestSimplexSearch:
    def test_quadratic_bowl(self):
        target = np.array([0.7, -1.2])
        res = simplex_search(lambda x: -float(np.sum((x - target) ** 2)),
                             np.zeros(2), ((-5, 5), (-5, 5)))
        assert res.converged
        np.testing.assert_allclose(res.x, target, atol=1e-6)

    def test_never_returns_barrier_point(self):
        def objective(x):
            if x[0] > 1.0:
                return -np.inf
            return -float((x[0] - 0.8) ** 2)

        res = simplex_search(objective, np.array([0.0]), ((-3.0, 3.0),))
        assert np.isfinite(res.value)
        assert res.x[0] <= 1.0
        assert abs(res.x[0] - 0.8) <= 1e-6

    def test_curved_valley_matches_grid_oracle(self):
        def objective(x):
            return -((1.0 - x[0]) ** 2) - 100.0 * (x[1] - x[0] ** 2) ** 2

        res = simplex_search(objective, np.array([-0.5, 0.5]),
                             ((-2.0, 2.0), (-1.0, 3.0)),
                             SimplexOptions(max_evals=4000))
        xs = np.linspace(-2, 2, 401)
        ys = np.linspace(-1, 3, 401)
        grid_best = max(
            objective(np.array([a, b])) for a in xs for b in ys
        )
        assert res.value >= grid_best - 1e-4

    def test_respects_bounds(self):
        res = simplex_search(lambda x: float(x[0]), np.array([0.5]), ((0.0, 1.0),))
        assert res.x[0] <= 1.0 + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_1d_quadratic_property(self, target, start):
        res = simplex_search(lambda x: -float((x[0] - target) ** 2),
                             np.array([start]), ((-10.0, 10.0),))
        assert abs(res.x[0] - target) <= 1e-5


def linear_fixture(n=400, c=0.0, seed=13):
    config = LinearDGPConfig(n=n, c=c, seed=seed)
    data = gen_linear(config, RngStream(seed, 0))
    return data, linear_moment_model(), linear_sample(data)


class TestElGlobal:
    def test_matches_dense_grid_argmax(self):
        from localel.elcore import log_el

        data, model, sample = linear_fixture()
        res = el_global(model, sample, np.array([2.0]), ((1.0, 3.0),))
        grid = np.linspace(1.5, 2.5, 2001)
        values = [log_el(model, sample, np.array([t])) for t in grid]
        best = grid[int(np.argmax(values))]
        assert abs(res.theta_hat[0] - best) <= (grid[1] - grid[0])

    def test_objective_not_below_start(self):
        from localel.elcore import log_el

        data, model, sample = linear_fixture(seed=14)
        start = np.array([2.1])
        res = el_global(model, sample, start, ((1.0, 3.0),))
        assert res.objective_at_opt >= log_el(model, sample, start) - 1e-12

    def test_flat_objective_stays_near_start(self):
        model = MomentModel(1, 1, evaluate=lambda obs, th: obs[:, :1])
        sample = Sample(np.array([[1.0], [-1.0], [0.5], [-0.5]]))
        res = el_global(model, sample, np.array([0.3]), ((-1.0, 1.0),))
        assert abs(res.theta_hat[0] - 0.3) <= 0.35  # no pull anywhere on a flat surface

    def test_all_infeasible(self):
        model = MomentModel(1, 1, evaluate=lambda obs, th: np.abs(obs[:, :1]) + 1.0)
        sample = Sample(np.array([[1.0], [2.0], [3.0], [4.0]]))
        with pytest.raises(AllInfeasible):
            el_global(model, sample, np.array([0.0]), ((-1.0, 1.0),))

    def test_reports_inner_solution(self):
        data, model, sample = linear_fixture(seed=15)
        res = el_global(model, sample, np.array([2.0]), ((1.0, 3.0),))
        assert res.inner is not None and res.inner.converged


class TestGmmTwoStep:
    def test_exact_moments_recover_truth(self):
        gen = np.random.Generator(np.random.Philox(key=[8, 0]))
        z = 1.0 + 0.2 * gen.standard_normal((300, 1))
        x = z
        y = x[:, 0] * 2.0
        obs = np.column_stack([y, x, z])
        model = linear_moment_model()
        res = gmm_two_step(model, Sample(obs), np.array([1.5]), ((0.0, 4.0),))
        assert abs(res.theta_hat[0] - 2.0) <= 1e-5

    def test_just_identified_equals_iv(self):
        data, model, sample = linear_fixture(seed=16)
        iv = instrumental_variables(data.y, data.x[:, None], data.z[:, None])
        res = gmm_two_step(model, sample, np.array([2.0]), ((0.0, 4.0),))
        assert abs(res.theta_hat[0] - iv.theta_hat[0]) <= 1e-6

    def test_identity_weight_matches_first_step(self):
        data, model, sample = linear_fixture(seed=17)
        free = gmm_two_step(model, sample, np.array([2.0]), ((0.0, 4.0),))
        forced = gmm_two_step(model, sample, np.array([2.0]), ((0.0, 4.0),),
                              weight=np.eye(1))
        assert abs(free.theta_hat[0] - forced.theta_hat[0]) <= 1e-6
