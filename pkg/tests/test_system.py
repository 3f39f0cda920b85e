import dataclasses

import numpy as np
import pytest

from hjbk.errors import InputError, NumericalError
from hjbk.system import (
    SystemModel,
    builtin,
    builtin_1d,
    builtin_2d,
    builtin_linear,
    builtin_vdp,
    check_model,
    exact_hjb_residual,
    feedback_from_gradient,
    linearize,
    quadratic_cost,
    with_control_weight,
)


def grid(domain, per_axis=50):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in domain]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(domain))


class TestBuiltin1D:
    def test_value(self):
        assert builtin_1d().exact_value(np.array([1.0])) == pytest.approx(1.25)

    def test_cost_vanishes_at_origin(self):
        assert builtin_1d().cost(np.zeros(1)) == 0.0

    def test_hjb_residual_at_point(self):
        assert abs(exact_hjb_residual(builtin_1d(), np.array([0.7]))) < 1e-12

    def test_linearization(self):
        L = linearize(builtin_1d())
        assert L.A[0, 0] == 1.0 and L.B[0, 0] == 1.0

    def test_exact_cost_is_negative_away_from_origin(self):
        # q = V*'^2/2 - V*' f works out to -x^4 - x^6/2
        m = builtin_1d()
        x = np.linspace(-1.5, 1.5, 101)[:, None]
        np.testing.assert_allclose(m.cost(x), -(x[:, 0] ** 4) - 0.5 * x[:, 0] ** 6, atol=1e-12)
        assert check_model(m, rng=0)


class TestBuiltin2D:
    def test_exact_control(self):
        np.testing.assert_allclose(builtin_2d().exact_control(np.array([1.0, 0.0])), [-3.0, 0.0])

    def test_control_matches_gradient_feedback(self, rng):
        m = builtin_2d()
        X = rng.uniform(-1.5, 1.5, (20, 2))
        np.testing.assert_allclose(m.exact_control(X), feedback_from_gradient(m, X, m.exact_gradient(X)),
                                   atol=1e-13)

    def test_value_at_origin(self):
        assert builtin_2d().exact_value(np.zeros(2)) == 0.0

    def test_hjb_residual_at_point(self):
        assert abs(exact_hjb_residual(builtin_2d(), np.array([0.5, -0.5]))) < 1e-12

    def test_linearization(self):
        L = linearize(builtin_2d())
        np.testing.assert_array_equal(L.A, np.eye(2))
        np.testing.assert_array_equal(L.B, np.eye(2))


class TestVanDerPol:
    def test_equilibrium(self):
        np.testing.assert_array_equal(builtin_vdp().drift(np.zeros(2)), [0.0, 0.0])

    def test_drift_at_one_one(self):
        np.testing.assert_allclose(builtin_vdp(1.0).drift(np.array([1.0, 1.0])), [1.0, -1.0])

    def test_linearization(self):
        L = linearize(builtin_vdp())
        np.testing.assert_array_equal(L.A, [[0.0, 1.0], [-1.0, 1.0]])
        np.testing.assert_array_equal(L.B, [[0.0], [1.0]])
        np.testing.assert_array_equal(L.Q, 2 * np.eye(2))

    def test_mu_must_be_positive(self):
        with pytest.raises(InputError):
            builtin_vdp(0.0)

    def test_no_exact_solution(self):
        assert not builtin_vdp().has_exact


class TestProperties:
    @pytest.mark.parametrize("factory", [builtin_1d, builtin_2d])
    def test_exact_hjb_residual_on_grid(self, factory):
        m = factory()
        assert np.abs(exact_hjb_residual(m, grid(m.domain))).max() < 1e-10

    @pytest.mark.parametrize("factory", [builtin_1d, builtin_2d, builtin_vdp])
    def test_finite_difference_linearization_matches_analytic(self, factory):
        m = factory()
        La, Lf = linearize(m), linearize(m, analytic=False)
        np.testing.assert_allclose(Lf.A, La.A, atol=1e-6)
        np.testing.assert_allclose(Lf.B, La.B, atol=1e-6)
        np.testing.assert_allclose(Lf.Q, La.Q, atol=1e-6)

    @pytest.mark.parametrize("name", ["poly1d", "radial2d"])
    def test_design_cost_is_nonnegative(self, name):
        m = builtin(name)
        m = quadratic_cost(m, 2 * np.eye(m.n))
        assert m.cost(grid(m.domain)).min() >= 0
        assert check_model(m, rng=0) == []

    def test_vanderpol_cost_is_nonnegative(self):
        m = builtin_vdp()
        assert m.cost(grid(m.domain)).min() >= 0

    def test_design_cost_keeps_reference_solution(self):
        m = quadratic_cost(builtin_1d(), [[2.0]])
        assert m.has_exact
        assert linearize(m).Q[0, 0] == 2.0


class TestValidation:
    def test_bad_control_weight(self):
        with pytest.raises(InputError):
            with_control_weight(builtin_1d(), [[-1.0]])

    def test_nonequilibrium_rejected(self):
        m = dataclasses.replace(builtin_1d(), f=lambda X: X + 1.0)
        with pytest.raises(InputError):
            check_model(m)

    def test_cost_offset_rejected(self):
        m = dataclasses.replace(builtin_1d(), q=lambda X: X[..., 0] ** 2 + 1.0)
        with pytest.raises(InputError):
            check_model(m)

    def test_asymmetric_cost_hessian(self):
        # the four-point mixed stencil is symmetric by construction, so only a supplied Hessian can trip this
        m = dataclasses.replace(builtin_linear(-np.eye(2), np.eye(2)),
                                cost_hessian=lambda x: np.array([[1.0, 0.0], [1e-3, 1.0]]))
        with pytest.raises(NumericalError):
            linearize(m)

    def test_numerical_hessian_of_mixed_term(self):
        m = dataclasses.replace(builtin_linear(-np.eye(2), np.eye(2)),
                                q=lambda X: X[..., 0] ** 2 + 3 * X[..., 0] * X[..., 1] + X[..., 1] ** 4,
                                cost_hessian=None)
        with pytest.warns(UserWarning, match="not positive semidefinite"):
            L = linearize(m)
        np.testing.assert_allclose(L.Q, [[2.0, 3.0], [3.0, 0.0]], atol=1e-6)

    def test_empty_domain_side(self):
        with pytest.raises(InputError):
            SystemModel("bad", 1, 1, lambda X: X, lambda X: X[..., None], lambda X: X[..., 0] ** 2,
                        np.eye(1), [[1.0, 1.0]])

    def test_unknown_builtin(self):
        with pytest.raises(InputError):
            builtin("lorenz")

    def test_wrong_state_dimension(self):
        with pytest.raises(InputError):
            builtin_2d().drift(np.zeros(3))

    def test_per_point_callables(self):
        m = SystemModel("loop", 1, 1, lambda x: -x, lambda x: np.ones((1, 1)), lambda x: float(x @ x),
                        np.eye(1), [[-1.0, 1.0]], vectorized=False)
        X = np.array([[0.5], [-0.25]])
        np.testing.assert_allclose(m.drift(X), -X)
        np.testing.assert_allclose(m.cost(X), [0.25, 0.0625])
