import numpy as np
import pytest

from apmefem.exact import (
    AnisotropicExact,
    BarenblattParams,
    InvalidTimeError,
    StencilOutsideSupportError,
    pde_residual,
    pme_initial,
    pme_solution,
    residual_check,
)

EX1_D = np.array([[5.5, 4.5], [4.5, 5.5]])


@pytest.fixture
def params():
    return BarenblattParams(m=1.0, r0=0.5)


@pytest.fixture
def ex1(params):
    return AnisotropicExact(params, EX1_D)


class TestParams:
    def test_paper_start_time(self, params):
        # m=1, d=2: beta = 1/4, t0 = beta*m*r0^2/2
        assert params.beta == pytest.approx(0.25)
        assert params.t0 == pytest.approx(0.03125)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            BarenblattParams(m=0.5, r0=0.5)
        with pytest.raises(ValueError):
            BarenblattParams(m=1.0, r0=0.0)

    def test_time_before_start(self, params):
        with pytest.raises(InvalidTimeError):
            pme_solution(params, np.zeros(2), 0.5 * params.t0)


class TestPmeSolution:
    def test_center_at_start(self, params):
        assert pme_solution(params, np.zeros(2), params.t0) == pytest.approx(1.0)

    def test_center_at_16_t0(self, params):
        # kappa = 16^(1/4) = 2, u = kappa^-2 = 1/4
        assert pme_solution(params, np.zeros(2), 16 * params.t0) == pytest.approx(0.25)

    def test_initial_profile(self, params):
        assert pme_initial(params, np.zeros(2)) == pytest.approx(1.0)
        assert pme_initial(params, np.array([0.5, 0.0])) == 0.0
        assert pme_initial(params, np.array([0.7, 0.1])) == 0.0

    def test_solution_matches_initial_at_t0(self, params):
        pts = np.random.default_rng(0).uniform(-1, 1, size=(64, 2))
        np.testing.assert_allclose(
            pme_solution(params, pts, params.t0), pme_initial(params, pts), atol=1e-14
        )


class TestAnisotropic:
    def test_identity_reduces_to_pme(self, params):
        e = AnisotropicExact(params, np.eye(2))
        pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
        for t in (params.t0, 2 * params.t0, 5 * params.t0):
            np.testing.assert_allclose(
                e.solution(pts, t), pme_solution(params, pts, t), atol=1e-14
            )

    def test_cached_inverses(self, ex1):
        np.testing.assert_allclose(ex1.D_inv @ EX1_D, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(ex1.D_inv_sqrt @ ex1.D_inv_sqrt, ex1.D_inv, atol=1e-12)

    def test_change_of_variables_identity(self, ex1, params):
        # anisotropic value at x equals isotropic value at D^(-1/2) x
        pts = np.random.default_rng(2).uniform(-2, 2, size=(100, 2))
        t = 3 * params.t0
        mapped = pts @ ex1.D_inv_sqrt.T
        np.testing.assert_allclose(
            ex1.solution(pts, t), pme_solution(params, mapped, t), atol=1e-12
        )

    def test_support_is_ellipse_with_axis_ratio_sqrt10(self, ex1, params):
        # D has eigenvalues 10 and 1: semi-axes r0*kappa*sqrt(eig)
        t = 2 * params.t0
        kappa = params.kappa(t)
        w, v = np.linalg.eigh(EX1_D)
        for eig, vec in zip(w, v.T):
            x_edge = vec * params.r0 * kappa * np.sqrt(eig)
            assert ex1.solution(x_edge * 0.999, t) > 0
            assert ex1.solution(x_edge * 1.001, t) == 0
        assert np.sqrt(w[1] / w[0]) == pytest.approx(np.sqrt(10))

    def test_center_value_independent_of_D(self, ex1, params):
        t = 7 * params.t0
        kappa = params.kappa(t)
        assert ex1.solution(np.zeros(2), t) == pytest.approx(kappa ** -2)

    def test_initial_value_quarter_radius(self, params):
        e = AnisotropicExact(params, np.eye(2))
        assert e.initial(np.array([0.25, 0.0])) == pytest.approx(0.75)

    def test_rejects_non_spd(self, params):
        with pytest.raises(ValueError):
            AnisotropicExact(params, np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            AnisotropicExact(params, np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_mass_conserved_between_t0_and_4t0(self, ex1, params):
        # high-order quadrature over the support ellipse via mapped polar grid
        def mass(t):
            kappa = params.kappa(t)
            r_edge = params.r0 * kappa
            nr, na = 400, 128
            r = (np.arange(nr) + 0.5) / nr * r_edge
            a = (np.arange(na) + 0.5) / na * 2 * np.pi
            R, A = np.meshgrid(r, a)
            ypts = np.stack([R * np.cos(A), R * np.sin(A)], axis=-1)
            w_sqrt = np.linalg.cholesky(EX1_D)
            xpts = ypts @ w_sqrt.T
            vals = ex1.solution(xpts, t)
            dA = (r_edge / nr) * (2 * np.pi / na) * R * np.sqrt(np.linalg.det(EX1_D))
            return float((vals * dA).sum())

        m0 = mass(params.t0)
        m4 = mass(4 * params.t0)
        assert abs(m4 - m0) / m0 < 1e-6


class TestResidualOracle:
    def test_residual_small_at_h_1e3(self, params):
        e = AnisotropicExact(params, np.eye(2))
        r = residual_check(e, np.zeros(2), 2 * params.t0, h=1e-3)
        assert r < 1e-4

    def test_richardson_order_two(self, ex1, params):
        x = np.array([0.1, 0.05])
        t = 2 * params.t0
        r1 = residual_check(ex1, x, t, h=1e-3)
        r2 = residual_check(ex1, x, t, h=5e-4)
        assert r1 / r2 == pytest.approx(4.0, rel=0.2)

    def test_constant_field_zero_residual(self, params):
        const = lambda pts, t: np.full(np.asarray(pts).shape[:-1], 3.7)
        r = pde_residual(const, EX1_D, params.m, np.zeros(2), 2 * params.t0, 1e-3)
        assert r == 0.0

    def test_perturbed_solution_flags(self, ex1, params):
        x = np.array([0.1, 0.05])
        t = 2 * params.t0
        clean = residual_check(ex1, x, t, h=1e-3)
        pert = pde_residual(
            lambda pts, tt: 1.01 * ex1.solution(pts, tt), EX1_D, 1.0, x, t, 1e-3
        )
        assert pert > 10 * clean

    def test_stencil_outside_support(self, ex1, params):
        kappa = params.kappa(params.t0)
        edge = np.array([params.r0 * kappa * np.sqrt(10), 0.0]) / np.sqrt(2)
        with pytest.raises(StencilOutsideSupportError):
            residual_check(ex1, edge * 1.2, params.t0, h=1e-2)
