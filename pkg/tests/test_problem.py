"""Problem construction, derivative validation, and capability probing."""

import dataclasses

import numpy as np
import pytest

import soc_lab as sl

from conftest import build_zero_cost_problem


def test_lq_bundle_passes_validation(lq_problem):
    # The maker already validates; run the public entry point again with a
    # different seed to make sure the bundle holds away from the maker's
    # default probes.
    sl.validate_derivatives(lq_problem, n_probes=16, seed=7)


def test_lq_capability_flags(lq_problem, sg_problem, ou_problem):
    assert lq_problem.diffusion_time_only
    assert lq_problem.control_affine_quadratic
    assert not sg_problem.diffusion_time_only
    assert not sg_problem.control_affine_quadratic
    assert ou_problem.diffusion_time_only
    assert ou_problem.control_affine_quadratic


def test_corrupt_derivative_entry_is_caught(lq_problem):
    """A 1% error in one bundle entry must be named by the validator."""
    bad = dataclasses.replace(
        lq_problem.derivatives,
        d1_drift=lambda x, u, t, _f=lq_problem.derivatives.d1_drift:
            1.01 * _f(x, u, t),
    )
    broken = dataclasses.replace(lq_problem, derivatives=bad)
    with pytest.raises(sl.ValidationError, match="d1_drift"):
        sl.validate_derivatives(broken, n_probes=8)


def test_corrupt_terminal_hessian_is_caught(sg_problem):
    bad = dataclasses.replace(
        sg_problem.derivatives,
        hess_terminal=lambda x: np.full((x.shape[0], 1, 1), 2.5),
    )
    broken = dataclasses.replace(sg_problem, derivatives=bad)
    with pytest.raises(sl.ValidationError, match="hess_terminal"):
        sl.validate_derivatives(broken, n_probes=8)


def test_scalar_lq_matches_matrix_lq():
    scal = sl.make_lq_problem(0.3, 1.0, 0.8, 0.5, 1.0, 1.0)
    mat = sl.make_lq_problem(np.array([[0.3]]), np.array([[1.0]]),
                             np.array([[0.8]]), np.array([[0.5]]),
                             np.array([[1.0]]), 1.0)
    x = np.array([[1.7], [-0.4]])
    u = np.array([[0.2], [0.9]])
    np.testing.assert_array_equal(scal.drift(x, u, 0.3),
                                  mat.drift(x, u, 0.3))
    np.testing.assert_array_equal(scal.running_cost(x, u, 0.3),
                                  mat.running_cost(x, u, 0.3))
    np.testing.assert_array_equal(scal.lq_data.a_mat, mat.lq_data.a_mat)


def test_lq_cost_values(lq_problem):
    x = np.array([[2.0]])
    u = np.array([[3.0]])
    # 0.5*q_run*x^2 + 0.5*|u|^2 with q_run=0.5
    assert lq_problem.running_cost(x, u, 0.0)[0] == pytest.approx(1.0 + 4.5)
    assert lq_problem.terminal_cost(x)[0] == pytest.approx(2.0)


def test_lq_rejects_bad_inputs():
    with pytest.raises(sl.ValidationError):
        sl.make_lq_problem(0.3, 1.0, 0.8, -0.5, 1.0, 1.0)  # q_run not PSD
    with pytest.raises(sl.ValidationError):
        sl.make_lq_problem(0.3, 1.0, 0.8, 0.5, 1.0, horizon=0.0)
    with pytest.raises(sl.ValidationError):
        sl.make_lq_problem(np.eye(2), np.ones((3, 1)), np.eye(2),
                           np.eye(2), np.eye(2), 1.0)  # b_mat row mismatch
    q_asym = np.array([[1.0, 0.3], [0.0, 1.0]])
    with pytest.raises(sl.ValidationError):
        sl.make_lq_problem(np.zeros((2, 2)), np.eye(2), np.eye(2),
                           q_asym, np.eye(2), 1.0)


def test_ou_tilt_parameters(ou_problem):
    assert ou_problem.ou_params.rate == 1.0
    assert ou_problem.ou_params.tilt == 1.0
    # drift -rate*x + sqrt(2 rate) u, noise gain sqrt(2 rate)
    x = np.array([[2.0]])
    u = np.array([[0.5]])
    drift = ou_problem.drift(x, u, 0.0)[0, 0]
    assert drift == pytest.approx(-2.0 + np.sqrt(2.0) * 0.5)
    sig = ou_problem.diffusion(x, u, 0.0)
    assert sig.shape == (1, 1, 1)
    assert sig[0, 0, 0] == pytest.approx(np.sqrt(2.0))
    # terminal cost 0.5 * tilt * x^2
    assert ou_problem.terminal_cost(x)[0] == pytest.approx(2.0)
    with pytest.raises(sl.ValidationError):
        sl.make_ou_tilt_problem(0.0, 1.0, 1.0)
    with pytest.raises(sl.ValidationError):
        sl.make_ou_tilt_problem(1.0, -1.0, 1.0)


def test_initial_sampler_keyed_by_seed_and_path(lq_problem):
    a = lq_problem.sample_initial(11, 4)
    b = lq_problem.sample_initial(11, 4)
    c = lq_problem.sample_initial(11, 5)
    d = lq_problem.sample_initial(12, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_scalar_geometric_coefficients(sg_problem):
    x = np.array([[1.5]])
    u = np.array([[-0.4]])
    assert sg_problem.drift(x, u, 0.2)[0, 0] == pytest.approx(-0.6)
    assert sg_problem.diffusion(x, u, 0.2)[0, 0, 0] == pytest.approx(0.3)
    assert sg_problem.running_cost(x, u, 0.2)[0] == pytest.approx(0.08)
    assert sg_problem.terminal_cost(x)[0] == pytest.approx(0.25)
    assert sg_problem.derivatives.second_order is not None


def test_custom_problem_probes_flags():
    prob = build_zero_cost_problem()
    assert prob.diffusion_time_only
    assert not prob.control_affine_quadratic
    assert prob.lq_data is None


def test_custom_problem_rejects_wrong_derivatives():
    """make_controlled_diffusion_problem validates the supplied bundle."""

    def drift(x, u, t):
        return -x + u

    def diffusion(x, u, t):
        return np.full((x.shape[0], 1, 1), 0.5)

    def running_cost(x, u, t):
        return 0.5 * np.einsum("bk,bk->b", u, u)

    def terminal_cost(x):
        return np.einsum("bi,bi->b", x, x)

    def initial_sampler(seed, path_index):
        return np.zeros(1)

    bundle = sl.DerivativeBundle(
        d1_drift=lambda x, u, t: np.full((x.shape[0], 1, 1), -1.0),
        d2_drift=lambda x, u, t: np.ones((x.shape[0], 1, 1)),
        d1_cost=lambda x, u, t: np.zeros_like(x),
        d2_cost=lambda x, u, t: np.asarray(u),
        grad_terminal=lambda x: x,  # wrong: should be 2x
        hess_terminal=lambda x: np.full((x.shape[0], 1, 1), 2.0),
        dsigma_dx=lambda x, u, t: np.zeros((x.shape[0], 1, 1, 1)),
        dsigma_du=lambda x, u, t: np.zeros((x.shape[0], 1, 1, 1)),
    )
    with pytest.raises(sl.ValidationError, match="grad_terminal"):
        sl.make_controlled_diffusion_problem(
            d=1, k=1, m=1, horizon=1.0, drift=drift, diffusion=diffusion,
            running_cost=running_cost, terminal_cost=terminal_cost,
            initial_sampler=initial_sampler, derivatives=bundle)


def test_custom_problem_rejects_bad_dimensions():
    prob = build_zero_cost_problem()
    with pytest.raises(sl.ValidationError):
        sl.make_controlled_diffusion_problem(
            d=0, k=1, m=1, horizon=1.0, drift=prob.drift,
            diffusion=prob.diffusion, running_cost=prob.running_cost,
            terminal_cost=prob.terminal_cost,
            initial_sampler=prob.initial_sampler,
            derivatives=prob.derivatives)


def test_second_order_none_entries_must_be_zero(lq_2d_problem):
    """Declaring a second derivative as None asserts it vanishes."""
    so = lq_2d_problem.derivatives.second_order
    assert so is not None
    bad_so = dataclasses.replace(
        so,
        cost_hess_xx=None,  # actually Q_run != 0
    )
    bad = dataclasses.replace(lq_2d_problem.derivatives, second_order=bad_so)
    broken = dataclasses.replace(lq_2d_problem, derivatives=bad)
    with pytest.raises(sl.ValidationError, match="cost_hess_xx"):
        sl.validate_derivatives(broken, n_probes=4)


def test_h_term_shapes(lq_problem):
    h = sl.HTerm(
        value=lambda x, t: np.sin(x[:, :1]) + 0.3 * t,
        grad=lambda x, t: np.cos(x)[:, None, :],
    )
    x = np.array([[0.3], [1.1]])
    assert h.value(x, 0.5).shape == (2, 1)
    assert h.grad(x, 0.5).shape == (2, 1, 1)
