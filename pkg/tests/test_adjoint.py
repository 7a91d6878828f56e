"""Backward adjoint solvers against independent references.

The strongest checks here are exact identities: the first-order adjoint is
the transpose of the forward scheme's linearization, so its a_0 must equal
a forward-mode chain-rule gradient (built locally in this file) to float
precision, with no discretization tolerance involved.  Finite-difference
comparisons then confirm the same thing against code that knows nothing
about adjoints.
"""

import numpy as np
import pytest

import soc_lab as sl

from conftest import make_mild_feedback


def _total_step_pieces(problem, control, x, u, t):
    """Total-derivative coefficients of one forward step, batch of one."""
    bundle = problem.derivatives
    du_dx = np.asarray(control.state_jacobian(x, t), dtype=np.float64)
    jac = bundle.d1_drift(x, u, t) + np.einsum(
        "bic,bcp->bip", bundle.d2_drift(x, u, t), du_dx)
    g = bundle.dsigma_dx(x, u, t) + np.einsum(
        "bjic,bcp->bjip", bundle.dsigma_du(x, u, t), du_dx)
    grad_f = bundle.d1_cost(x, u, t) + np.einsum(
        "bcp,bc->bp", du_dx, bundle.d2_cost(x, u, t))
    return jac[0], g[0], grad_f[0]


def forward_chain_gradient(problem, control, traj, start=0, h_term=None):
    """d(pathwise cost from node `start`)/dX_start by forward accumulation.

    Propagates sensitivity matrices S_i = dX_i/dX_start through the exact
    per-step linearization (drift, diffusion and control feedback, with
    the realized Brownian increments) and accumulates the cost gradient.
    Shares no code with the backward solvers.
    """
    grid = traj.grid
    n, dt = grid.n_steps, grid.dt
    d = problem.d
    s_mat = np.eye(d)
    grad = np.zeros(d)
    for i in range(start, n):
        x = traj.states[None, i]
        u = traj.controls[None, i]
        t = float(grid.nodes[i])
        jac, g, grad_f = _total_step_pieces(problem, control, x, u, t)
        grad += dt * grad_f @ s_mat
        if h_term is not None:
            dh = np.asarray(h_term.grad(x, t), dtype=np.float64)[0]
            grad += (traj.noise.increments[i] @ dh) @ s_mat
        step_jac = np.eye(d) + dt * jac + np.einsum(
            "j,jip->ip", traj.noise.increments[i], g)
        s_mat = step_jac @ s_mat
    term = problem.derivatives.grad_terminal(traj.states[None, n])[0]
    return grad + term @ s_mat


# ---------------------------------------------------------------------------
# anchors and degenerate cases


def test_terminal_anchors(sg_problem, sg_control, grid):
    batch = sl.simulate_batch(sg_problem, sg_control, grid, 0, 3)
    lean = sl.solve_lean_adjoint(sg_problem, sg_control, batch)
    full = sl.solve_first_order_adjoint(sg_problem, sg_control, batch)
    second = sl.solve_second_order_adjoint(sg_problem, sg_control, batch,
                                           full)
    want = sg_problem.derivatives.grad_terminal(batch.states[:, -1])
    np.testing.assert_array_equal(lean.values[:, -1], want)
    np.testing.assert_array_equal(full.values[:, -1], want)
    np.testing.assert_array_equal(
        second.values[:, -1],
        sg_problem.derivatives.hess_terminal(batch.states[:, -1]))
    assert lean.values.shape == (3, grid.n_steps + 1, 1)
    assert second.values.shape == (3, grid.n_steps + 1, 1, 1)
    assert lean.kind == "lean" and full.kind == "full"


def test_zero_cost_problem_has_zero_adjoints(zero_cost_problem, grid):
    ctrl = make_mild_feedback(1, 1, 1.0)
    batch = sl.simulate_batch(zero_cost_problem, ctrl, grid, 1, 4)
    lean = sl.solve_lean_adjoint(zero_cost_problem, ctrl, batch)
    full = sl.solve_first_order_adjoint(zero_cost_problem, ctrl, batch)
    second = sl.solve_second_order_adjoint(zero_cost_problem, ctrl, batch,
                                           full)
    np.testing.assert_array_equal(lean.values, 0.0)
    np.testing.assert_array_equal(full.values, 0.0)
    np.testing.assert_array_equal(second.values, 0.0)
    np.testing.assert_array_equal(batch.pathwise_costs, 0.0)


def test_lean_adjoint_closed_form_without_running_cost():
    """With q_run = 0 the lean recursion telescopes to (1+dt a)^(N-i) a_N."""
    prob = sl.make_lq_problem(0.3, 1.0, 0.8, 0.0, 1.0, 1.0)
    ctrl = make_mild_feedback(1, 1, 1.0)
    grid = sl.TimeGrid(128, 1.0)
    batch = sl.simulate_batch(prob, ctrl, grid, 11, 4)
    lean = sl.solve_lean_adjoint(prob, ctrl, batch)
    n = grid.n_steps
    x_n = batch.states[:, -1, 0]
    for i in (0, n // 3, n - 1, n):
        want = (1.0 + grid.dt * 0.3) ** (n - i) * x_n
        np.testing.assert_allclose(lean.values[:, i, 0], want, rtol=1e-12)


def test_lean_equals_frozen_full_on_time_only_noise(lq_problem, lq_control,
                                                    grid):
    """With sigma(t) noise and a frozen control the two recursions coincide
    term by term, so the arrays must match bitwise."""
    batch = sl.simulate_batch(lq_problem, lq_control, grid, 3, 8)
    lean = sl.solve_lean_adjoint(lq_problem, lq_control, batch)
    frozen = sl.freeze_control(lq_control)
    full = sl.solve_first_order_adjoint(lq_problem, frozen, batch)
    np.testing.assert_array_equal(lean.values, full.values)


def test_frozen_control_wrapper(lq_control):
    frozen = sl.freeze_control(lq_control)
    x = np.array([[1.3], [-0.2]])
    np.testing.assert_array_equal(frozen.evaluate(x, 0.2),
                                  lq_control.evaluate(x, 0.2))
    np.testing.assert_array_equal(frozen.state_jacobian(x, 0.2), 0.0)
    du_dtheta, du_dx = frozen.jacobians(x, 0.2)
    np.testing.assert_array_equal(du_dx, 0.0)
    np.testing.assert_array_equal(du_dtheta,
                                  lq_control.jacobians(x, 0.2)[0])


# ---------------------------------------------------------------------------
# the transpose identity, exactly and against finite differences


@pytest.mark.parametrize("fixture", ["sg", "lq"])
def test_full_adjoint_equals_forward_chain_rule(request, fixture):
    """a_i must equal the forward-accumulated gradient to float precision."""
    problem = request.getfixturevalue(f"{fixture}_problem")
    control = request.getfixturevalue(f"{fixture}_control")
    grid = sl.TimeGrid(60, 1.0)
    batch = sl.simulate_batch(problem, control, grid, 21, 3)
    full = sl.solve_first_order_adjoint(problem, control, batch)
    for p in range(3):
        traj = batch[p]
        for start in (0, grid.n_steps // 2):
            want = forward_chain_gradient(problem, control, traj,
                                          start=start)
            np.testing.assert_allclose(full.values[p, start], want,
                                       rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("fixture", ["sg", "lq"])
def test_full_adjoint_matches_fd_gradient(request, fixture):
    """a_0 vs central finite differences of the simulated cost itself."""
    problem = request.getfixturevalue(f"{fixture}_problem")
    control = request.getfixturevalue(f"{fixture}_control")
    grid = sl.TimeGrid(500, 1.0)
    batch = sl.simulate_batch(problem, control, grid, 7, 4)
    full = sl.solve_first_order_adjoint(problem, control, batch)
    for p in range(4):
        traj = batch[p]
        fd = sl.fd_pathwise_gradient(problem, control, grid, traj.noise,
                                     traj.x0)
        gap = np.max(np.abs(full.values[p, 0] - fd))
        assert gap <= 1e-6, f"path {p}: |a_0 - fd| = {gap}"


def test_h_term_coupled_adjoint_matches_fd(sg_problem, sg_control):
    """The noise-coupled running term enters at the left endpoint."""
    h = sl.HTerm(
        value=lambda x, t: np.sin(x[:, :1]) + 0.3 * t,
        grad=lambda x, t: np.cos(x)[:, None, :],
    )
    grid = sl.TimeGrid(400, 1.0)
    batch = sl.simulate_batch(sg_problem, sg_control, grid, 13, 3)
    full = sl.solve_first_order_adjoint(sg_problem, sg_control, batch,
                                        h_term=h)
    assert full.kind == "full_with_h"
    for p in range(3):
        traj = batch[p]
        fd = sl.fd_pathwise_gradient(sg_problem, sg_control, grid,
                                     traj.noise, traj.x0, h_term=h)
        assert np.max(np.abs(full.values[p, 0] - fd)) <= 1e-6
        want = forward_chain_gradient(sg_problem, sg_control, traj,
                                      h_term=h)
        np.testing.assert_allclose(full.values[p, 0], want, rtol=1e-11)


def test_h_term_without_grad_is_rejected(sg_problem, sg_control, grid):
    batch = sl.simulate_batch(sg_problem, sg_control, grid, 0, 1)
    h = sl.HTerm(value=lambda x, t: x[:, :1])
    with pytest.raises(sl.ValidationError):
        sl.solve_first_order_adjoint(sg_problem, sg_control, batch, h_term=h)


# ---------------------------------------------------------------------------
# second order


def test_second_order_matches_fd_hessian(sg_problem, sg_control):
    grid = sl.TimeGrid(400, 1.0)
    batch = sl.simulate_batch(sg_problem, sg_control, grid, 5, 2)
    full = sl.solve_first_order_adjoint(sg_problem, sg_control, batch)
    second = sl.solve_second_order_adjoint(sg_problem, sg_control, batch,
                                           full)
    for p in range(2):
        traj = batch[p]
        fd = sl.fd_pathwise_hessian(sg_problem, sg_control, grid,
                                    traj.noise, traj.x0)
        gap = np.max(np.abs(second.values[p, 0] - fd))
        # the quadratic-increment martingale term is replaced by its
        # conditional mean, so this identity is O(sqrt(dt)), not exact
        assert gap <= 1e-2, f"path {p}: |A_0 - fd| = {gap}"


def test_second_order_is_deterministic_on_lq(lq_problem, lq_control, grid):
    """Linear dynamics + sigma(t) kill every stochastic term in the matrix
    recursion, so A is path-independent and solves a discrete Lyapunov
    recursion that a five-line loop can reproduce."""
    batch = sl.simulate_batch(lq_problem, lq_control, grid, 9, 4)
    full = sl.solve_first_order_adjoint(lq_problem, lq_control, batch)
    second = sl.solve_second_order_adjoint(lq_problem, lq_control, batch,
                                           full)
    for p in range(1, 4):
        np.testing.assert_array_equal(second.values[p], second.values[0])
    jac = 0.3 + 1.0 * (-0.4)          # a + b K
    hess = 0.5 + (-0.4) * (-0.4)      # q_run + K' f_uu K
    a_val = 1.0                       # q_term
    np.testing.assert_allclose(second.values[0, -1, 0, 0], a_val)
    for i in range(grid.n_steps - 1, -1, -1):
        a_val = a_val + grid.dt * (2.0 * jac * a_val + hess)
        np.testing.assert_allclose(second.values[0, i, 0, 0], a_val,
                                   rtol=1e-12)


def test_second_order_requires_bundle(lq_problem, lq_control, grid):
    import dataclasses
    stripped = dataclasses.replace(
        lq_problem,
        derivatives=dataclasses.replace(lq_problem.derivatives,
                                        second_order=None))
    batch = sl.simulate_batch(stripped, lq_control, grid, 0, 1)
    full = sl.solve_first_order_adjoint(stripped, lq_control, batch)
    with pytest.raises(sl.UnsupportedProblemError):
        sl.solve_second_order_adjoint(stripped, lq_control, batch, full)


# ---------------------------------------------------------------------------
# propagators and the reconstruction identity


def test_propagator_terminal_identity_and_exponential(zero_cost_problem):
    """For the constant Jacobian 0.5 the flow product converges to e^0.5."""
    ctrl = make_mild_feedback(1, 1, 1.0, scale=0.2, offset=0.0)
    grid = sl.TimeGrid(4000, 1.0)
    batch = sl.simulate_batch(zero_cost_problem, ctrl, grid, 0, 1)
    props = sl.fundamental_matrix(zero_cost_problem, ctrl, batch)
    np.testing.assert_array_equal(props.matrices[:, -1], np.eye(1)[None])
    assert props.matrices[0, 0, 0, 0] == pytest.approx(np.exp(0.5),
                                                       abs=1e-3)
    # interior node: Phi_i ~ exp(0.5 * (T - t_i))
    mid = grid.n_steps // 2
    assert props.matrices[0, mid, 0, 0] == pytest.approx(np.exp(0.25),
                                                         abs=1e-3)


def test_feynman_kac_reconstructs_lean(lq_problem, lq_control,
                                       sg_problem, sg_control, grid):
    for problem, control in ((lq_problem, lq_control),
                             (sg_problem, sg_control)):
        batch = sl.simulate_batch(problem, control, grid, 17, 8)
        lean = sl.solve_lean_adjoint(problem, control, batch)
        props = sl.fundamental_matrix(problem, control, batch)
        fk = sl.feynman_kac_lean(problem, control, batch, props)
        gap = np.max(np.abs(fk.values - lean.values))
        assert gap <= 1e-10, f"{problem.name}: max gap {gap}"


def test_feynman_kac_2d(lq_2d_problem, grid):
    ctrl = make_mild_feedback(2, 1, 1.0)
    batch = sl.simulate_batch(lq_2d_problem, ctrl, grid, 2, 4)
    lean = sl.solve_lean_adjoint(lq_2d_problem, ctrl, batch)
    props = sl.fundamental_matrix(lq_2d_problem, ctrl, batch)
    fk = sl.feynman_kac_lean(lq_2d_problem, ctrl, batch, props)
    np.testing.assert_allclose(fk.values, lean.values, atol=1e-10)


# ---------------------------------------------------------------------------
# parameter gradients


@pytest.mark.parametrize("fixture", ["sg", "lq"])
def test_theta_gradient_matches_fd(request, fixture):
    problem = request.getfixturevalue(f"{fixture}_problem")
    control = request.getfixturevalue(f"{fixture}_control")
    grid = sl.TimeGrid(300, 1.0)
    batch = sl.simulate_batch(problem, control, grid, 29, 2)
    full = sl.solve_first_order_adjoint(problem, control, batch)
    grads = sl.theta_gradient_via_adjoint(problem, control, batch, full)
    step = 1e-6
    for p in range(2):
        traj = batch[p]
        fd = np.zeros(control.n_params)
        for q in range(control.n_params):
            bump = np.zeros(control.n_params)
            bump[q] = step
            up = sl.pathwise_value(problem,
                                   control.with_theta(control.theta + bump),
                                   grid, traj.noise, traj.x0)
            dn = sl.pathwise_value(problem,
                                   control.with_theta(control.theta - bump),
                                   grid, traj.noise, traj.x0)
            fd[q] = (up - dn) / (2.0 * step)
        np.testing.assert_allclose(grads[p], fd, rtol=2e-6, atol=1e-8)


def test_theta_gradient_single_trajectory_matches_batch(sg_problem,
                                                        sg_control, grid):
    batch = sl.simulate_batch(sg_problem, sg_control, grid, 4, 3)
    full = sl.solve_first_order_adjoint(sg_problem, sg_control, batch)
    grads = sl.theta_gradient_via_adjoint(sg_problem, sg_control, batch,
                                          full)
    one = sl.theta_gradient_via_adjoint(sg_problem, sg_control, batch[1],
                                        full[1])
    assert one.shape == (sg_control.n_params,)
    np.testing.assert_allclose(one, grads[1], rtol=1e-12)


# ---------------------------------------------------------------------------
# containers and output


def test_adjoint_batch_indexing(lq_problem, lq_control, grid):
    batch = sl.simulate_batch(lq_problem, lq_control, grid, 0, 5)
    lean = sl.solve_lean_adjoint(lq_problem, lq_control, batch)
    assert len(lean) == 5
    path = lean[2]
    np.testing.assert_array_equal(path.values, lean.values[2])
    assert path.kind == "lean"
    assert sum(1 for _ in lean) == 5


def test_adjoints_csv(tmp_path, lq_problem, lq_control):
    grid = sl.TimeGrid(3, 1.0)
    batch = sl.simulate_batch(lq_problem, lq_control, grid, 0, 2)
    lean = sl.solve_lean_adjoint(lq_problem, lq_control, batch)
    out = tmp_path / "adj.csv"
    sl.write_adjoints_csv(lean, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path,i,t,a_0"
    assert len(lines) == 1 + 2 * (grid.n_steps + 1)
