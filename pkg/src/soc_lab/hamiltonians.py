"""Hamiltonians, surrogate losses, and the control objective estimator.

Pointwise Hamiltonians (diagnostics, closed-form optima, PDE residuals):

    hamiltonian_full        f + <b, p> + 0.5 tr(sigma sigma' M)
    hamiltonian_lean        f + <b, p>
    hamiltonian_smp         f + <b, p> + tr(sigma' q)
    hamiltonian_generalized f + <b, p>
                              + 0.5 tr((sigma(u)-sigma(u_ref))' M (sigma(u)-sigma(u_ref)))

Surrogate losses evaluate a frozen batch (trajectories + adjoints) at the
*current* parameters of a control: only the re-evaluated u_theta(X_i, t_i)
carries parameter dependence; states, noise, and adjoints stay fixed.
Each loss returns a LossReport whose loss_value is exactly
dt * sum(per_time_terms) (per_time_terms[i] = path average of the i-th
integrand) and whose grad_theta is the analytic parameter gradient of
loss_value for the same frozen batch.

`soc_objective` estimates the true discrete control cost on fresh paths
and reports (mean, standard error).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import _io
from .errors import UnsupportedProblemError, ValidationError
from .simulate import draw_batch_inputs, simulate_costs


def _point(problem, x, u):
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    if x.shape[1] != problem.d or u.shape[1] != problem.k:
        raise ValidationError(
            f"state/control shapes {x.shape}/{u.shape} do not match "
            f"problem dims d={problem.d}, k={problem.k}")
    return x, u, single


def hamiltonian_full(problem, x, u, t, costate, curvature):
    """f + <b, p> + 0.5 tr(sigma sigma' M); batched or single-point."""
    x, u, single = _point(problem, x, u)
    p = np.atleast_2d(np.asarray(costate, dtype=np.float64))
    m_mat = np.asarray(curvature, dtype=np.float64)
    if m_mat.ndim == 2:
        m_mat = m_mat[None]
    sigma = problem.diffusion(x, u, t)
    value = (problem.running_cost(x, u, t)
             + np.einsum("bi,bi->b", problem.drift(x, u, t), p)
             + 0.5 * np.einsum("bij,bej,bie->b", sigma, sigma, m_mat))
    return float(value[0]) if single else value


def hamiltonian_lean(problem, x, u, t, costate):
    """f + <b, p>: the control-relevant Hamiltonian when sigma is u-free."""
    x, u, single = _point(problem, x, u)
    p = np.atleast_2d(np.asarray(costate, dtype=np.float64))
    value = (problem.running_cost(x, u, t)
             + np.einsum("bi,bi->b", problem.drift(x, u, t), p))
    return float(value[0]) if single else value


def hamiltonian_smp(problem, x, u, t, costate, noise_costate):
    """f + <b, p> + tr(sigma' q) with a (d, m) noise costate q."""
    x, u, single = _point(problem, x, u)
    p = np.atleast_2d(np.asarray(costate, dtype=np.float64))
    q = np.asarray(noise_costate, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    value = (problem.running_cost(x, u, t)
             + np.einsum("bi,bi->b", problem.drift(x, u, t), p)
             + np.einsum("bij,bij->b", problem.diffusion(x, u, t), q))
    return float(value[0]) if single else value


def hamiltonian_generalized(problem, x, u, t, costate, curvature, u_ref):
    """Lean form plus the curvature penalty on the diffusion gap to u_ref."""
    x, u, single = _point(problem, x, u)
    u_ref = np.atleast_2d(np.asarray(u_ref, dtype=np.float64))
    p = np.atleast_2d(np.asarray(costate, dtype=np.float64))
    m_mat = np.asarray(curvature, dtype=np.float64)
    if m_mat.ndim == 2:
        m_mat = m_mat[None]
    gap = problem.diffusion(x, u, t) - problem.diffusion(x, u_ref, t)
    value = (problem.running_cost(x, u, t)
             + np.einsum("bi,bi->b", problem.drift(x, u, t), p)
             + 0.5 * np.einsum("bij,bej,bie->b", gap, gap, m_mat))
    return float(value[0]) if single else value


@dataclasses.dataclass(frozen=True)
class LossReport:
    """One surrogate-loss evaluation on a frozen batch."""

    kind: str
    loss_value: float
    grad_theta: np.ndarray
    per_time_terms: np.ndarray
    n_paths: int

    @property
    def grad_norm(self):
        return float(np.linalg.norm(self.grad_theta))


def _loss_inputs(traj_batch, adjoints):
    states = traj_batch.states
    values = adjoints.values
    if values.ndim == 2:
        values = values[None]
    if values.shape[:2] != states.shape[:2]:
        raise ValidationError(
            f"adjoint values {values.shape} do not align with states "
            f"{states.shape}")
    return states, values


def lean_am_loss(problem, control, traj_batch, lean_adjoints):
    """Integrated lean Hamiltonian under re-evaluated controls.

    per_time_terms[i] = mean_b [ f(X_i, u, t_i) + <b(X_i, u, t_i), a_i> ]
    with u = control.evaluate(X_i, t_i); gradient
    dt * sum_i mean_b [ du_dtheta' (d2_cost + d2_drift' a_i) ].
    """
    states, avals = _loss_inputs(traj_batch, lean_adjoints)
    bundle = problem.derivatives
    grid = traj_batch.grid
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    per_time = np.empty(n)
    grad = np.zeros(control.n_params)
    for i in range(n):
        x = states[:, i]
        t = float(nodes[i])
        a = avals[:, i]
        u = control.evaluate(x, t)
        du_dtheta, _ = control.jacobians(x, t)
        ham = (problem.running_cost(x, u, t)
               + np.einsum("bi,bi->b", problem.drift(x, u, t), a))
        per_time[i] = ham.mean()
        v = (np.asarray(bundle.d2_cost(x, u, t), dtype=np.float64)
             + np.einsum("bic,bi->bc", bundle.d2_drift(x, u, t), a))
        grad += dt * np.einsum("bcp,bc->bp", du_dtheta, v).mean(axis=0)
    return LossReport(kind="lean_am", loss_value=float(dt * per_time.sum()),
                      grad_theta=grad, per_time_terms=per_time,
                      n_paths=len(traj_batch))


def bam_loss(problem, control, traj_batch, adjoints, matrix_adjoints):
    """Integrated full Hamiltonian: lean terms plus 0.5 tr(sigma sigma' A_i).

    The curvature term contributes tr(dsigma_du_c' A sigma) per control
    component to the gradient; it vanishes identically when sigma ignores
    u, making the gradient equal to the lean one on the same inputs.
    """
    states, avals = _loss_inputs(traj_batch, adjoints)
    mvals = matrix_adjoints.values
    if mvals.ndim == 3:
        mvals = mvals[None]
    bundle = problem.derivatives
    grid = traj_batch.grid
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    per_time = np.empty(n)
    grad = np.zeros(control.n_params)
    for i in range(n):
        x = states[:, i]
        t = float(nodes[i])
        a = avals[:, i]
        a_mat = mvals[:, i]
        u = control.evaluate(x, t)
        du_dtheta, _ = control.jacobians(x, t)
        sigma = problem.diffusion(x, u, t)
        ham = (problem.running_cost(x, u, t)
               + np.einsum("bi,bi->b", problem.drift(x, u, t), a)
               + 0.5 * np.einsum("bij,bej,bie->b", sigma, sigma, a_mat))
        per_time[i] = ham.mean()
        v = (np.asarray(bundle.d2_cost(x, u, t), dtype=np.float64)
             + np.einsum("bic,bi->bc", bundle.d2_drift(x, u, t), a))
        a_sigma = np.einsum("bde,bej->bdj", a_mat, sigma)
        v = v + np.einsum("bdj,bjdc->bc", a_sigma,
                          bundle.dsigma_du(x, u, t))
        grad += dt * np.einsum("bcp,bc->bp", du_dtheta, v).mean(axis=0)
    return LossReport(kind="bam", loss_value=float(dt * per_time.sum()),
                      grad_theta=grad, per_time_terms=per_time,
                      n_paths=len(traj_batch))


def per_path_lean_am_gradients(problem, control, traj_batch, lean_adjoints):
    """Per-path replicas (B, n_params) of the lean-AM loss gradient.

    Row b is the gradient contribution of path b alone; the mean over rows
    equals lean_am_loss(...).grad_theta. Useful for attaching standard
    errors to the loss gradient when comparing it against the direct
    objective gradient on the same batch.
    """
    states, avals = _loss_inputs(traj_batch, lean_adjoints)
    bundle = problem.derivatives
    grid = traj_batch.grid
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    grads = np.zeros((states.shape[0], control.n_params))
    for i in range(n):
        x = states[:, i]
        t = float(nodes[i])
        a = avals[:, i]
        u = control.evaluate(x, t)
        du_dtheta, _ = control.jacobians(x, t)
        v = (np.asarray(bundle.d2_cost(x, u, t), dtype=np.float64)
             + np.einsum("bic,bi->bc", bundle.d2_drift(x, u, t), a))
        grads += dt * np.einsum("bcp,bc->bp", du_dtheta, v)
    return grads


def quadratic_am_loss(problem, control, traj_batch, lean_adjoints):
    """Regression form 0.5 |u_theta(X_i,t_i) + sigma(t_i)' a_i|^2, integrated.

    Defined for diffusion_time_only + control_affine_quadratic problems with
    k == m. When additionally d2_drift == sigma (control enters the drift
    through the diffusion matrix), its gradient coincides with the lean-AM
    gradient exactly, not just in expectation.
    """
    if not (problem.diffusion_time_only and problem.control_affine_quadratic):
        raise UnsupportedProblemError(
            "quadratic_am_loss needs diffusion_time_only and "
            "control_affine_quadratic problems")
    if problem.k != problem.m:
        raise UnsupportedProblemError(
            f"quadratic_am_loss needs k == m, got k={problem.k}, m={problem.m}")
    states, avals = _loss_inputs(traj_batch, lean_adjoints)
    grid = traj_batch.grid
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    per_time = np.empty(n)
    grad = np.zeros(control.n_params)
    for i in range(n):
        x = states[:, i]
        t = float(nodes[i])
        a = avals[:, i]
        u = control.evaluate(x, t)
        du_dtheta, _ = control.jacobians(x, t)
        sigma = problem.diffusion(x, u, t)
        resid = u + np.einsum("bic,bi->bc", sigma, a)
        per_time[i] = (0.5 * np.einsum("bk,bk->b", resid, resid)).mean()
        grad += dt * np.einsum("bcp,bc->bp", du_dtheta, resid).mean(axis=0)
    return LossReport(kind="quadratic_am",
                      loss_value=float(dt * per_time.sum()),
                      grad_theta=grad, per_time_terms=per_time,
                      n_paths=len(traj_batch))


def sample_pathwise_costs(problem, control, grid, master_seed, n_paths,
                          x0_seed=None, workers=None, block_size=32768):
    """Fresh pathwise costs and terminal states, simulated in path blocks.

    Blocking only bounds memory; per-path counter RNG makes the result
    independent of block size.
    """
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    if x0_seed is None:
        x0_seed = master_seed
    costs = np.empty(n_paths)
    terminal = np.empty((n_paths, problem.d))
    for start in range(0, n_paths, block_size):
        stop = min(start + block_size, n_paths)
        inc, x0 = draw_batch_inputs(problem, grid, master_seed, x0_seed,
                                    start, stop, workers)
        c, x_t = simulate_costs(problem, control, grid, x0, inc)
        costs[start:stop] = c
        terminal[start:stop] = x_t
    return costs, terminal


def soc_objective(problem, control, grid, master_seed, n_paths,
                  x0_seed=None, workers=None):
    """Monte-Carlo estimate of the discrete control cost: (mean, std error)."""
    costs, _ = sample_pathwise_costs(problem, control, grid, master_seed,
                                     n_paths, x0_seed=x0_seed, workers=workers)
    se = float(costs.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return float(costs.mean()), se


def write_loss_reports_csv(reports, path):
    """Write a sequence of LossReports as rows (iter, loss, grad_norm, n_paths)."""
    header = ["iter", "loss", "grad_norm", "n_paths"]
    rows = [[i, r.loss_value, r.grad_norm, r.n_paths]
            for i, r in enumerate(reports)]
    _io.write_csv(path, header, rows)
