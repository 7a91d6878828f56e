"""Backward adjoint solvers along frozen trajectories.

All recursions run backwards on a stored trajectory. The step from node
i+1 to node i is explicit in the adjoint value (it enters at a_{i+1}) but
evaluates every derivative coefficient at the forward scheme's own
evaluation point, x = X_i, u = controls[i], t = t_i. That pairing makes
each backward step the transpose of the corresponding forward Euler step's
linearization, so the recursions differentiate the simulated discrete
functional itself rather than an O(dt) neighbour of it. Control
state-Jacobians follow the same convention.

Three vector adjoints share the terminal anchor a_N = grad_terminal(X_N):

  * lean  — partial-derivative recursion
        a_i = a_{i+1} + dt * (d1_drift' a_{i+1} + d1_cost),
    which ignores how the control feeds back into the state.
  * full  — total-derivative recursion including the diffusion coupling
    terms G_j = dsigma_dx_j + dsigma_du_j du_dx; reduces to `lean`
    bit-for-bit when the diffusion is (x,u)-free and du_dx == 0.
  * full_with_h — `full` plus a noise-coupled running term h(x,t).dB in
    the pathwise functional.

The matrix adjoint A_i (second_order kind) differentiates the same
functional twice; it needs the problem's SecondOrderBundle and a control
family whose d2u/dx2 vanishes.

`fundamental_matrix` accumulates per-step linearizations
Phi_i = (I + dt J_{n-1}) ... (I + dt J_i) with J the *partial* drift
Jacobian, so `feynman_kac_lean`'s reconstruction
a_i = Phi_i' (grad_terminal + C_i), C_i = C_{i+1} + dt Phi_i^{-T} d1_cost_i,
telescopes to exactly the lean recursion (same algebra, different
association order; agreement is floating-point tight, not just O(dt)).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import _io
from .errors import UnsupportedProblemError, ValidationError
from .simulate import TimeGrid, Trajectory, TrajectoryBatch

LEAN = "lean"
FULL = "full"
FULL_WITH_H = "full_with_h"
SECOND_ORDER = "second_order"


@dataclasses.dataclass(frozen=True)
class AdjointPath:
    """First-order adjoint values (n_steps+1, d) along one path."""

    grid: TimeGrid
    values: np.ndarray
    kind: str


class AdjointBatch:
    """First-order adjoints for a batch, values (B, n_steps+1, d)."""

    def __init__(self, grid, values, kind):
        self.grid = grid
        self.values = values
        self.kind = kind

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, index):
        return AdjointPath(self.grid, self.values[index], self.kind)

    def __iter__(self):
        for j in range(len(self)):
            yield self[j]


@dataclasses.dataclass(frozen=True)
class MatrixAdjointPath:
    """Second-order adjoint matrices (n_steps+1, d, d) along one path."""

    grid: TimeGrid
    values: np.ndarray
    kind: str = SECOND_ORDER


class MatrixAdjointBatch:
    def __init__(self, grid, values):
        self.grid = grid
        self.values = values
        self.kind = SECOND_ORDER

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, index):
        return MatrixAdjointPath(self.grid, self.values[index])


@dataclasses.dataclass(frozen=True)
class PropagatorPath:
    """Linearized flow maps to the horizon: matrices[i] ~ Phi_{t_i -> T}."""

    grid: TimeGrid
    matrices: np.ndarray


class PropagatorBatch:
    def __init__(self, grid, matrices):
        self.grid = grid
        self.matrices = matrices

    def __len__(self):
        return self.matrices.shape[0]

    def __getitem__(self, index):
        return PropagatorPath(self.grid, self.matrices[index])


class _FrozenControl:
    """A control as the surrogate losses see it: zero state feedback.

    The matching losses treat the stored trajectory (and the control
    realized along it) as fixed data, so the adjoints they consume are
    solved with du/dx == 0. Wrapping rather than flagging keeps the
    solvers themselves convention-free.
    """

    x_hessian_is_zero = True

    def __init__(self, control):
        self._inner = control
        self.family = control.family
        self.d = control.d
        self.k = control.k

    def evaluate(self, x, t):
        return self._inner.evaluate(x, t)

    def state_jacobian(self, x, t):
        return np.zeros((x.shape[0], self.k, self.d))

    def jacobians(self, x, t):
        du_dtheta, _ = self._inner.jacobians(x, t)
        return du_dtheta, self.state_jacobian(x, t)


def freeze_control(control):
    """View of `control` with zero state-Jacobian (stopgrad convention)."""
    return _FrozenControl(control)


def _batch_view(traj):
    """(grid, states, controls, increments, was_single)."""
    if isinstance(traj, TrajectoryBatch):
        return traj.grid, traj.states, traj.controls, traj.increments, False
    if isinstance(traj, Trajectory):
        return (traj.grid, traj.states[None], traj.controls[None],
                traj.noise.increments[None], True)
    raise ValidationError(f"expected Trajectory or TrajectoryBatch, "
                          f"got {type(traj).__name__}")


def _step_point(problem, states, controls, nodes, i):
    """(x, u, t) coefficients for the backward step i+1 -> i.

    The forward step i -> i+1 was driven by (X_i, u_i, t_i); its adjoint
    transpose reuses exactly that point.
    """
    x = states[:, i]
    u = controls[:, i]
    t = float(nodes[i])
    return x, u, t


def solve_lean_adjoint(problem, control, traj):
    """Partial-derivative adjoint; terminal anchor grad_terminal(X_N).

    Accepts one Trajectory or a TrajectoryBatch and returns the matching
    AdjointPath / AdjointBatch (kind "lean").
    """
    grid, states, controls, _, single = _batch_view(traj)
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch = states.shape[0]
    values = np.empty((batch, n + 1, problem.d))
    a = np.asarray(bundle.grad_terminal(states[:, n]), dtype=np.float64)
    values[:, n] = a
    for i in range(n - 1, -1, -1):
        x, u, t = _step_point(problem, states, controls, nodes, i)
        jac = bundle.d1_drift(x, u, t)
        src = bundle.d1_cost(x, u, t)
        a = a + dt * (np.einsum("bip,bi->bp", jac, a) + src)
        values[:, i] = a
    out = AdjointBatch(grid, values, LEAN)
    return out[0] if single else out


def _total_first_order(problem, control, x, u, t):
    """Total drift Jacobian, total cost gradient, diffusion couplings G.

    Returns (jac_x (B,d,d), grad_f (B,d), g (B,m,d,d), du_dx (B,k,d)) where
    g[b,j] is the j-th noise column's total state Jacobian.
    """
    bundle = problem.derivatives
    du_dx = np.asarray(control.state_jacobian(x, t), dtype=np.float64)
    jac_x = bundle.d1_drift(x, u, t) + np.einsum(
        "bic,bcp->bip", bundle.d2_drift(x, u, t), du_dx)
    grad_f = bundle.d1_cost(x, u, t) + np.einsum(
        "bcp,bc->bp", du_dx, bundle.d2_cost(x, u, t))
    g = bundle.dsigma_dx(x, u, t) + np.einsum(
        "bjic,bcp->bjip", bundle.dsigma_du(x, u, t), du_dx)
    return jac_x, grad_f, g, du_dx


def solve_first_order_adjoint(problem, control, traj, h_term=None):
    """Total-derivative adjoint with diffusion (and optional h) coupling.

    The step reuses the stored Brownian increments of the trajectory:
        c_j  = G_j' a_{i+1} (+ grad h_j)
        a_i  = a_{i+1} + dt * (jac_x' a_{i+1} + grad_f) + sum_j c_j dB_i^j
    with every coefficient at (X_i, u_i, t_i). This is the transpose of
    the forward step's linearization, so a_0 is the gradient of the
    simulated pathwise cost for the realized increments. (A continuum-
    limit Ito compensation -dt G_j'c_j would bias a_0 by O(1) on
    multiplicative noise and is omitted; the increments themselves carry
    that correction.) With h_term, the functional being differentiated
    gains sum_i h(X_i, t_i) . dB_i. kind is "full" or "full_with_h".
    """
    if h_term is not None and h_term.grad is None:
        raise ValidationError("h_term requires a grad callback")
    grid, states, controls, increments, single = _batch_view(traj)
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch = states.shape[0]
    values = np.empty((batch, n + 1, problem.d))
    a = np.asarray(bundle.grad_terminal(states[:, n]), dtype=np.float64)
    values[:, n] = a
    for i in range(n - 1, -1, -1):
        x, u, t = _step_point(problem, states, controls, nodes, i)
        jac_x, grad_f, g, _ = _total_first_order(problem, control, x, u, t)
        c = np.einsum("bjip,bi->bjp", g, a)
        if h_term is not None:
            c = c + np.asarray(h_term.grad(x, t), dtype=np.float64)
        a = (a + dt * (np.einsum("bip,bi->bp", jac_x, a) + grad_f)
             + np.einsum("bjp,bj->bp", c, increments[:, i]))
        values[:, i] = a
    out = AdjointBatch(grid, values, FULL_WITH_H if h_term is not None else FULL)
    return out[0] if single else out


def _total_second_order(problem, control, x, u, t, du_dx):
    """Total Hessians of cost, drift components, and diffusion entries."""
    so = problem.derivatives.second_order
    d, k, m = problem.d, problem.k, problem.m

    def entry(fn, tail):
        if fn is None:
            return np.zeros((x.shape[0],) + tail)
        return np.asarray(fn(x, u, t), dtype=np.float64)

    c_xx = entry(so.cost_hess_xx, (d, d))
    c_xu = entry(so.cost_hess_xu, (d, k))
    c_uu = entry(so.cost_hess_uu, (k, k))
    mixed = np.einsum("bpc,bcq->bpq", c_xu, du_dx)
    hess_f = (c_xx + mixed + mixed.transpose(0, 2, 1)
              + np.einsum("bcp,bce,beq->bpq", du_dx, c_uu, du_dx))

    b_xx = entry(so.drift_hess_xx, (d, d, d))
    b_xu = entry(so.drift_hess_xu, (d, d, k))
    b_uu = entry(so.drift_hess_uu, (d, k, k))
    mixed_b = np.einsum("bipc,bcq->bipq", b_xu, du_dx)
    hess_b = (b_xx + mixed_b + mixed_b.transpose(0, 1, 3, 2)
              + np.einsum("bcp,bice,beq->bipq", du_dx, b_uu, du_dx))

    s_xx = entry(so.sigma_hess_xx, (m, d, d, d))
    s_xu = entry(so.sigma_hess_xu, (m, d, d, k))
    s_uu = entry(so.sigma_hess_uu, (m, d, k, k))
    mixed_s = np.einsum("bjipc,bcq->bjipq", s_xu, du_dx)
    hess_s = (s_xx + mixed_s + mixed_s.transpose(0, 1, 2, 4, 3)
              + np.einsum("bcp,bjice,beq->bjipq", du_dx, s_uu, du_dx))
    return hess_f, hess_b, hess_s


def solve_second_order_adjoint(problem, control, traj, first):
    """Matrix adjoint A_i, anchored at hess_terminal(X_N).

    Backward step (coefficients at (X_i, u_i, t_i), stored increments),
    with per-step symmetrization A <- (A + A')/2:

        lyap = jac_x' A + A jac_x + sum_j G_j' A G_j + hess_f
               + sum_i a^i hess_b_i + 0.5 * sum_{j,i} a^i hess_s_{ij} G_j
        U_j  = A G_j + G_j' A + sum_i a^i hess_s_{ij}
        A_i  = A_{i+1} + dt * lyap + sum_j U_j dB_i^j

    Requires derivatives.second_order and a control with d2u/dx2 == 0.
    `first` is the matching first-order AdjointBatch/Path along `traj`.
    """
    if problem.derivatives.second_order is None:
        raise UnsupportedProblemError(
            "problem has no second-order derivative bundle")
    if not control.x_hessian_is_zero:
        raise UnsupportedProblemError(
            f"control family {control.family!r} has nonzero state Hessian; "
            f"the matrix adjoint assembles total derivatives only for "
            f"affine-in-x families")
    grid, states, controls, increments, single = _batch_view(traj)
    first_values = first.values if hasattr(first, "values") else None
    if first_values is None:
        raise ValidationError("first must be an AdjointBatch or AdjointPath")
    if first_values.ndim == 2:
        first_values = first_values[None]
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch, d = states.shape[0], problem.d
    values = np.empty((batch, n + 1, d, d))
    a_mat = np.asarray(bundle.hess_terminal(states[:, n]), dtype=np.float64)
    a_mat = 0.5 * (a_mat + a_mat.transpose(0, 2, 1))
    values[:, n] = a_mat
    for i in range(n - 1, -1, -1):
        x, u, t = _step_point(problem, states, controls, nodes, i)
        jac_x, _, g, du_dx = _total_first_order(problem, control, x, u, t)
        hess_f, hess_b, hess_s = _total_second_order(
            problem, control, x, u, t, du_dx)
        a_vec = first_values[:, i + 1]
        a_hs = np.einsum("bi,bjipq->bjpq", a_vec, hess_s)
        lyap = (np.einsum("bip,biq->bpq", jac_x, a_mat)
                + np.einsum("bpi,biq->bpq", a_mat, jac_x)
                + np.einsum("bjip,bir,bjrq->bpq", g, a_mat, g)
                + hess_f
                + np.einsum("bi,bipq->bpq", a_vec, hess_b)
                + 0.5 * np.einsum("bjpr,bjrq->bpq", a_hs, g))
        u_noise = (np.einsum("bpr,bjrq->bjpq", a_mat, g)
                   + np.einsum("bjrp,brq->bjpq", g, a_mat)
                   + a_hs)
        a_mat = (a_mat + dt * lyap
                 + np.einsum("bjpq,bj->bpq", u_noise, increments[:, i]))
        a_mat = 0.5 * (a_mat + a_mat.transpose(0, 2, 1))
        values[:, i] = a_mat
    out = MatrixAdjointBatch(grid, values)
    return out[0] if single else out


def fundamental_matrix(problem, control, traj):
    """Per-step linearized flow products toward the horizon.

    matrices[i] = (I + dt J_{n-1}) ... (I + dt J_i) with J the partial
    drift Jacobian d1_drift at the lean solver's evaluation points; for a
    constant Jacobian this converges to expm((T - t_i) J). matrices[n] = I.
    """
    grid, states, controls, _, single = _batch_view(traj)
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch, d = states.shape[0], problem.d
    eye = np.eye(d)
    mats = np.empty((batch, n + 1, d, d))
    phi = np.broadcast_to(eye, (batch, d, d)).copy()
    mats[:, n] = phi
    for i in range(n - 1, -1, -1):
        x, u, t = _step_point(problem, states, controls, nodes, i)
        jac = np.asarray(bundle.d1_drift(x, u, t), dtype=np.float64)
        phi = np.einsum("bij,bjk->bik", phi, eye + dt * jac)
        mats[:, i] = phi
    out = PropagatorBatch(grid, mats)
    return out[0] if single else out


def feynman_kac_lean(problem, control, traj, propagators):
    """Reconstruct the lean adjoint from flow products.

    a_i = Phi_i' (grad_terminal(X_N) + C_i) with C_N = 0 and
    C_i = C_{i+1} + dt * Phi_i^{-T} d1_cost_i; algebraically identical
    to the lean recursion (the running source is transported instead of
    accumulated step by step).
    """
    grid, states, controls, _, single = _batch_view(traj)
    mats = propagators.matrices
    if mats.ndim == 3:
        mats = mats[None]
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch, d = states.shape[0], problem.d
    values = np.empty((batch, n + 1, d))
    g_n = np.asarray(bundle.grad_terminal(states[:, n]), dtype=np.float64)
    c_run = np.zeros((batch, d))
    values[:, n] = g_n
    for i in range(n - 1, -1, -1):
        x, u, t = _step_point(problem, states, controls, nodes, i)
        src = np.asarray(bundle.d1_cost(x, u, t), dtype=np.float64)
        phi_t = mats[:, i].transpose(0, 2, 1)
        try:
            c_run = c_run + dt * np.linalg.solve(phi_t, src[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise ValidationError(
                f"singular propagator matrix at step {i}; the linearized "
                f"flow is not invertible on this path")
        values[:, i] = np.einsum("bji,bj->bi", mats[:, i], g_n + c_run)
    out = AdjointBatch(grid, values, LEAN)
    return out[0] if single else out


def theta_gradient_via_adjoint(problem, control, traj, adjoint):
    """Pathwise parameter gradient of the discrete cost functional.

    Sum over the trajectory's own steps, coefficients at (X_i, u_i, t_i):
        grad = sum_i du_dtheta_i' ( dt * (d2_cost_i + d2_drift_i' a_{i+1})
                                    + sum_j dsigma_du_{ij}' a_{i+1} dB_i^j )
    where a is a first-order adjoint along the same trajectory. Pairing
    the step's coefficients with the adjoint at the step's far end mirrors
    how a parameter bump actually propagates through the forward scheme,
    so with the total-derivative adjoint this is the gradient of the
    simulated cost itself. Returns (P,) for a single trajectory, (B, P)
    for a batch.
    """
    grid, states, controls, increments, single = _batch_view(traj)
    values = adjoint.values if hasattr(adjoint, "values") else None
    if values is None:
        raise ValidationError("adjoint must be an AdjointBatch or AdjointPath")
    if values.ndim == 2:
        values = values[None]
    bundle = problem.derivatives
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    grad = np.zeros((states.shape[0], control.n_params))
    for i in range(n):
        x = states[:, i]
        u = controls[:, i]
        t = float(nodes[i])
        a_next = values[:, i + 1]
        du_dtheta, _ = control.jacobians(x, t)
        v = dt * (np.asarray(bundle.d2_cost(x, u, t), dtype=np.float64)
                  + np.einsum("bic,bi->bc", bundle.d2_drift(x, u, t), a_next))
        v = v + np.einsum("bjic,bi,bj->bc", bundle.dsigma_du(x, u, t),
                          a_next, increments[:, i])
        grad += np.einsum("bcp,bc->bp", du_dtheta, v)
    return grad[0] if single else grad


def write_adjoints_csv(adjoints, path):
    """Write adjoint values as rows (path, i, t, a_*)."""
    if isinstance(adjoints, (AdjointPath, MatrixAdjointPath)):
        paths = [adjoints]
        indices = [0]
    else:
        paths = list(adjoints)
        indices = list(range(len(paths)))
    first = paths[0]
    nodes = first.grid.nodes
    flat_dim = int(np.prod(first.values.shape[1:]))
    header = ["path", "i", "t"] + [f"a_{j}" for j in range(flat_dim)]

    def rows():
        for p, ap in zip(indices, paths):
            for i in range(ap.values.shape[0]):
                yield [p, i, float(nodes[i]), *np.ravel(ap.values[i])]

    _io.write_csv(path, header, rows())
