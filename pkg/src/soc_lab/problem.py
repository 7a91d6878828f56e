"""Controlled-diffusion problem definitions.

A problem bundles the data of a finite-horizon stochastic control task

    dX_t = drift(X_t, u_t, t) dt + diffusion(X_t, u_t, t) dB_t,   X_0 ~ P0,
    cost  = E[ integral_0^T running_cost(X_t, u_t, t) dt + terminal_cost(X_T) ]

together with analytic first (and optionally second) derivatives of the
coefficients. All callbacks are vectorized over a leading batch axis:

    drift(x, u, t)        (B, d), (B, k), float -> (B, d)
    diffusion(x, u, t)    -> (B, d, m)
    running_cost(x, u, t) -> (B,)
    terminal_cost(x)      -> (B,)
    initial_sampler(seed, path_index) -> (d,)

Derivative conventions (see DerivativeBundle): Jacobians index output
first, differentiation direction last; diffusion derivatives are per
noise column, column index first.

Analytic derivatives are trusted but verified: `validate_derivatives`
compares every bundle entry against central finite differences at random
probe points, and the problem constructors run it before returning.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from . import _rng
from .errors import ValidationError


@dataclasses.dataclass(frozen=True)
class SecondOrderBundle:
    """Second derivatives of the coefficients, for matrix-adjoint work.

    Entries left as None are asserted (and validated) to be identically
    zero. Index conventions, with i the output component, p/q state
    directions, c/e control directions, j the noise column:

        drift_hess_xx(x,u,t)[b,i,p,q] = d2 drift_i / dx_p dx_q
        drift_hess_xu(x,u,t)[b,i,p,c] = d2 drift_i / dx_p du_c
        drift_hess_uu(x,u,t)[b,i,c,e] = d2 drift_i / du_c du_e
        cost_hess_xx(x,u,t)[b,p,q]    = d2 running_cost / dx_p dx_q
        cost_hess_xu(x,u,t)[b,p,c]    = d2 running_cost / dx_p du_c
        cost_hess_uu(x,u,t)[b,c,e]    = d2 running_cost / du_c du_e
        sigma_hess_xx(x,u,t)[b,j,i,p,q] = d2 sigma_ij / dx_p dx_q
        sigma_hess_xu(x,u,t)[b,j,i,p,c] = d2 sigma_ij / dx_p du_c
        sigma_hess_uu(x,u,t)[b,j,i,c,e] = d2 sigma_ij / du_c du_e
    """

    drift_hess_xx: Optional[Callable] = None
    drift_hess_xu: Optional[Callable] = None
    drift_hess_uu: Optional[Callable] = None
    cost_hess_xx: Optional[Callable] = None
    cost_hess_xu: Optional[Callable] = None
    cost_hess_uu: Optional[Callable] = None
    sigma_hess_xx: Optional[Callable] = None
    sigma_hess_xu: Optional[Callable] = None
    sigma_hess_uu: Optional[Callable] = None


@dataclasses.dataclass(frozen=True)
class DerivativeBundle:
    """Analytic first derivatives of the problem coefficients.

        d1_drift(x,u,t)[b,i,p]      = d drift_i / dx_p
        d2_drift(x,u,t)[b,i,c]      = d drift_i / du_c
        d1_cost(x,u,t)[b,p]         = d running_cost / dx_p
        d2_cost(x,u,t)[b,c]         = d running_cost / du_c
        grad_terminal(x)[b,p]       = d terminal_cost / dx_p
        hess_terminal(x)[b,p,q]     = d2 terminal_cost / dx_p dx_q
        dsigma_dx(x,u,t)[b,j,i,p]   = d sigma_ij / dx_p   (j = noise column)
        dsigma_du(x,u,t)[b,j,i,c]   = d sigma_ij / du_c

    second_order is optional and only required by the matrix-adjoint
    solver and its tests.
    """

    d1_drift: Callable
    d2_drift: Callable
    d1_cost: Callable
    d2_cost: Callable
    grad_terminal: Callable
    hess_terminal: Callable
    dsigma_dx: Callable
    dsigma_du: Callable
    second_order: Optional[SecondOrderBundle] = None


@dataclasses.dataclass(frozen=True)
class HTerm:
    """Noise-coupled running term sum_i h(X_i, t_i) . dB_i added to the cost.

        value(x, t) -> (B, m)
        grad(x, t)  -> (B, m, d), grad[b,j,p] = d h_j / dx_p
    """

    value: Callable
    grad: Optional[Callable] = None


@dataclasses.dataclass(frozen=True)
class LQData:
    """Matrices of a linear-quadratic instance (kept for closed-form work)."""

    a_mat: np.ndarray
    b_mat: np.ndarray
    sigma: np.ndarray
    q_run: np.ndarray
    q_term: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray


@dataclasses.dataclass(frozen=True)
class OUParams:
    """Ornstein-Uhlenbeck tilt parameters: dX = -rate X dt + sqrt(2 rate) dB,
    terminal cost 0.5 * tilt * x^2."""

    rate: float
    tilt: float


@dataclasses.dataclass(frozen=True)
class ProblemSpec:
    """A controlled diffusion with costs and analytic derivatives.

    Capability flags:
        diffusion_time_only: sigma(x,u,t) does not depend on (x,u).
        control_affine_quadratic: drift affine in u and
            running_cost(x,u,t) = base(x,t) + 0.5*|u|^2, with
            diffusion_time_only also set.
    """

    d: int
    k: int
    m: int
    horizon: float
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    initial_sampler: Callable
    derivatives: DerivativeBundle
    diffusion_time_only: bool
    control_affine_quadratic: bool
    name: str = "custom"
    lq_data: Optional[LQData] = None
    ou_params: Optional[OUParams] = None

    def sample_initial(self, seed, path_index):
        """Draw one initial state; (seed, path_index) fully determine it."""
        x0 = np.asarray(self.initial_sampler(seed, path_index), dtype=np.float64)
        if x0.shape != (self.d,):
            raise ValidationError(
                f"initial_sampler returned shape {x0.shape}, expected ({self.d},)"
            )
        return x0


# ---------------------------------------------------------------------------
# finite-difference validation


def _central_diff(fn, z, step):
    """Columns of d fn / dz by central differences; fn maps (n,) -> array."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for j in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        cols.append((fn(zp) - fn(zm)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def _check_close(entry, analytic, fd, rtol, probe_desc):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    if analytic.shape != fd.shape:
        raise ValidationError(
            f"{entry}: shape {analytic.shape} does not match "
            f"finite-difference shape {fd.shape} at {probe_desc}"
        )
    scale = np.maximum(1.0, np.abs(analytic))
    err = np.abs(analytic - fd)
    if not np.all(err <= rtol * scale):
        worst = float(np.max(err / scale))
        raise ValidationError(
            f"{entry} disagrees with finite differences at {probe_desc}: "
            f"max scaled error {worst:.3e} (tolerance {rtol:.1e})"
        )


def validate_derivatives(problem, n_probes=32, seed=0, step=1e-5, rtol=1e-5):
    """Check every derivative-bundle entry and capability flag by probing.

    Draws `n_probes` points (x, u ~ N(0,1), t ~ U(0, horizon)), compares each
    analytic derivative against a central finite difference of the callback
    it differentiates, and re-derives the capability flags. Second-order
    entries, when a SecondOrderBundle is present, are checked against finite
    differences of the first-order entries; entries left as None are checked
    to be actually zero.

    Exactness legs of the control_affine_quadratic probe are evaluated at
    x = 0 (where the u-independent part of drift and cost vanishes exactly
    in floating point); random-x legs use a 1e-12 tolerance.

    Raises ValidationError naming the offending entry and probe point.
    """
    d, k, m = problem.d, problem.k, problem.m
    bundle = problem.derivatives
    rng = _rng.philox_generator(seed, 0, _rng.PROBE)

    for p in range(n_probes):
        x = rng.standard_normal(d)
        u = rng.standard_normal(k)
        t = float(rng.uniform(0.0, problem.horizon))
        desc = f"probe {p} (t={t:.6f})"
        xb = x[None, :]
        ub = u[None, :]

        drift_of_x = lambda z: problem.drift(z[None, :], ub, t)[0]
        drift_of_u = lambda w: problem.drift(xb, w[None, :], t)[0]
        cost_of_x = lambda z: problem.running_cost(z[None, :], ub, t)[0]
        cost_of_u = lambda w: problem.running_cost(xb, w[None, :], t)[0]
        sigma_of_x = lambda z: problem.diffusion(z[None, :], ub, t)[0]
        sigma_of_u = lambda w: problem.diffusion(xb, w[None, :], t)[0]
        term_of_x = lambda z: problem.terminal_cost(z[None, :])[0]

        _check_close("d1_drift", bundle.d1_drift(xb, ub, t)[0],
                     _central_diff(drift_of_x, x, step), rtol, desc)
        _check_close("d2_drift", bundle.d2_drift(xb, ub, t)[0],
                     _central_diff(drift_of_u, u, step), rtol, desc)
        _check_close("d1_cost", bundle.d1_cost(xb, ub, t)[0],
                     _central_diff(cost_of_x, x, step), rtol, desc)
        _check_close("d2_cost", bundle.d2_cost(xb, ub, t)[0],
                     _central_diff(cost_of_u, u, step), rtol, desc)
        _check_close("grad_terminal", bundle.grad_terminal(xb)[0],
                     _central_diff(term_of_x, x, step), rtol, desc)

        hess_term = bundle.hess_terminal(xb)[0]
        _check_close(
            "hess_terminal", hess_term,
            _central_diff(lambda z: bundle.grad_terminal(z[None, :])[0], x, step),
            rtol, desc)
        if not np.allclose(hess_term, hess_term.T, atol=1e-12):
            raise ValidationError(f"hess_terminal not symmetric at {desc}")

        # diffusion jacobians: fd gives (d, m, n); bundle stores (m, d, n)
        fd_sx = np.moveaxis(_central_diff(sigma_of_x, x, step), 1, 0)
        fd_su = np.moveaxis(_central_diff(sigma_of_u, u, step), 1, 0)
        _check_close("dsigma_dx", bundle.dsigma_dx(xb, ub, t)[0], fd_sx, rtol, desc)
        _check_close("dsigma_du", bundle.dsigma_du(xb, ub, t)[0], fd_su, rtol, desc)

        if bundle.second_order is not None:
            _validate_second_order(problem, x, u, t, step, rtol, desc)

    _validate_flags(problem, rng)
    _validate_sampler(problem)


def _second_entry(fn, shape):
    """Evaluate an optional second-order callable; None means zero."""
    def call(xb, ub, t):
        if fn is None:
            return np.zeros(shape)
        return np.asarray(fn(xb, ub, t), dtype=np.float64)[0]
    return call


def _validate_second_order(problem, x, u, t, step, rtol, desc):
    d, k, m = problem.d, problem.k, problem.m
    bundle = problem.derivatives
    so = bundle.second_order
    xb, ub = x[None, :], u[None, :]

    def fd_x(entry_fn):
        return _central_diff(lambda z: entry_fn(z[None, :], ub, t)[0], x, step)

    def fd_u(entry_fn):
        return _central_diff(lambda w: entry_fn(xb, w[None, :], t)[0], u, step)

    checks = [
        ("drift_hess_xx", so.drift_hess_xx, (d, d, d), fd_x(bundle.d1_drift)),
        ("drift_hess_xu", so.drift_hess_xu, (d, d, k), fd_u(bundle.d1_drift)),
        ("drift_hess_uu", so.drift_hess_uu, (d, k, k), fd_u(bundle.d2_drift)),
        ("cost_hess_xx", so.cost_hess_xx, (d, d), fd_x(bundle.d1_cost)),
        ("cost_hess_xu", so.cost_hess_xu, (d, k), fd_u(bundle.d1_cost)),
        ("cost_hess_uu", so.cost_hess_uu, (k, k), fd_u(bundle.d2_cost)),
        ("sigma_hess_xx", so.sigma_hess_xx, (m, d, d, d), fd_x(bundle.dsigma_dx)),
        ("sigma_hess_xu", so.sigma_hess_xu, (m, d, d, k), fd_u(bundle.dsigma_dx)),
        ("sigma_hess_uu", so.sigma_hess_uu, (m, d, k, k), fd_u(bundle.dsigma_du)),
    ]
    for entry, fn, shape, fd in checks:
        analytic = _second_entry(fn, shape)(xb, ub, t)
        label = entry if fn is not None else f"{entry} (declared zero)"
        _check_close(label, analytic, fd, rtol, desc)


def _validate_flags(problem, rng):
    """Re-derive the capability flags and compare with the declared ones."""
    probed_dto = _probe_diffusion_time_only(problem, rng)
    if problem.diffusion_time_only != probed_dto:
        raise ValidationError(
            f"diffusion_time_only declared {problem.diffusion_time_only} "
            f"but probes say {probed_dto}"
        )
    probed_caq = probed_dto and _probe_control_affine_quadratic(problem, rng)
    if problem.control_affine_quadratic != probed_caq:
        raise ValidationError(
            f"control_affine_quadratic declared "
            f"{problem.control_affine_quadratic} but probes say {probed_caq}"
        )


def _probe_diffusion_time_only(problem, rng):
    for _ in range(4):
        t = float(rng.uniform(0.0, problem.horizon))
        ref = None
        for _ in range(4):
            x = rng.standard_normal((1, problem.d))
            u = rng.standard_normal((1, problem.k))
            sig = np.asarray(problem.diffusion(x, u, t), dtype=np.float64)
            if ref is None:
                ref = sig
            elif not np.array_equal(ref, sig):
                return False
    return True


def _probe_control_affine_quadratic(problem, rng):
    d, k = problem.d, problem.k
    zero_x = np.zeros((1, d))
    for _ in range(4):
        t = float(rng.uniform(0.0, problem.horizon))
        u = rng.standard_normal((1, k))

        # Exactness legs at x = 0, where the u-independent parts vanish.
        half_usq = 0.5 * np.einsum("bk,bk->b", u, u)
        base = problem.running_cost(zero_x, np.zeros((1, k)), t)
        if not np.array_equal(problem.running_cost(zero_x, u, t) - base, half_usq):
            return False
        b0 = problem.drift(zero_x, np.zeros((1, k)), t)
        if not np.array_equal(problem.drift(zero_x, 2.0 * u, t) - b0,
                              2.0 * (problem.drift(zero_x, u, t) - b0)):
            return False

        # Tolerance legs at random x.
        x = rng.standard_normal((1, d))
        du = (problem.running_cost(x, u, t)
              - problem.running_cost(x, np.zeros((1, k)), t))
        if not np.allclose(du, half_usq, atol=1e-12, rtol=1e-12):
            return False
        b0 = problem.drift(x, np.zeros((1, k)), t)
        lin = (problem.drift(x, 2.0 * u, t) - b0
               - 2.0 * (problem.drift(x, u, t) - b0))
        if not np.allclose(lin, 0.0, atol=1e-12):
            return False
    return True


def _validate_sampler(problem):
    a = problem.sample_initial(12345, 7)
    b = problem.sample_initial(12345, 7)
    if not np.array_equal(a, b):
        raise ValidationError("initial_sampler is not deterministic in (seed, path)")
    if not np.all(np.isfinite(a)):
        raise ValidationError("initial_sampler returned non-finite values")


# ---------------------------------------------------------------------------
# constructors


def _as_matrix(value, shape, name):
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if arr.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    arrel = arr.copy()
    arrel.setflags(write=False)
    return arrel


def _check_sym_psd(mat, name):
    if not np.allclose(mat, mat.T, atol=1e-12 * max(1.0, float(np.abs(mat).max()))):
        raise ValidationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(mat)
    if w.min() < -1e-10 * max(1.0, float(w.max())):
        raise ValidationError(f"{name} must be positive semidefinite "
                              f"(min eigenvalue {w.min():.3e})")


def _psd_factor(cov):
    """L with L L^T = cov, valid for singular PSD matrices."""
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)[None, :]


def make_lq_problem(a_mat, b_mat, sigma, q_run, q_term, horizon,
                    x0_mean=None, x0_cov=None):
    """Linear dynamics dX = (A x + B u) dt + sigma dB with quadratic costs
    0.5 x'Q_run x + 0.5|u|^2 running and 0.5 x'Q_term x terminal.

    Scalars are accepted for 1x1 matrices. Gaussian initial law
    N(x0_mean, x0_cov), defaulting to N(0, I). Cost matrices must be
    symmetric PSD; the returned problem carries both capability flags and
    the matrices (`lq_data`) for closed-form companions.
    """
    a = np.atleast_2d(np.asarray(a_mat, dtype=np.float64))
    d = a.shape[0]
    a = _as_matrix(a_mat, (d, d), "a_mat")
    b = np.atleast_2d(np.asarray(b_mat, dtype=np.float64))
    if b.shape[0] != d:
        raise ValidationError(f"b_mat: expected {d} rows, got {b.shape[0]}")
    k = b.shape[1]
    b = _as_matrix(b_mat, (d, k), "b_mat")
    s = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if s.shape[0] != d:
        raise ValidationError(f"sigma: expected {d} rows, got {s.shape[0]}")
    m = s.shape[1]
    s = _as_matrix(sigma, (d, m), "sigma")
    qr = _as_matrix(q_run, (d, d), "q_run")
    qt = _as_matrix(q_term, (d, d), "q_term")
    _check_sym_psd(qr, "q_run")
    _check_sym_psd(qt, "q_term")
    if horizon <= 0.0:
        raise ValidationError(f"horizon must be positive, got {horizon}")

    mean = np.zeros(d) if x0_mean is None else \
        np.asarray(x0_mean, dtype=np.float64).reshape(d)
    cov = np.eye(d) if x0_cov is None else \
        np.atleast_2d(np.asarray(x0_cov, dtype=np.float64))
    cov = _as_matrix(cov, (d, d), "x0_cov")
    _check_sym_psd(cov, "x0_cov")
    chol = _psd_factor(cov)

    eye_k = np.eye(k)

    def drift(x, u, t):
        return x @ a.T + u @ b.T

    def diffusion(x, u, t):
        return np.broadcast_to(s, (x.shape[0], d, m))

    def running_cost(x, u, t):
        return (0.5 * np.einsum("bi,ij,bj->b", x, qr, x)
                + 0.5 * np.einsum("bk,bk->b", u, u))

    def terminal_cost(x):
        return 0.5 * np.einsum("bi,ij,bj->b", x, qt, x)

    def initial_sampler(seed, path_index):
        gen = _rng.philox_generator(seed, path_index, _rng.INITIAL_STATE)
        return mean + chol @ gen.standard_normal(d)

    bundle = DerivativeBundle(
        d1_drift=lambda x, u, t: np.broadcast_to(a, (x.shape[0], d, d)),
        d2_drift=lambda x, u, t: np.broadcast_to(b, (x.shape[0], d, k)),
        d1_cost=lambda x, u, t: x @ qr,
        d2_cost=lambda x, u, t: np.asarray(u, dtype=np.float64),
        grad_terminal=lambda x: x @ qt,
        hess_terminal=lambda x: np.broadcast_to(qt, (x.shape[0], d, d)),
        dsigma_dx=lambda x, u, t: np.zeros((x.shape[0], m, d, d)),
        dsigma_du=lambda x, u, t: np.zeros((x.shape[0], m, d, k)),
        second_order=SecondOrderBundle(
            cost_hess_xx=lambda x, u, t: np.broadcast_to(qr, (x.shape[0], d, d)),
            cost_hess_uu=lambda x, u, t: np.broadcast_to(eye_k, (x.shape[0], k, k)),
        ),
    )

    problem = ProblemSpec(
        d=d, k=k, m=m, horizon=float(horizon),
        drift=drift, diffusion=diffusion,
        running_cost=running_cost, terminal_cost=terminal_cost,
        initial_sampler=initial_sampler, derivatives=bundle,
        diffusion_time_only=True, control_affine_quadratic=True,
        name="lq",
        lq_data=LQData(a, b, s, qr, qt, mean.copy(), cov),
    )
    validate_derivatives(problem, n_probes=8)
    return problem


def make_ou_tilt_problem(rate, tilt, horizon):
    """Ornstein-Uhlenbeck base process with a quadratic terminal tilt.

    dX = -rate X dt + sqrt(2 rate) (u dt + dB), X_0 ~ N(0, 1), zero running
    state cost, terminal cost 0.5 * tilt * x^2. The uncontrolled process is
    stationary N(0,1); the optimally controlled terminal law is
    N(0, 1/(1+tilt)).
    """
    if rate <= 0.0:
        raise ValidationError(f"rate must be positive, got {rate}")
    if tilt <= -1.0:
        raise ValidationError(f"tilt must exceed -1, got {tilt}")
    coupling = math.sqrt(2.0 * rate)
    problem = make_lq_problem(
        a_mat=-rate, b_mat=coupling, sigma=coupling,
        q_run=0.0, q_term=tilt, horizon=horizon,
        x0_mean=0.0, x0_cov=1.0,
    )
    return dataclasses.replace(
        problem, name="ou_tilt", ou_params=OUParams(float(rate), float(tilt))
    )


def make_controlled_diffusion_problem(d, k, m, horizon, drift, diffusion,
                                      running_cost, terminal_cost,
                                      initial_sampler, derivatives,
                                      name="custom", probe_seed=0):
    """Assemble and validate a problem from user callbacks.

    Runs the full derivative validation (raising ValidationError on the
    first failing entry) and probes the capability flags: diffusion is
    classified time-only when it never responds to (x, u) probes, and
    control_affine_quadratic additionally requires affine drift and an
    exact 0.5*|u|^2 control cost.
    """
    if d <= 0 or k <= 0 or m <= 0:
        raise ValidationError(f"dimensions must be positive: d={d}, k={k}, m={m}")
    if horizon <= 0.0:
        raise ValidationError(f"horizon must be positive, got {horizon}")

    rng = _rng.philox_generator(probe_seed, 1, _rng.PROBE)
    trial = ProblemSpec(
        d=d, k=k, m=m, horizon=float(horizon),
        drift=drift, diffusion=diffusion,
        running_cost=running_cost, terminal_cost=terminal_cost,
        initial_sampler=initial_sampler, derivatives=derivatives,
        diffusion_time_only=False, control_affine_quadratic=False,
        name=name,
    )
    dto = _probe_diffusion_time_only(trial, rng)
    caq = dto and _probe_control_affine_quadratic(trial, rng)
    problem = dataclasses.replace(
        trial, diffusion_time_only=dto, control_affine_quadratic=caq
    )
    validate_derivatives(problem, n_probes=32, seed=probe_seed)
    return problem


def make_scalar_geometric_problem(nu=0.2, horizon=1.0, x0_mean=1.0, x0_std=0.2):
    """Scalar multiplicative-noise benchmark: dX = u X dt + nu X dB,
    running cost 0.5 u^2, terminal cost (x-1)^2, X_0 ~ N(x0_mean, x0_std^2).

    The state-dependent diffusion clears both capability flags, which makes
    this the stock instance for exercising the full (noise-coupled) adjoint.
    """
    nu = float(nu)

    def drift(x, u, t):
        return u * x

    def diffusion(x, u, t):
        return nu * x[:, :, None]

    def running_cost(x, u, t):
        return 0.5 * np.einsum("bk,bk->b", u, u)

    def terminal_cost(x):
        return np.einsum("bi,bi->b", x - 1.0, x - 1.0)

    def initial_sampler(seed, path_index):
        gen = _rng.philox_generator(seed, path_index, _rng.INITIAL_STATE)
        return np.array([x0_mean + x0_std * gen.standard_normal()])

    def ones3(x):
        return np.ones((x.shape[0], 1, 1))

    bundle = DerivativeBundle(
        d1_drift=lambda x, u, t: u[:, :, None],
        d2_drift=lambda x, u, t: x[:, :, None],
        d1_cost=lambda x, u, t: np.zeros_like(x),
        d2_cost=lambda x, u, t: np.asarray(u, dtype=np.float64),
        grad_terminal=lambda x: 2.0 * (x - 1.0),
        hess_terminal=lambda x: np.full((x.shape[0], 1, 1), 2.0),
        dsigma_dx=lambda x, u, t: np.full((x.shape[0], 1, 1, 1), nu),
        dsigma_du=lambda x, u, t: np.zeros((x.shape[0], 1, 1, 1)),
        second_order=SecondOrderBundle(
            drift_hess_xu=lambda x, u, t: np.ones((x.shape[0], 1, 1, 1)),
            cost_hess_uu=lambda x, u, t: np.ones((x.shape[0], 1, 1)),
        ),
    )
    return make_controlled_diffusion_problem(
        d=1, k=1, m=1, horizon=horizon, drift=drift, diffusion=diffusion,
        running_cost=running_cost, terminal_cost=terminal_cost,
        initial_sampler=initial_sampler, derivatives=bundle,
        name="scalar_geometric",
    )
