"""Iterative control optimization on adjoint-matching surrogates.

Each iteration simulates a fresh batch under the current control, solves
the backward adjoints along it, evaluates one surrogate loss on the frozen
batch, and steps the parameters down its gradient (optionally clipped to a
trust region). Only the re-evaluated control carries parameter dependence
inside the loss, so each iteration is plain gradient descent on a frozen
quadratic-ish landscape; resampling the batch every iteration (default)
turns this into stochastic descent on the surrogate objective.

`msa_exact` replaces the gradient step for linear-in-parameter families by
the exact minimizer of the quadratic surrogate (a weighted least-squares
solve), the classic alternating scheme: simulate, solve adjoints, fit the
control, repeat.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Optional

import numpy as np

from . import _io
from .adjoint import (freeze_control, solve_first_order_adjoint,
                      solve_lean_adjoint, solve_second_order_adjoint)
from .errors import TrainingAborted, UnsupportedProblemError, ValidationError
from .hamiltonians import (bam_loss, lean_am_loss, quadratic_am_loss,
                           sample_pathwise_costs)
from .simulate import simulate_batch

logger = logging.getLogger(__name__)

_LOSS_KINDS = ("lean_am", "bam", "quadratic_am")
_DIVERGENCE_LIMIT = 1e6


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Knobs of the training loop.

    resample_noise_each_iter=True simulates iteration j with master_seed+j;
    False reuses master_seed every iteration (a fixed batch, useful for
    reproducibility guards and debugging descent).
    """

    n_iters: int
    paths_per_iter: int
    step_size: float
    master_seed: int
    loss_kind: str = "lean_am"
    resample_noise_each_iter: bool = True
    trust_region_radius: Optional[float] = None
    msa_exact: bool = False
    workers: Optional[int] = None

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValidationError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.paths_per_iter < 1:
            raise ValidationError(
                f"paths_per_iter must be >= 1, got {self.paths_per_iter}")
        if self.loss_kind not in _LOSS_KINDS:
            raise ValidationError(
                f"loss_kind must be one of {_LOSS_KINDS}, got {self.loss_kind!r}")
        if self.step_size <= 0.0 and not self.msa_exact:
            raise ValidationError(
                f"step_size must be positive, got {self.step_size}")
        if (self.trust_region_radius is not None
                and self.trust_region_radius <= 0.0):
            raise ValidationError("trust_region_radius must be positive")


@dataclasses.dataclass(frozen=True)
class TrainRecord:
    iteration: int
    loss: float
    grad_norm: float
    objective: float
    objective_se: float
    step_norm: float


@dataclasses.dataclass
class TrainHistory:
    """Per-iteration records; exactly n_iters entries unless aborted."""

    records: list
    aborted: bool = False
    abort_reason: str = ""

    def to_csv(self, path):
        write_history_csv(self, path)


def write_history_csv(history, path):
    header = ["iter", "loss", "grad_norm", "objective", "objective_se",
              "step_norm"]
    rows = [[r.iteration, r.loss, r.grad_norm, r.objective, r.objective_se,
             r.step_norm] for r in history.records]
    _io.write_csv(path, header, rows)


def _solve_loss(problem, control, batch, loss_kind):
    if loss_kind == "lean_am":
        lean = solve_lean_adjoint(problem, control, batch)
        return lean_am_loss(problem, control, batch, lean), lean
    if loss_kind == "quadratic_am":
        lean = solve_lean_adjoint(problem, control, batch)
        return quadratic_am_loss(problem, control, batch, lean), lean
    frozen = freeze_control(control)
    full = solve_first_order_adjoint(problem, frozen, batch)
    second = solve_second_order_adjoint(problem, frozen, batch, full)
    return bam_loss(problem, control, batch, full, second), full


def msa_exact_step(problem, control, traj_batch, lean_adjoints):
    """Exact minimizer of the quadratic surrogate for linear families.

    Solves min_theta sum_i dt * mean_b |u_theta(X_i,t_i) + sigma(t_i)' a_i|^2
    via the normal equations; falls back to the pseudoinverse (with a
    warning) when they are singular or near-singular. Returns the new
    parameter vector.
    """
    if control.family not in ("linear_feedback", "feature_linear"):
        raise UnsupportedProblemError(
            f"msa_exact_step needs a linear-in-parameters family, "
            f"got {control.family!r}")
    if problem.k != problem.m:
        raise UnsupportedProblemError(
            f"msa_exact_step needs k == m, got k={problem.k}, m={problem.m}")
    grid = traj_batch.grid
    states = traj_batch.states
    avals = lean_adjoints.values
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    n_params = control.n_params
    normal = np.zeros((n_params, n_params))
    rhs = np.zeros(n_params)
    for i in range(n):
        x = states[:, i]
        t = float(nodes[i])
        du_dtheta, _ = control.jacobians(x, t)
        sigma = problem.diffusion(x, control.evaluate(x, t), t)
        target = -np.einsum("bic,bi->bc", sigma, avals[:, i])
        normal += dt * np.einsum("bcp,bcq->pq", du_dtheta, du_dtheta)
        rhs += dt * np.einsum("bcp,bc->p", du_dtheta, target)
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > 1e12:
        logger.warning("normal equations ill-conditioned (cond=%.3e); "
                       "using pseudoinverse", cond)
        return np.linalg.pinv(normal) @ rhs
    return np.linalg.solve(normal, rhs)


def train_adjoint_matching(problem, control, grid, config):
    """Run the training loop; returns (trained control, TrainHistory).

    Aborts (TrainingAborted, carrying the partial history) on a non-finite
    loss or gradient or once the loss exceeds 1e6. The recorded objective
    is the batch estimate under the pre-update control of that iteration.
    """
    history = TrainHistory(records=[])

    def abort(iteration, reason):
        history.aborted = True
        history.abort_reason = reason
        raise TrainingAborted(f"training aborted at iteration {iteration}: "
                              f"{reason}", iteration=iteration, history=history)

    for it in range(config.n_iters):
        seed = (config.master_seed + it if config.resample_noise_each_iter
                else config.master_seed)
        batch = simulate_batch(problem, control, grid, seed,
                               config.paths_per_iter, workers=config.workers)
        costs = batch.pathwise_costs
        objective = float(costs.mean())
        objective_se = (float(costs.std(ddof=1) / math.sqrt(len(costs)))
                        if len(costs) > 1 else 0.0)
        report, lean = _solve_loss(problem, control, batch, config.loss_kind)
        if not math.isfinite(report.loss_value):
            abort(it, f"non-finite loss {report.loss_value!r}")
        if not np.all(np.isfinite(report.grad_theta)):
            abort(it, "non-finite gradient")
        if abs(report.loss_value) > _DIVERGENCE_LIMIT:
            abort(it, f"loss diverged ({report.loss_value:.3e})")

        if config.msa_exact:
            new_theta = msa_exact_step(problem, control, batch, lean)
            step_vec = new_theta - control.theta
        else:
            step_vec = -config.step_size * report.grad_theta
        radius = config.trust_region_radius
        step_norm = float(np.linalg.norm(step_vec))
        if radius is not None and step_norm > radius:
            step_vec = step_vec * (radius / step_norm)
            step_norm = float(np.linalg.norm(step_vec))
        control = control.with_theta(control.theta + step_vec)

        history.records.append(TrainRecord(
            iteration=it, loss=report.loss_value, grad_norm=report.grad_norm,
            objective=objective, objective_se=objective_se,
            step_norm=step_norm))
    return control, history


def evaluate_checkpoint(problem, control, grid, master_seed, n_paths,
                        workers=None):
    """Fresh-path metrics for a control: objective and terminal-state stats."""
    costs, terminal = sample_pathwise_costs(problem, control, grid,
                                            master_seed, n_paths,
                                            workers=workers)
    se = (float(costs.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0)
    metrics = {
        "objective": float(costs.mean()),
        "objective_se": se,
        "n_paths": int(n_paths),
    }
    for j in range(problem.d):
        metrics[f"terminal_mean_{j}"] = float(terminal[:, j].mean())
        metrics[f"terminal_var_{j}"] = float(terminal[:, j].var(ddof=1))
    return metrics


def write_metrics_csv(metrics, path):
    """Write a metrics dict as (metric, value) rows, insertion-ordered."""
    _io.write_csv(path, ["metric", "value"],
                  [[key, value] for key, value in metrics.items()])
