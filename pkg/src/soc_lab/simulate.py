"""Forward simulation: time grids, Brownian noise, Euler-Maruyama rollouts.

Scheme conventions, shared by everything downstream:

  * uniform grid t_i = i * dt, dt = horizon / n_steps, t_N = horizon exactly;
  * controls are piecewise constant per interval, evaluated at the left
    endpoint: u_i = control.evaluate(X_i, t_i);
  * one step is X_{i+1} = X_i + drift(X_i,u_i,t_i) dt + sigma(X_i,u_i,t_i) dB_i,
    with dB_i ~ N(0, dt I_m) (see `euler_step` for the exact float
    expression, which tests may replay bit-for-bit);
  * running costs are accumulated with the left-endpoint Riemann sum.

Noise is counter-based: path p of master seed s always sees the same
increments regardless of batch size, worker count, or which other paths
are simulated alongside it. Batched states are laid out (B, n_steps+1, d).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math
import os

import numpy as np

from . import _io, _rng
from .errors import SimulationError, ValidationError

_CHUNK = 1024  # paths per RNG work unit; fixed so results never depend on workers


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with n_steps intervals."""

    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not (self.horizon > 0.0 and math.isfinite(self.horizon)):
            raise ValidationError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def nodes(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclasses.dataclass(frozen=True)
class BrownianPath:
    """Increments (n_steps, m) for one path, tagged with its RNG identity."""

    increments: np.ndarray
    master_seed: int
    path_index: int


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """One simulated path: states (n_steps+1, d), controls (n_steps, k).

    pathwise_cost is the discrete cost functional of this realization
    (left-endpoint running-cost sum plus terminal cost), accumulated by
    the forward pass itself.
    """

    grid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    noise: BrownianPath
    pathwise_cost: float

    @property
    def x0(self):
        return self.states[0]

    @property
    def terminal_state(self):
        return self.states[-1]


class TrajectoryBatch:
    """A batch of paths stored as contiguous arrays.

    states (B, n_steps+1, d), controls (B, n_steps, k), increments
    (B, n_steps, m), pathwise_costs (B,). Indexing returns per-path
    `Trajectory` views.
    """

    def __init__(self, grid, states, controls, increments, master_seed,
                 x0_seed, path_indices, pathwise_costs):
        self.grid = grid
        self.states = states
        self.controls = controls
        self.increments = increments
        self.master_seed = master_seed
        self.x0_seed = x0_seed
        self.path_indices = path_indices
        self.pathwise_costs = pathwise_costs

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, index):
        p = int(self.path_indices[index])
        return Trajectory(
            grid=self.grid,
            states=self.states[index],
            controls=self.controls[index],
            noise=BrownianPath(self.increments[index], self.master_seed, p),
            pathwise_cost=float(self.pathwise_costs[index]),
        )

    def __iter__(self):
        for j in range(len(self)):
            yield self[j]


def sample_brownian(grid, m, master_seed, path_index):
    """Increments of one m-dimensional Brownian path on the grid."""
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    gen = _rng.philox_generator(master_seed, path_index, _rng.BROWNIAN)
    inc = gen.standard_normal((grid.n_steps, m)) * math.sqrt(grid.dt)
    return BrownianPath(increments=inc, master_seed=master_seed,
                        path_index=path_index)


def euler_step(problem, x, u, t, dt, db):
    """One Euler-Maruyama step on a batch; the package's single step rule.

    Float-level contract: the result is computed exactly as
    x + drift * dt + einsum('bim,bm->bi', sigma, db), so callers can
    reproduce stored steps bit-for-bit.
    """
    return (x + problem.drift(x, u, t) * dt
            + np.einsum("bim,bm->bi", problem.diffusion(x, u, t), db))


def _check_grid(problem, grid):
    if abs(grid.horizon - problem.horizon) > 1e-12 * max(1.0, problem.horizon):
        raise ValidationError(
            f"grid horizon {grid.horizon} != problem horizon {problem.horizon}")


def _check_finite(x, step_index, path_indices):
    ok = np.isfinite(x).all(axis=1)
    if not ok.all():
        bad = int(np.argmin(ok))
        raise SimulationError(
            f"state became non-finite at step {step_index} "
            f"(path {int(path_indices[bad])})",
            step_index=step_index,
            path_index=int(path_indices[bad]),
        )


def _rollout(problem, control, grid, x0, increments, path_indices,
             store_states=True):
    """Shared Euler loop. Returns (states or None, controls, costs, x_final)."""
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    batch = x0.shape[0]
    x = np.array(x0, dtype=np.float64)
    _check_finite(x, 0, path_indices)
    states = np.empty((batch, n + 1, problem.d)) if store_states else None
    if store_states:
        states[:, 0] = x
    controls = np.empty((batch, n, problem.k))
    costs = np.zeros(batch)
    for i in range(n):
        t = float(nodes[i])
        u = np.asarray(control.evaluate(x, t), dtype=np.float64)
        if u.shape != (batch, problem.k):
            raise ValidationError(
                f"control returned shape {u.shape}, expected {(batch, problem.k)}")
        controls[:, i] = u
        costs += dt * problem.running_cost(x, u, t)
        x = euler_step(problem, x, u, t, dt, increments[:, i])
        _check_finite(x, i + 1, path_indices)
        if store_states:
            states[:, i + 1] = x
    costs += problem.terminal_cost(x)
    return states, controls, costs, x


def simulate_forward(problem, control, grid, noise, x0):
    """Roll one path forward under the given noise and initial state."""
    _check_grid(problem, grid)
    inc = np.asarray(noise.increments, dtype=np.float64)
    if inc.shape != (grid.n_steps, problem.m):
        raise ValidationError(
            f"noise increments shape {inc.shape}, "
            f"expected {(grid.n_steps, problem.m)}")
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, problem.d)
    idx = np.array([noise.path_index])
    states, controls, costs, _ = _rollout(problem, control, grid, x0,
                                          inc[None], idx)
    return Trajectory(grid=grid, states=states[0], controls=controls[0],
                      noise=noise, pathwise_cost=float(costs[0]))


def deterministic_mode():
    """True when SOC_LAB_DETERMINISTIC=1 forces serial, fixed-order execution."""
    return os.environ.get("SOC_LAB_DETERMINISTIC", "") == "1"


def _resolve_workers(workers):
    if deterministic_mode():
        return 1
    if workers is None:
        return max(1, os.cpu_count() or 1)
    return max(1, int(workers))


def draw_batch_inputs(problem, grid, master_seed, x0_seed, start, stop,
                      workers=None):
    """Increments and initial states for paths [start, stop).

    Path p always gets the same draws for a given (master_seed, x0_seed),
    whatever the range bounds or worker count — the RNG is keyed by the
    absolute path index in fixed-size chunks.
    """
    workers = _resolve_workers(workers)
    n, m, d = grid.n_steps, problem.m, problem.d
    sqrt_dt = math.sqrt(grid.dt)
    count = stop - start
    increments = np.empty((count, n, m))
    x0 = np.empty((count, d))

    def fill(lo, hi):
        for p in range(lo, hi):
            gen = _rng.philox_generator(master_seed, p, _rng.BROWNIAN)
            increments[p - start] = gen.standard_normal((n, m))
            x0[p - start] = problem.sample_initial(x0_seed, p)

    spans = [(s, min(s + _CHUNK, stop)) for s in range(start, stop, _CHUNK)]
    if workers > 1 and len(spans) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda span: fill(*span), spans))
    else:
        for span in spans:
            fill(*span)
    increments *= sqrt_dt
    return increments, x0


def simulate_batch(problem, control, grid, master_seed, n_paths,
                   x0_seed=None, workers=None):
    """Simulate n_paths independent paths under one control.

    Brownian noise comes from per-path counter streams of `master_seed`;
    initial states from per-path streams of `x0_seed` (defaults to
    `master_seed` on a separate stream tag). Results are bit-identical for
    every `workers` value; SOC_LAB_DETERMINISTIC=1 forces workers=1.
    """
    _check_grid(problem, grid)
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    if x0_seed is None:
        x0_seed = master_seed
    increments, x0 = draw_batch_inputs(problem, grid, master_seed, x0_seed,
                                       0, n_paths, workers)
    path_indices = np.arange(n_paths)
    states, controls, costs, _ = _rollout(problem, control, grid, x0,
                                          increments, path_indices)
    return TrajectoryBatch(grid=grid, states=states, controls=controls,
                           increments=increments, master_seed=master_seed,
                           x0_seed=x0_seed, path_indices=path_indices,
                           pathwise_costs=costs)


def simulate_costs(problem, control, grid, x0, increments, start_index=0):
    """Pathwise discrete costs without storing trajectories.

    Rolls the batch from grid node `start_index` to the horizon using the
    supplied increments (B, n_steps - start_index, m) and returns
    (costs, terminal_states). The cost is the left-endpoint Riemann sum of
    the running cost plus the terminal cost — the same functional the full
    rollout produces, evaluated in the same float order.
    """
    _check_grid(problem, grid)
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    x = np.array(np.atleast_2d(x0), dtype=np.float64)
    batch = x.shape[0]
    increments = np.asarray(increments, dtype=np.float64)
    if increments.shape != (batch, n - start_index, problem.m):
        raise ValidationError(
            f"increments shape {increments.shape}, expected "
            f"{(batch, n - start_index, problem.m)}")
    path_indices = np.arange(batch)
    costs = np.zeros(batch)
    for i in range(start_index, n):
        t = float(nodes[i])
        u = np.asarray(control.evaluate(x, t), dtype=np.float64)
        costs += dt * problem.running_cost(x, u, t)
        x = euler_step(problem, x, u, t, dt, increments[:, i - start_index])
        _check_finite(x, i + 1, path_indices)
    costs += problem.terminal_cost(x)
    return costs, x


def write_trajectories_csv(batch, path):
    """Write paths as rows (path, i, t, x_*, u_*); u fields are empty at i=N."""
    if isinstance(batch, Trajectory):
        batch = [batch]
    first = batch[0]
    d = first.states.shape[1]
    k = first.controls.shape[1]
    header = (["path", "i", "t"]
              + [f"x_{j}" for j in range(d)]
              + [f"u_{j}" for j in range(k)])
    nodes = first.grid.nodes
    n = first.grid.n_steps

    def rows():
        for traj in batch:
            p = traj.noise.path_index
            for i in range(n + 1):
                u = traj.controls[i] if i < n else [None] * k
                yield [p, i, float(nodes[i]), *traj.states[i], *u]

    _io.write_csv(path, header, rows())
