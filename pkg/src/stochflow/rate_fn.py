"""
Endpoint projections of the large-deviations rate function.

For starts ``x_p`` and targets ``y_p`` the projected rate is the least
control energy steering the deterministic controlled flow from every
``x_p`` to its ``y_p`` at time ``T``:

    I(x -> y) = inf { 1/2 int_0^T |u|^2 dt : phi^{0,u}_T(x_p) = y_p for all p }

It is computed by quadratic-penalty continuation, L-BFGS with discrete
adjoint gradients, and a deterministic multistart.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import _rng
from .control_flow import ControlPath, control_cost, rk4_integrate, rk4_vjp
from .errors import ConfigurationError, SizeError
from .kernels import BasisFamily

__all__ = [
    "EndpointProblem",
    "RateResult",
    "penalized_objective",
    "endpoint_rate",
    "ScanResult",
    "rate_lower_bound_scan",
    "multistart_controls",
    "minimize_control",
]

DEFAULT_SCHEDULE = (1e1, 1e2, 1e3, 1e4)
MAX_LATTICE = 200_000


@dataclass
class EndpointProblem:
    basis: BasisFamily
    starts: np.ndarray
    targets: np.ndarray
    T: float = 1.0
    n_steps: int = 20
    penalty_schedule: Sequence[float] = DEFAULT_SCHEDULE
    multistart: int = 5
    tol: float = 1e-6
    tol_endpoint: float = 1e-3
    seed: int = 0
    init_scale: float = 0.5
    maxiter: int = 2000

    def __post_init__(self):
        d = self.basis.dim
        self.starts = np.asarray(self.starts, dtype=float).reshape(-1, d)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, d)
        if self.starts.shape[0] < 1:
            raise ConfigurationError("need at least one start point", key="starts")
        if self.starts.shape != self.targets.shape:
            raise ConfigurationError("starts and targets differ in shape", key="targets")
        if self.T <= 0 or self.T > self.basis.T * (1 + 1e-12):
            raise ConfigurationError(f"horizon {self.T} outside (0, {self.basis.T}]", key="T")
        if self.n_steps < 1:
            raise ConfigurationError("need at least one time step", key="n_steps")
        sched = list(self.penalty_schedule)
        if not sched or any(w <= 0 for w in sched) or sched != sorted(sched):
            raise ConfigurationError("penalty schedule must be positive and increasing",
                                     key="penalty_schedule")
        if self.multistart < 1:
            raise ConfigurationError("multistart must be at least 1", key="multistart")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def n_modes(self):
        return self.basis.n_modes


@dataclass
class RateResult:
    value: float
    u_star: ControlPath
    residual: float
    converged: bool
    reachable: bool = True
    grad_norm: float = float("nan")
    penalty_weight: float = float("nan")
    start_index: int = 0
    starts: list = field(default_factory=list)

    def to_dict(self):
        return {"value": self.value, "residual": self.residual, "converged": self.converged,
                "reachable": self.reachable, "grad_norm": self.grad_norm,
                "penalty_weight": self.penalty_weight, "start_index": self.start_index,
                "starts": self.starts}


def penalized_objective(problem: EndpointProblem, u_values, weight):
    """``J_pen(u) = cost(u) + w/2 sum_p |phi_T(x_p) - y_p|^2`` and its gradient."""
    dt = problem.dt
    traj = rk4_integrate(problem.basis, u_values, dt, 0, problem.starts)
    miss = traj[-1] - problem.targets
    cost = 0.5 * float(np.sum(u_values**2)) * dt
    val = cost + 0.5 * weight * float(np.sum(miss**2))
    grad, _ = rk4_vjp(problem.basis, u_values, dt, 0, traj, weight * miss)
    return val, grad + u_values * dt, traj[-1]


def multistart_controls(n_modes, n_steps, count, seed, scale):
    """Zero control first, then seed-derived Gaussian perturbations of it."""
    starts = [np.zeros((n_modes, n_steps))]
    for k in range(1, count):
        rng = _rng.path_generator(seed, _rng.AUX_PATH_BASE + k)
        starts.append(scale * rng.standard_normal((n_modes, n_steps)))
    return starts


def minimize_control(fun, u0, tol, maxiter):
    """L-BFGS on a flattened control; ``fun(u) -> (value, grad)`` in matrix shape."""
    shape = u0.shape

    def wrapped(flat):
        v, g = fun(flat.reshape(shape))
        return v, g.ravel()

    res = minimize(wrapped, u0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": tol, "ftol": 1e-15, "maxcor": 30})
    return res.x.reshape(shape), float(res.fun), bool(res.success)


def _run_start(problem, u0):
    u = u0
    weight = problem.penalty_schedule[0]
    for weight in problem.penalty_schedule:
        u, _, _ = minimize_control(lambda v: penalized_objective(problem, v, weight)[:2],
                                   u, problem.tol, problem.maxiter)
    val, grad, end = penalized_objective(problem, u, weight)
    residual = float(np.max(np.linalg.norm(end - problem.targets, axis=-1)))
    return {"u": u, "objective": val, "grad_norm": float(np.max(np.abs(grad))),
            "residual": residual, "weight": weight}


def endpoint_rate(problem: EndpointProblem, threads: int = 1) -> RateResult:
    """Projected rate value with the optimal piecewise-constant control.

    ``converged`` requires the endpoint residual within ``tol_endpoint`` and
    the final projected gradient within ``tol``.  If no start gets the
    residual below ``10 * tol_endpoint`` the target is flagged unreachable
    (the rate is then likely infinite) and the best finite attempt is still
    reported.
    """
    if problem.n_modes == 0:
        end = rk4_integrate(problem.basis, None, problem.dt, 0, problem.starts,
                            n_steps=problem.n_steps, record=False)
        residual = float(np.max(np.linalg.norm(end - problem.targets, axis=-1)))
        ok = residual <= problem.tol_endpoint
        return RateResult(0.0, ControlPath(np.zeros((0, problem.n_steps)), problem.dt),
                          residual, ok, ok, 0.0)
    inits = multistart_controls(problem.n_modes, problem.n_steps, problem.multistart,
                                problem.seed, problem.init_scale)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(lambda u0: _run_start(problem, u0), inits))
    else:
        runs = [_run_start(problem, u0) for u0 in inits]
    # lowest penalized objective wins, ties to the lower start index
    best_idx = min(range(len(runs)), key=lambda i: (runs[i]["objective"], i))
    best = runs[best_idx]
    u_star = ControlPath(best["u"], problem.dt)
    reachable = min(r["residual"] for r in runs) <= 10 * problem.tol_endpoint
    converged = (best["residual"] <= problem.tol_endpoint
                 and best["grad_norm"] <= problem.tol)
    summary = [{"objective": r["objective"], "residual": r["residual"],
                "cost": 0.5 * float(np.sum(r["u"] ** 2)) * problem.dt} for r in runs]
    return RateResult(control_cost(u_star), u_star, best["residual"], bool(converged),
                      bool(reachable), best["grad_norm"], best["weight"], best_idx, summary)


@dataclass
class ScanResult:
    table: np.ndarray      # rows: u_1..u_L, cost, residual
    best_value: float
    best_u: np.ndarray
    best_residual: float
    feasible: bool


def rate_lower_bound_scan(problem: EndpointProblem, levels, residual_tol=None) -> ScanResult:
    """Evaluate cost and endpoint miss over a lattice of constant-in-time controls.

    ``levels`` is either one 1-D array used for every mode or a list of
    per-mode arrays.  The best lattice point is the cheapest one whose
    residual is within ``residual_tol`` (default ``problem.tol_endpoint``); it
    certifies an upper bound on the projected rate.  If no lattice point is
    feasible, the smallest-residual point is returned with ``feasible=False``.
    """
    L = problem.n_modes
    if L > 3:
        raise SizeError(f"lattice scans are limited to L <= 3 modes, got {L}")
    levels = np.asarray(levels, dtype=float)
    per_mode = [levels] * L if levels.ndim == 1 else [np.asarray(v, dtype=float) for v in levels]
    size = int(np.prod([len(v) for v in per_mode])) if L else 1
    if size > MAX_LATTICE:
        raise SizeError(f"lattice of {size} points exceeds the limit {MAX_LATTICE}")
    tol = problem.tol_endpoint if residual_tol is None else residual_tol
    rows = []
    for combo in itertools.product(*per_mode):
        c = np.asarray(combo, dtype=float)
        uv = np.repeat(c[:, None], problem.n_steps, axis=1)
        end = rk4_integrate(problem.basis, uv if L else None, problem.dt, 0, problem.starts,
                            n_steps=problem.n_steps, record=False)
        residual = float(np.max(np.linalg.norm(end - problem.targets, axis=-1)))
        cost = 0.5 * float(np.sum(c**2)) * problem.T
        rows.append(list(c) + [cost, residual])
    table = np.asarray(rows, dtype=float).reshape(len(rows), L + 2)
    feasible = table[:, -1] <= tol
    if np.any(feasible):
        idx = int(np.flatnonzero(feasible)[np.argmin(table[feasible, -2])])
    else:
        idx = int(np.argmin(table[:, -1]))
    return ScanResult(table, float(table[idx, -2]), table[idx, :L].copy(),
                      float(table[idx, -1]), bool(np.any(feasible)))
