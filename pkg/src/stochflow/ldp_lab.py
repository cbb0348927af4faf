"""
Monte Carlo check of the Laplace principle for endpoint functionals.

For a bounded-below functional ``F`` of the terminal point vector,

    -eps log E[exp(-F(X^eps_T) / eps)]  ->  inf_u { F(phi^{0,u}_T) + cost(u) }

as ``eps -> 0``.  :func:`laplace_estimate` computes the left side by plain
Monte Carlo with log-sum-exp stabilisation; :func:`variational_value`
computes the right side with the same adjoint machinery as the rate
function.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng
from .control_flow import ControlPath, rk4_integrate, rk4_vjp
from .errors import ConfigurationError, UnderflowError
from .flow_sim import euler_maruyama
from .kernels import BasisFamily
from .rate_fn import minimize_control, multistart_controls

__all__ = [
    "Functional",
    "ConstantFunctional",
    "QuadraticFunctional",
    "LogQuadraticFunctional",
    "FUNCTIONALS",
    "functional_from_config",
    "LaplaceEstimate",
    "laplace_estimate",
    "log_mean_exp",
    "sample_endpoints",
    "VariationalResult",
    "variational_value",
    "ConvergenceReport",
    "ldp_convergence_report",
]


class Functional:
    """Scalar functional of endpoint arrays ``Z`` of shape ``(..., P, d)``."""

    lower_bound = -math.inf
    name = "functional"

    def __call__(self, Z):
        raise NotImplementedError

    def grad(self, Z):
        """Gradient with respect to ``Z``; central differences unless overridden."""
        Z = np.asarray(Z, dtype=float)
        out = np.zeros(Z.shape)
        h = 1e-6
        flat = Z.reshape(-1)
        gflat = out.reshape(-1)
        for i in range(flat.size):
            zp = flat.copy()
            zm = flat.copy()
            zp[i] += h
            zm[i] -= h
            gflat[i] = (self(zp.reshape(Z.shape)) - self(zm.reshape(Z.shape))) / (2 * h)
        return out

    def params(self):
        return {}


class ConstantFunctional(Functional):
    name = "constant"

    def __init__(self, value=0.0):
        self.value = float(value)
        self.lower_bound = self.value

    def __call__(self, Z):
        Z = np.asarray(Z)
        return np.full(Z.shape[:-2], self.value) if Z.ndim > 2 else self.value

    def grad(self, Z):
        return np.zeros(np.shape(Z))

    def params(self):
        return {"value": self.value}


class QuadraticFunctional(Functional):
    """``const + weight/2 * sum_{p,i} (Z - center)^2``."""

    name = "quadratic"

    def __init__(self, center, weight=1.0, const=0.0):
        self.center = np.asarray(center, dtype=float)
        self.weight = float(weight)
        self.const = float(const)
        if self.weight < 0:
            raise ConfigurationError("quadratic weight must be nonnegative", key="weight")
        self.lower_bound = self.const

    def __call__(self, Z):
        diff = np.asarray(Z, dtype=float) - self.center
        return self.const + 0.5 * self.weight * np.sum(diff**2, axis=(-2, -1))

    def grad(self, Z):
        return self.weight * (np.asarray(Z, dtype=float) - self.center)

    def params(self):
        return {"center": self.center.tolist(), "weight": self.weight, "const": self.const}


def _safe_log(z, floor):
    """``log z`` for ``z >= floor``, continued by its tangent line below."""
    z = np.asarray(z, dtype=float)
    zc = np.maximum(z, floor)
    val = np.where(z >= floor, np.log(zc), math.log(floor) + (z - floor) / floor)
    der = np.where(z >= floor, 1.0 / zc, 1.0 / floor)
    return val, der


class LogQuadraticFunctional(Functional):
    """``weight/2 * sum (log Z - center)^2`` with a C^1 extension below ``floor``."""

    name = "log_quadratic"
    lower_bound = 0.0

    def __init__(self, center, weight=1.0, floor=1e-3):
        self.center = np.asarray(center, dtype=float)
        self.weight = float(weight)
        self.floor = float(floor)

    def __call__(self, Z):
        lz, _ = _safe_log(Z, self.floor)
        return 0.5 * self.weight * np.sum((lz - self.center) ** 2, axis=(-2, -1))

    def grad(self, Z):
        lz, der = _safe_log(Z, self.floor)
        return self.weight * (lz - self.center) * der

    def params(self):
        return {"center": self.center.tolist(), "weight": self.weight, "floor": self.floor}


FUNCTIONALS = {
    "zero": lambda **kw: ConstantFunctional(0.0),
    "constant": ConstantFunctional,
    "quadratic": QuadraticFunctional,
    "log_quadratic": LogQuadraticFunctional,
}


def functional_from_config(cfg: dict) -> Functional:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind not in FUNCTIONALS:
        raise ConfigurationError(f"unknown functional {kind!r}", key="functional.kind")
    try:
        return FUNCTIONALS[kind](**cfg)
    except TypeError as exc:
        raise ConfigurationError(str(exc), key="functional") from exc


def log_mean_exp(values):
    """``log(mean(exp(values)))`` computed stably."""
    values = np.asarray(values, dtype=float)
    top = float(np.max(values))
    # mean of exp(0) entries is exactly 1, so constant inputs give exact results
    return top + math.log(float(np.mean(np.exp(values - top))))


@dataclass
class LaplaceEstimate:
    value: float
    stderr: float
    f_min: float
    f_max: float
    ess: float
    n_samples: int
    eps: float

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("eps", "value", "stderr", "f_min", "f_max", "ess", "n_samples")}


def _chunks(n, chunk_size):
    # block layout depends only on n, never on the worker count
    return [(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]


def sample_endpoints(basis, eps, points, n_steps, dt, seed, n_samples, threads=1,
                     chunk_size=4096, control=None):
    """Terminal points of ``n_samples`` independent flows, shape ``(n, P, d)``.

    Sample ``k`` always uses the increments keyed by ``(seed, k)``, so the
    result does not depend on ``threads`` or ``chunk_size``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, basis.dim)
    L = basis.n_modes
    uv = None if control is None else control.values[:, :n_steps]

    def run(span):
        a, b = span
        dW = _rng.brownian_batch(seed, range(a, b), L, n_steps, dt)
        X0 = np.broadcast_to(points, (b - a,) + points.shape)
        end, _ = euler_maruyama(basis, X0, dW, dt, 0, eps, uv, record=False)
        return end

    spans = _chunks(n_samples, chunk_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    return np.concatenate(parts, axis=0)


def _steps(T, dt):
    M = int(round(T / dt))
    if M < 1 or abs(M * dt - T) > 1e-9 * max(1.0, T):
        raise ConfigurationError(f"horizon {T} is not a multiple of dt {dt}", key="dt")
    return M


def laplace_from_values(values, eps, min_ess=2.0):
    """Laplace functional ``-eps log mean exp(-values/eps)`` with a delta-method stderr."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if not np.all(np.isfinite(values)):
        raise ConfigurationError("functional returned non-finite values", key="functional")
    f_min = float(values.min())
    f_max = float(values.max())
    if eps == 0:
        return LaplaceEstimate(f_min, 0.0, f_min, f_max, 1.0, n, eps)
    shifted = -(values - f_min) / eps
    w = np.exp(shifted)
    mean_w = float(np.mean(w))
    ess = float(np.sum(w) ** 2 / np.sum(w**2))
    if mean_w == 0.0 or ess < min(min_ess, n):
        raise UnderflowError(
            f"importance weights degenerate at eps={eps} (ESS {ess:.2f}); "
            "use a larger eps or an importance shift")
    value = f_min - eps * log_mean_exp(shifted)
    sd = float(np.std(w, ddof=1)) if n > 1 else 0.0
    stderr = eps * sd / (mean_w * math.sqrt(n))
    return LaplaceEstimate(value, stderr, f_min, f_max, ess, n, eps)


def laplace_estimate(basis: BasisFamily, eps, n_samples, F: Functional, points, T, dt, seed,
                     threads=1, min_samples=100) -> LaplaceEstimate:
    """Monte Carlo ``-eps log E exp(-F(X_T)/eps)`` over independent flows."""
    if n_samples < min_samples:
        raise ConfigurationError(f"need at least {min_samples} samples", key="n_samples")
    if eps < 0:
        raise ConfigurationError("eps must be nonnegative", key="eps")
    M = _steps(T, dt)
    Z = sample_endpoints(basis, eps, points, M, dt, seed, n_samples, threads)
    values = np.asarray(F(Z), dtype=float).reshape(n_samples)
    if np.min(values) < F.lower_bound - 1e-12:
        raise ConfigurationError("functional went below its declared lower bound",
                                 key="functional")
    return laplace_from_values(values, eps)


@dataclass
class VariationalResult:
    value: float
    u_star: ControlPath
    f_value: float
    cost: float
    converged: bool
    endpoint: np.ndarray = field(repr=False, default=None)


def variational_value(basis: BasisFamily, F: Functional, points, T, n_steps=20, multistart=5,
                      seed=0, tol=1e-9, maxiter=2000, init_scale=0.5) -> VariationalResult:
    """``inf_u { F(phi^{0,u}_T(points)) + cost(u) }`` over piecewise-constant ``u``."""
    points = np.asarray(points, dtype=float).reshape(-1, basis.dim)
    dt = T / n_steps
    L = basis.n_modes
    if L == 0:
        end = rk4_integrate(basis, None, dt, 0, points, n_steps=n_steps, record=False)
        fv = float(F(end))
        return VariationalResult(fv, ControlPath(np.zeros((0, n_steps)), dt), fv, 0.0, True, end)

    def objective(uv):
        traj = rk4_integrate(basis, uv, dt, 0, points)
        fv = float(F(traj[-1]))
        grad, _ = rk4_vjp(basis, uv, dt, 0, traj, F.grad(traj[-1]))
        return fv + 0.5 * float(np.sum(uv**2)) * dt, grad + uv * dt

    best = None
    for k, u0 in enumerate(multistart_controls(L, n_steps, multistart, seed, init_scale)):
        u, val, ok = minimize_control(objective, u0, tol, maxiter)
        if best is None or val < best[1]:
            best = (u, val, ok)
    u, val, ok = best
    end = rk4_integrate(basis, u, dt, 0, points, record=False)
    cost = 0.5 * float(np.sum(u**2)) * dt
    return VariationalResult(val, ControlPath(u, dt), float(F(end)), cost, ok, end)


@dataclass
class ConvergenceReport:
    rows: list
    variational: float
    columns: tuple = ("eps", "estimate", "stderr", "gap")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([repr(float(r[c])) for c in self.columns])
        return buf.getvalue()

    def series_json(self):
        return json.dumps({"x": [r["eps"] for r in self.rows],
                           "y": [r["gap"] for r in self.rows],
                           "x_label": "eps", "y_label": "gap",
                           "variational_value": self.variational}, indent=2)


def ldp_convergence_report(basis, F, eps_list, n_samples, seed, points, T, dt,
                           threads=1, variational: Optional[float] = None,
                           n_control_steps=20) -> ConvergenceReport:
    """Rows ``(eps, estimate, stderr, |estimate - variational value|)``."""
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise ConfigurationError("eps_list needs at least three entries", key="eps_list")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError("eps_list must be strictly decreasing", key="eps_list")
    if variational is None:
        variational = variational_value(basis, F, points, T, n_control_steps, seed=seed).value
    rows = []
    for eps in eps_list:
        est = laplace_estimate(basis, eps, n_samples, F, points, T, dt, seed, threads)
        rows.append({"eps": eps, "estimate": est.value, "stderr": est.stderr,
                     "gap": abs(est.value - variational)})
    return ConvergenceReport(rows, variational)
