"""
Deterministic controlled flows.

A control ``u`` is piecewise constant on a uniform grid ``t_j = j * dt``.  It
turns the mode family into the controlled drift

    b_u(x, t) = b(x, t) + sum_l u_l(t) f_l(x, t),

whose ODE flow is integrated with the classical fourth-order Runge-Kutta
method.  :func:`rk4_vjp` differentiates that exact recursion (discrete
adjoint), so gradients of anything computed from :func:`rk4_integrate`
endpoints are exact for the discrete problem.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BlowUpError, ConfigurationError, DomainError
from .kernels import BasisFamily
from .trajectory import FlowTrajectory

__all__ = [
    "ControlPath",
    "grid_index",
    "controlled_drift",
    "rk4_integrate",
    "rk4_vjp",
    "solve_controlled_flow",
    "accumulate_F0u",
    "control_cost",
]

GRID_TOL = 1e-9


def grid_index(t, dt, key="t"):
    """Index ``j`` with ``t == j * dt``; raises if ``t`` is off the grid."""
    j = int(round(t / dt))
    if abs(t - j * dt) > GRID_TOL * max(1.0, abs(t)):
        raise ConfigurationError(f"time {t} is not on the grid of step {dt}", key=key)
    return j


@dataclass
class ControlPath:
    """Piecewise-constant control: ``u_l(t) = values[l, j]`` on ``[t_j, t_{j+1})``."""

    values: np.ndarray
    dt: float
    bound_N: Optional[float] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.dt = float(self.dt)
        if self.dt <= 0:
            raise ConfigurationError("control dt must be positive", key="dt")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("control values must be finite", key="values")
        if self.bound_N is not None and 2.0 * control_cost(self) > self.bound_N * (1 + 1e-12):
            raise ConfigurationError(
                f"integral of |u|^2 = {2 * control_cost(self):.6g} exceeds bound {self.bound_N}",
                key="bound_N")

    @property
    def n_modes(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    @property
    def horizon(self):
        return self.n_steps * self.dt

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt

    @classmethod
    def zero(cls, n_modes, n_steps, dt):
        return cls(np.zeros((n_modes, n_steps)), dt)

    @classmethod
    def constant(cls, levels, n_steps, dt):
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        return cls(np.repeat(levels[:, None], n_steps, axis=1), dt)

    def scaled(self, factor):
        return ControlPath(factor * self.values, self.dt)

    def index(self, t):
        if t < -GRID_TOL or t > self.horizon * (1 + 1e-12) + GRID_TOL:
            raise DomainError(f"time {t} outside control grid [0, {self.horizon}]")
        return min(max(int(math.floor(t / self.dt + 1e-12)), 0), self.n_steps - 1)

    def at(self, t):
        return self.values[:, self.index(t)]

    def to_csv(self, path=None):
        buf = io.StringIO()
        header = ",".join(["t"] + [f"u_{l + 1}" for l in range(self.n_modes)])
        table = np.column_stack([self.times, self.values.T])
        np.savetxt(buf, table, fmt="%.17g", delimiter=",", header=header, comments="")
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w") as fh:
            fh.write(text)

    @classmethod
    def from_csv(cls, path_or_text, dt=None):
        text = path_or_text
        if "\n" not in str(path_or_text):
            with open(path_or_text) as fh:
                text = fh.read()
        table = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        t = table[:, 0]
        if dt is None:
            if t.size < 2:
                raise ConfigurationError("need dt for a single-row control", key="dt")
            dt = float(t[1] - t[0])
        if not np.allclose(t, np.arange(t.size) * dt, rtol=0, atol=1e-9):
            raise ConfigurationError("control rows are not on a uniform grid from 0", key="t")
        return cls(table[:, 1:].T.copy(), dt)


def control_cost(u: ControlPath) -> float:
    """``1/2 int_0^T |u(s)|^2 ds`` (exact for piecewise-constant controls)."""
    return 0.5 * float(np.sum(u.values**2)) * u.dt


def controlled_drift(basis: BasisFamily, u: Optional[ControlPath], x, t):
    """``b(x, t) + sum_l u_l(t) f_l(x, t)``."""
    basis.check_time(t)
    x = np.asarray(x, dtype=float)
    out = basis.drift_value(x, t)
    if u is None or basis.n_modes == 0:
        return out
    _check_modes(basis, u)
    coeff = u.at(t)
    fv = basis.mode_values(x, t)
    for l in range(basis.n_modes):
        out = out + coeff[l] * fv[l]
    return out


def _check_modes(basis, u):
    if u.n_modes != basis.n_modes:
        raise ConfigurationError(
            f"control has {u.n_modes} modes, basis has {basis.n_modes}", key="control")


def _field(basis, x, t, coeff):
    out = basis.drift_value(x, t)
    if coeff is not None and basis.n_modes:
        fv = basis.mode_values(x, t)
        for l in range(basis.n_modes):
            out = out + coeff[l] * fv[l]
    return out


def _field_jacobian(basis, x, t, coeff):
    out = basis.drift_jacobian(x, t)
    if coeff is not None and basis.n_modes:
        g = basis.mode_jacobians(x, t)
        for l in range(basis.n_modes):
            out = out + coeff[l] * g[l]
    return out


def _matvec_T(A, v):
    """``A^T v`` for stacks of small matrices, with a fixed summation order."""
    d = A.shape[-1]
    out = np.zeros(v.shape)
    for i in range(d):
        out += A[..., i, :] * v[..., i:i + 1]
    return out


def rk4_integrate(basis, u_values, dt, j0, X0, n_steps=None, record=True):
    """RK4 for ``dx/dt = b_u(x, t)`` from grid index ``j0``.

    ``u_values`` is ``(L, S)`` (or ``None`` for zero control) and holds the
    control for steps ``j0 .. j0 + S - 1``.  Returns the ``(S + 1, ..., d)``
    trajectory if ``record`` else the endpoint.
    """
    X = np.array(X0, dtype=float)
    S = u_values.shape[1] if u_values is not None else int(n_steps)
    h = dt
    traj = [X] if record else None
    for k in range(S):
        t = (j0 + k) * dt
        c = None if u_values is None else u_values[:, k]
        k1 = _field(basis, X, t, c)
        k2 = _field(basis, X + 0.5 * h * k1, t + 0.5 * h, c)
        k3 = _field(basis, X + 0.5 * h * k2, t + 0.5 * h, c)
        k4 = _field(basis, X + h * k3, t + h, c)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise BlowUpError(j0 + k + 1)
        if record:
            traj.append(X)
    return np.stack(traj) if record else X


def rk4_vjp(basis, u_values, dt, j0, traj, cotangent):
    """Reverse pass of :func:`rk4_integrate`.

    ``traj`` is the recorded forward trajectory and ``cotangent`` the
    gradient of a scalar objective with respect to the endpoint (same shape
    as one trajectory slice).  Returns ``(grad_u, grad_x0)`` where
    ``grad_u[l, k]`` is the derivative with respect to ``u_values[l, k]``,
    summed over all points.
    """
    L, S = u_values.shape
    h = dt
    lam = np.array(cotangent, dtype=float)
    grad_u = np.zeros((L, S))

    def stage(xs, ts, c, a, k):
        # accumulate d/du through f_l(xs) and return G(xs)^T a
        if L:
            fv = basis.mode_values(xs, ts)
            for l in range(L):
                grad_u[l, k] += np.sum(fv[l] * a)
        return _matvec_T(_field_jacobian(basis, xs, ts, c), a)

    for k in range(S - 1, -1, -1):
        t = (j0 + k) * dt
        c = u_values[:, k]
        X = traj[k]
        k1 = _field(basis, X, t, c)
        x2 = X + 0.5 * h * k1
        k2 = _field(basis, x2, t + 0.5 * h, c)
        x3 = X + 0.5 * h * k2
        k3 = _field(basis, x3, t + 0.5 * h, c)
        x4 = X + h * k3
        l4 = stage(x4, t + h, c, (h / 6.0) * lam, k)
        l3 = stage(x3, t + 0.5 * h, c, (h / 3.0) * lam + h * l4, k)
        l2 = stage(x2, t + 0.5 * h, c, (h / 3.0) * lam + 0.5 * h * l3, k)
        l1 = stage(X, t, c, (h / 6.0) * lam + 0.5 * h * l2, k)
        lam = lam + l4 + l3 + l2 + l1
    return grad_u, lam


def _control_slice(u, basis, j0, j1, key="control"):
    if u is None:
        return None
    _check_modes(basis, u)
    if j1 > u.n_steps:
        raise ConfigurationError(
            f"control grid ends at {u.horizon}, integration needs {j1 * u.dt}", key=key)
    return u.values[:, j0:j1]


def solve_controlled_flow(basis: BasisFamily, u: Optional[ControlPath], points, t0, t1,
                          dt=None) -> FlowTrajectory:
    """Trajectories of ``dx/dt = b_u(x, t)`` on ``[t0, t1]`` (``eps = 0``)."""
    points = np.asarray(points, dtype=float).reshape(-1, basis.dim)
    if dt is None:
        if u is None:
            raise ConfigurationError("dt is required without a control", key="dt")
        dt = u.dt
    elif u is not None and not math.isclose(dt, u.dt, rel_tol=1e-12):
        raise ConfigurationError(f"dt {dt} differs from control dt {u.dt}", key="dt")
    if t1 < t0:
        raise ConfigurationError("t1 must not precede t0", key="t1")
    basis.check_time(t0)
    basis.check_time(t1)
    j0, j1 = grid_index(t0, dt, "t0"), grid_index(t1, dt, "t1")
    uv = _control_slice(u, basis, j0, j1)
    pos = rk4_integrate(basis, uv, dt, j0, points, n_steps=j1 - j0)
    times = np.arange(j0, j1 + 1) * dt
    return FlowTrajectory(points.copy(), times, pos, None, 0.0,
                          {"basis": basis.name, "control": u is not None, "seed": None})


def accumulate_F0u(basis: BasisFamily, u: ControlPath, x, t):
    """``int_0^t b_u(x, s) ds + int_0^t b(x, s) ds`` at a fixed point ``x``.

    Uses Simpson's rule per control step (what RK4 reduces to for an
    ``x``-independent integrand); a final partial step handles off-grid ``t``.
    """
    x = np.asarray(x, dtype=float)
    basis.check_time(t)
    _check_modes(basis, u)
    if t < 0 or t > u.horizon * (1 + 1e-12) + GRID_TOL:
        raise DomainError(f"time {t} outside control grid [0, {u.horizon}]")
    total = np.zeros(x.shape)
    full = min(int(math.floor(t / u.dt + 1e-9)), u.n_steps)
    spans = [(j * u.dt, u.dt, j) for j in range(full)]
    rest = t - full * u.dt
    if rest > GRID_TOL and full < u.n_steps:
        spans.append((full * u.dt, rest, full))
    for s0, h, j in spans:
        c = u.values[:, j]
        g0 = _field(basis, x, s0, c)
        gm = _field(basis, x, s0 + 0.5 * h, c)
        g1 = _field(basis, x, s0 + h, c)
        total = total + (h / 6.0) * (g0 + 4.0 * gm + g1)
    return total
