"""
Euler-Maruyama simulation of small-noise controlled flows.

For a finite point set, every point is advanced with the *same* Brownian
increments, one scalar Brownian motion per mode:

    x <- x + b_u(x, t) dt + sqrt(eps) * sum_l f_l(x, t) dbeta_l

and, optionally, the first-variation system for ``J = dx_t / dx_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _rng
from .control_flow import (ControlPath, _control_slice, _field, _field_jacobian,
                           grid_index, rk4_integrate)
from .errors import BlowUpError, CapabilityError, ConfigurationError
from .kernels import BasisFamily, lattice
from .trajectory import FlowTrajectory

__all__ = [
    "NoisePath",
    "FlowTrajectory",
    "simulate_flow",
    "euler_maruyama",
    "jacobian_flow",
    "check_flow_property",
    "ball_lattice",
    "invert_flow",
    "flow_distance",
]


@dataclass
class NoisePath:
    """Per-mode Brownian increments on the grid ``t_j = j * dt``, ``j = 0..M``."""

    dt: float
    increments: np.ndarray  # (L, M), N(0, dt) entries
    seed: Optional[int] = None
    path: int = 0

    def __post_init__(self):
        self.increments = np.atleast_2d(np.asarray(self.increments, dtype=float))
        if self.dt <= 0:
            raise ConfigurationError("noise dt must be positive", key="dt")

    @property
    def n_modes(self):
        return self.increments.shape[0]

    @property
    def n_steps(self):
        return self.increments.shape[1]

    @property
    def horizon(self):
        return self.n_steps * self.dt

    @classmethod
    def generate(cls, n_modes, n_steps, dt, seed, path=0):
        inc = _rng.brownian_increments(seed, path, n_modes, n_steps, dt)
        return cls(dt, inc, seed, path)

    @classmethod
    def zero(cls, n_modes, n_steps, dt):
        return cls(dt, np.zeros((n_modes, n_steps)))

    def brownian(self):
        """Cumulative paths ``beta_l(t_j)``, shape ``(L, M + 1)``."""
        out = np.zeros((self.n_modes, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out


def _bmm(A, B):
    """Batched ``A @ B`` for small square matrices, fixed summation order."""
    d = A.shape[-1]
    out = np.zeros(np.broadcast_shapes(A.shape, B.shape))
    for j in range(d):
        out += A[..., :, j:j + 1] * B[..., j:j + 1, :]
    return out


def euler_maruyama(basis, X0, dW, dt, j0, eps, u_values=None, with_jacobians=False,
                   record=True):
    """Vectorised EM kernel.

    ``X0`` has shape ``(B, P, d)`` and ``dW`` shape ``(B, L, S)``: one noise
    sample per leading batch entry, shared by its ``P`` points.  Returns
    ``(positions, jacobians)`` where positions is ``(S + 1, B, P, d)`` when
    recording and ``(B, P, d)`` otherwise.
    """
    X = np.array(X0, dtype=float)
    B, P, d = X.shape
    L, S = dW.shape[1], dW.shape[2]
    if L != basis.n_modes:
        raise ConfigurationError(f"noise has {L} modes, basis has {basis.n_modes}", key="noise")
    sqrt_eps = math.sqrt(eps)
    J = None
    if with_jacobians:
        if not basis.has_gradients:
            raise CapabilityError("basis lacks analytic gradients; Jacobians unavailable")
        J = np.broadcast_to(np.eye(d), (B, P, d, d)).copy()
    pos = [X] if record else None
    jac = [J] if (record and with_jacobians) else None
    for k in range(S):
        t = (j0 + k) * dt
        c = None if u_values is None else u_values[:, k]
        drift = _field(basis, X, t, c)
        step = drift * dt
        if L and sqrt_eps > 0:
            fv = basis.mode_values(X, t)
            for l in range(L):
                step = step + (sqrt_eps * dW[:, l, k])[:, None, None] * fv[l]
        if with_jacobians:
            A = _field_jacobian(basis, X, t, c) * dt
            if L and sqrt_eps > 0:
                G = basis.mode_jacobians(X, t)
                for l in range(L):
                    A = A + (sqrt_eps * dW[:, l, k])[:, None, None, None] * G[l]
            J = J + _bmm(A, J)
        X = X + step
        if not np.all(np.isfinite(X)):
            raise BlowUpError(j0 + k + 1)
        if record:
            pos.append(X)
            if with_jacobians:
                jac.append(J)
    if record:
        return np.stack(pos), (np.stack(jac) if with_jacobians else None)
    return X, J


def _noise_slice(noise, basis, dt, j0, j1):
    if noise is None:
        return np.zeros((basis.n_modes, j1 - j0))
    if not math.isclose(noise.dt, dt, rel_tol=1e-12):
        raise ConfigurationError(f"noise dt {noise.dt} differs from step {dt}", key="noise.dt")
    if noise.n_modes != basis.n_modes:
        raise ConfigurationError(
            f"noise has {noise.n_modes} modes, basis has {basis.n_modes}", key="noise")
    if j1 > noise.n_steps:
        raise ConfigurationError(
            f"noise grid ends at {noise.horizon}, integration needs {j1 * dt}", key="noise")
    return noise.increments[:, j0:j1]


def simulate_flow(basis: BasisFamily, control: Optional[ControlPath], eps, points, t0, t1,
                  noise: Optional[NoisePath], with_jacobians=False, dt=None) -> FlowTrajectory:
    """Integrate the controlled, noisy flow for ``points`` on ``[t0, t1]``.

    ``control=None`` means zero control and ``noise=None`` zero noise (then
    ``dt`` must be given).  Raises :class:`ConfigurationError` if the noise
    and control grids disagree with each other or do not cover ``[t0, t1]``,
    and :class:`BlowUpError` on a non-finite position.
    """
    if eps < 0:
        raise ConfigurationError("eps must be nonnegative", key="eps")
    points = np.asarray(points, dtype=float).reshape(-1, basis.dim)
    if dt is None:
        if noise is not None:
            dt = noise.dt
        elif control is not None:
            dt = control.dt
        else:
            raise ConfigurationError("dt is required without noise or control", key="dt")
    if control is not None and not math.isclose(control.dt, dt, rel_tol=1e-12):
        raise ConfigurationError(f"control dt {control.dt} differs from step {dt}",
                                 key="control.dt")
    if t1 < t0:
        raise ConfigurationError("t1 must not precede t0", key="t1")
    basis.check_time(t0)
    basis.check_time(t1)
    j0, j1 = grid_index(t0, dt, "t0"), grid_index(t1, dt, "t1")
    dW = _noise_slice(noise, basis, dt, j0, j1)
    uv = _control_slice(control, basis, j0, j1)
    pos, jac = euler_maruyama(basis, points[None], dW[None], dt, j0, eps, uv, with_jacobians)
    times = np.arange(j0, j1 + 1) * dt
    meta = {"basis": basis.name, "control": control is not None,
            "seed": None if noise is None else noise.seed}
    return FlowTrajectory(points.copy(), times, pos[:, 0],
                          None if jac is None else jac[:, 0], float(eps), meta)


def jacobian_flow(basis, control, eps, points, t0, t1, noise, dt=None):
    """Jacobian sequence ``dphi_{t0,t}/dx`` of shape ``(M + 1, P, d, d)``."""
    return simulate_flow(basis, control, eps, points, t0, t1, noise, True, dt).jacobians


def check_flow_property(basis, control, eps, points, s, t, u, noise, dt=None):
    """Semigroup defect ``max_x |phi_{s,u}(x) - phi_{t,u}(phi_{s,t}(x))|``.

    The two legs on the right are Euler-Maruyama runs sharing ``noise``.
    For ``eps > 0`` the left side is the direct Euler-Maruyama run with the
    same increments.  For ``eps = 0`` the left side is the RK4 flow, so the
    defect measures how far the composed Euler legs sit from the
    (essentially exact) composition and scales like ``dt``.
    """
    if not s <= t <= u:
        raise ConfigurationError("need s <= t <= u", key="times")
    first = simulate_flow(basis, control, eps, points, s, t, noise, dt=dt)
    second = simulate_flow(basis, control, eps, first.endpoint, t, u, noise, dt=dt)
    step = first.times[1] - first.times[0] if first.n_steps else (
        dt or (noise.dt if noise is not None else control.dt))
    if eps == 0:
        j0, j1 = grid_index(s, step, "s"), grid_index(u, step, "u")
        uv = _control_slice(control, basis, j0, j1)
        direct = rk4_integrate(basis, uv, step, j0, np.asarray(points, dtype=float)
                               .reshape(-1, basis.dim), n_steps=j1 - j0, record=False)
    else:
        direct = simulate_flow(basis, control, eps, points, s, u, noise, dt=dt).endpoint
    return float(np.max(np.linalg.norm(direct - second.endpoint, axis=-1)))


def ball_lattice(dim, N_max, per_axis=16):
    """Union over ``N = 1..N_max`` of a ``per_axis^dim`` lattice of ``[-N, N]^dim``
    restricted to ``|x| <= N``."""
    chunks = []
    for N in range(1, N_max + 1):
        pts = lattice(np.array([[-N, N]] * dim, dtype=float), per_axis)
        chunks.append(pts[np.linalg.norm(pts, axis=1) <= N + 1e-12])
    return np.unique(np.concatenate(chunks), axis=0)


def invert_flow(traj: FlowTrajectory, basis=None, control=None, newton_iters=8):
    """Sample the inverse maps ``phi_{t0,t}^{-1}`` at ``traj.points``.

    With ``eps = 0`` and ``basis`` given, each inverse is obtained by
    integrating the controlled ODE backward from ``t`` to ``t0`` (RK4, negative
    step).  Otherwise the forward map is inverted by nearest-neighbour seeding
    and Newton iterations on its first-order (Jacobian) interpolant.
    """
    P, d = traj.points.shape
    if traj.eps == 0 and basis is not None:
        dt = traj.times[1] - traj.times[0] if traj.n_steps else 1.0
        j0 = grid_index(traj.times[0], dt)
        pos = np.empty_like(traj.positions)
        pos[0] = traj.points
        for k in range(1, traj.n_steps + 1):
            uv = _control_slice(control, basis, j0, j0 + k)
            rev = None if uv is None else uv[:, ::-1]
            pos[k] = _rk4_backward(basis, rev, dt, j0 + k, traj.points, k)
        jac = None
        if traj.jacobians is not None:
            jac = np.linalg.inv(_interp_jacobians(traj, pos))
        return FlowTrajectory(traj.points, traj.times, pos, jac, 0.0, dict(traj.meta, inverse=True))
    if traj.jacobians is None:
        raise ConfigurationError("inverting a noisy flow needs its Jacobians", key="jacobians")
    pos = np.empty_like(traj.positions)
    jac = np.empty_like(traj.jacobians)
    for k in range(traj.n_steps + 1):
        Y, Jk = traj.positions[k], traj.jacobians[k]
        seed_idx = np.argmin(np.linalg.norm(Y[None, :, :] - traj.points[:, None, :], axis=-1),
                             axis=1)
        x = traj.points[seed_idx].copy()
        node = seed_idx
        for _ in range(newton_iters):
            node = np.argmin(np.linalg.norm(x[:, None, :] - traj.points[None, :, :], axis=-1),
                             axis=1)
            approx = Y[node] + np.einsum("pij,pj->pi", Jk[node], x - traj.points[node])
            x = x - np.linalg.solve(Jk[node], (approx - traj.points)[..., None])[..., 0]
        pos[k] = x
        jac[k] = np.linalg.inv(Jk[node])
    return FlowTrajectory(traj.points, traj.times, pos, jac, traj.eps, dict(traj.meta, inverse=True))


def _rk4_backward(basis, rev_values, dt, j_end, points, n_steps):
    """Integrate ``dx/dt = b_u`` from grid index ``j_end`` back ``n_steps`` steps."""
    X = np.array(points, dtype=float)
    h = -dt
    for k in range(n_steps):
        t = (j_end - k) * dt
        c = None if rev_values is None else rev_values[:, k]
        k1 = _field(basis, X, t, c)
        k2 = _field(basis, X + 0.5 * h * k1, t + 0.5 * h, c)
        k3 = _field(basis, X + 0.5 * h * k2, t + 0.5 * h, c)
        k4 = _field(basis, X + h * k3, t + h, c)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def _interp_jacobians(traj, inv_pos):
    out = np.empty_like(traj.jacobians)
    for k in range(traj.n_steps + 1):
        node = np.argmin(np.linalg.norm(inv_pos[k][:, None, :] - traj.points[None], axis=-1),
                         axis=1)
        out[k] = traj.jacobians[k][node]
    return out


def _rho(diff_by_point, radii, N_max):
    total = 0.0
    for N in range(1, N_max + 1):
        mask = radii <= N + 1e-12
        if not np.any(mask):
            continue
        s = float(np.max(diff_by_point[mask]))
        total += 0.5**N * s / (1.0 + s)
    return total


def _lambda(A, B, JA, JB, radii, m, N_max):
    val = _rho(np.linalg.norm(A - B, axis=-1), radii, N_max)
    if m >= 1:
        d = A.shape[-1]
        for i in range(d):
            val += _rho(np.linalg.norm(JA[..., :, i] - JB[..., :, i], axis=-1), radii, N_max)
    return val


def flow_distance(flowA: FlowTrajectory, flowB: FlowTrajectory, m=0, N_max=4,
                  inverse_a: Optional[FlowTrajectory] = None,
                  inverse_b: Optional[FlowTrajectory] = None):
    """Sampled ``sup_t d_m(phi_t, psi_t)`` with the ball sum truncated at ``N_max``.

    Both flows must live on the same sample points and time grid.  Inverse
    samples default to :func:`invert_flow` of each flow.
    """
    if m not in (0, 1):
        raise ConfigurationError("derivative order must be 0 or 1", key="m")
    if (flowA.points.shape != flowB.points.shape
            or not np.array_equal(flowA.points, flowB.points)):
        raise ConfigurationError("flows are sampled on different points", key="points")
    if flowA.times.shape != flowB.times.shape or not np.allclose(flowA.times, flowB.times):
        raise ConfigurationError("flows are sampled on different time grids", key="times")
    if m == 1 and (flowA.jacobians is None or flowB.jacobians is None):
        raise ConfigurationError("m = 1 needs Jacobians on both flows", key="jacobians")
    inv_a = inverse_a if inverse_a is not None else invert_flow(flowA)
    inv_b = inverse_b if inverse_b is not None else invert_flow(flowB)
    radii = np.linalg.norm(flowA.points, axis=-1)
    best = 0.0
    for k in range(flowA.times.size):
        ja = None if flowA.jacobians is None else flowA.jacobians[k]
        jb = None if flowB.jacobians is None else flowB.jacobians[k]
        iva = None if inv_a.jacobians is None else inv_a.jacobians[k]
        ivb = None if inv_b.jacobians is None else inv_b.jacobians[k]
        val = (_lambda(flowA.positions[k], flowB.positions[k], ja, jb, radii, m, N_max)
               + _lambda(inv_a.positions[k], inv_b.positions[k], iva, ivb, radii, m, N_max))
        best = max(best, val)
    return best
