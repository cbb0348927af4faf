"""
Diffeomorphic template matching on the open unit box.

A velocity field ``theta(x, t) = sum_l u_l(t) phi_l(x)`` built from modes that
vanish on the boundary transports points by the ODE ``d eta/dt = theta``;
``h = eta_{0,1}`` deforms the template into ``T(h(x))``.  Matching data ``d``
given on a cell partition minimises

    J_d(u) = 1/2 int_0^1 |u|^2 dt + 1/2 int_O |T(h(x)) - Y_d(x)|^2 dx,

where ``Y_d`` equals ``d_i`` on cell ``i``.  The modes are taken to be
orthonormal in the velocity Hilbert space, so the first term is exactly the
control cost.

The posterior under the prior flow ``d psi = sqrt(eps) sum_l phi_l(psi) dbeta_l``
and additive Gaussian data noise is probed through its Laplace functional,
estimated by reweighting prior draws.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng
from .control_flow import ControlPath, control_cost, rk4_integrate, rk4_vjp
from .errors import (ConfigurationError, ConstructionError, IntegrityError,
                     MissingCacheError, PartitionError, UnderflowError)
from .kernels import BasisFamily, lattice, make_gaussian_bump_basis
from .ldp_lab import ConstantFunctional, Functional, log_mean_exp, sample_endpoints
from .rate_fn import minimize_control, multistart_controls

__all__ = [
    "Template",
    "TEMPLATES",
    "template_from_config",
    "load_raster_template",
    "CellPartition",
    "MatchProblem",
    "MatchResult",
    "transport",
    "transport_template",
    "data_image",
    "objective_Jd",
    "solve_match",
    "compute_lambda_d",
    "synthesize_data",
    "LatticeDistanceFunctional",
    "posterior_laplace_check",
    "rate_Id",
    "make_imaging_basis",
]

UNIT_BOX_TOL = 1e-9


# --------------------------------------------------------------------------- templates

@dataclass
class Template:
    """Bounded scalar image on the closed unit box with an analytic gradient."""

    dim: int
    fn: Callable
    grad_fn: Callable
    bound: float
    name: str = "template"
    spec: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def grad(self, x):
        return self.grad_fn(np.asarray(x, dtype=float))


def _affine(dim, coeffs, offset=0.0):
    a = np.asarray(coeffs, dtype=float).reshape(dim)
    bound = abs(offset) + float(np.sum(np.abs(a)))

    def fn(x):
        out = np.full(x.shape[:-1], float(offset))
        for j in range(dim):
            out = out + a[j] * x[..., j]
        return out

    return Template(dim, fn, lambda x: np.broadcast_to(a, x.shape).copy(), bound, "affine",
                    {"kind": "affine", "dim": dim, "coeffs": a.tolist(), "offset": offset})


def _gaussian(dim, center, width, height=1.0, offset=0.0):
    c = np.asarray(center, dtype=float).reshape(dim)

    def fn(x):
        r2 = np.sum((x - c) ** 2, axis=-1)
        return offset + height * np.exp(-r2 / (2 * width**2))

    def grad(x):
        g = height * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * width**2))
        return -g[..., None] * (x - c) / width**2

    return Template(dim, fn, grad, abs(offset) + abs(height), "gaussian",
                    {"kind": "gaussian", "dim": dim, "center": c.tolist(), "width": width,
                     "height": height, "offset": offset})


def _edge(dim, position, steepness, axis=0, low=0.0, high=1.0):
    def fn(x):
        return low + (high - low) * 0.5 * (1 + np.tanh(steepness * (x[..., axis] - position)))

    def grad(x):
        s = np.tanh(steepness * (x[..., axis] - position))
        out = np.zeros(x.shape)
        out[..., axis] = (high - low) * 0.5 * steepness * (1 - s**2)
        return out

    return Template(dim, fn, grad, max(abs(low), abs(high)), "edge",
                    {"kind": "edge", "dim": dim, "position": position, "steepness": steepness,
                     "axis": axis, "low": low, "high": high})


def _constant(dim, value=0.0):
    return Template(dim, lambda x: np.full(x.shape[:-1], float(value)),
                    lambda x: np.zeros(x.shape), abs(value), "constant",
                    {"kind": "constant", "dim": dim, "value": value})


TEMPLATES = {"affine": _affine, "gaussian": _gaussian, "edge": _edge, "constant": _constant}


def template_from_config(cfg: dict) -> Template:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind == "raster":
        return load_raster_template(cfg["path"])
    if kind not in TEMPLATES:
        raise ConstructionError(f"unknown template kind {kind!r}")
    try:
        return TEMPLATES[kind](**cfg)
    except TypeError as exc:
        raise ConstructionError(f"template {kind}: {exc}") from exc


def _raster_1d(values, x0, x1):
    n = values.size
    h = (x1 - x0) / (n - 1)

    def locate(x):
        s = np.clip((x[..., 0] - x0) / h, 0, n - 1)
        i = np.minimum(np.floor(s).astype(int), n - 2)
        return i, s - i

    def fn(x):
        i, f = locate(x)
        return (1 - f) * values[i] + f * values[i + 1]

    def grad(x):
        i, _ = locate(x)
        return ((values[i + 1] - values[i]) / h)[..., None]

    return fn, grad


def _raster_2d(values, x0, x1, y0, y1):
    ny, nx = values.shape
    hx, hy = (x1 - x0) / (nx - 1), (y1 - y0) / (ny - 1)

    def locate(x):
        sx = np.clip((x[..., 0] - x0) / hx, 0, nx - 1)
        sy = np.clip((x[..., 1] - y0) / hy, 0, ny - 1)
        i = np.minimum(np.floor(sx).astype(int), nx - 2)
        j = np.minimum(np.floor(sy).astype(int), ny - 2)
        return i, j, sx - i, sy - j

    def corners(i, j):
        return values[j, i], values[j, i + 1], values[j + 1, i], values[j + 1, i + 1]

    def fn(x):
        i, j, fx, fy = locate(x)
        v00, v10, v01, v11 = corners(i, j)
        return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11

    def grad(x):
        i, j, fx, fy = locate(x)
        v00, v10, v01, v11 = corners(i, j)
        gx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / hx
        gy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / hy
        return np.stack([gx, gy], axis=-1)

    return fn, grad


def load_raster_template(path_or_text) -> Template:
    """Plain-text raster: header ``dim nx [ny] x0 x1 [y0 y1]`` then row-major values."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        head = lines[0].split()
        dim = int(head[0])
        nums = np.array(" ".join(lines[1:]).split(), dtype=float)
    except (IndexError, ValueError) as exc:
        raise ConstructionError(f"malformed raster: {exc}") from exc
    if dim == 1:
        nx = int(head[1])
        x0, x1 = float(head[2]), float(head[3])
        if nums.size != nx or nx < 2:
            raise ConstructionError(f"raster expects {nx} values, found {nums.size}")
        fn, grad = _raster_1d(nums, x0, x1)
    elif dim == 2:
        nx, ny = int(head[1]), int(head[2])
        x0, x1, y0, y1 = map(float, head[3:7])
        if nums.size != nx * ny or min(nx, ny) < 2:
            raise ConstructionError(f"raster expects {nx * ny} values, found {nums.size}")
        fn, grad = _raster_2d(nums.reshape(ny, nx), x0, x1, y0, y1)
    else:
        raise ConstructionError("raster templates support dim 1 or 2")
    return Template(dim, fn, grad, float(np.max(np.abs(nums))), "raster",
                    {"kind": "raster", "text": text})


# --------------------------------------------------------------------------- partition

_GL3_NODES = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GL3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


def _gauss_legendre(order):
    if order == 3:
        return _GL3_NODES, _GL3_WEIGHTS
    return np.polynomial.legendre.leggauss(order)


@dataclass
class CellPartition:
    """Disjoint axis-aligned boxes covering the unit box, with tensor Gauss-Legendre rules."""

    cells: np.ndarray           # (n, d, 2)
    order: int = 3
    edges: Optional[list] = None  # per-axis breakpoints when the cells form a grid

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.ndim != 3 or self.cells.shape[2] != 2:
            raise ConstructionError("cells must have shape (n, d, 2)")
        if np.any(self.cells[:, :, 1] <= self.cells[:, :, 0]):
            raise ConstructionError("every cell needs positive extent")
        if np.any(self.cells < -UNIT_BOX_TOL) or np.any(self.cells > 1 + UNIT_BOX_TOL):
            raise ConstructionError("cells must lie inside the unit box")
        if abs(self.volumes.sum() - 1.0) > 1e-12:
            raise ConstructionError("cell volumes must add up to vol(O) = 1")
        n = self.n_cells
        for i in range(n):
            lo = np.maximum(self.cells[i, :, 0], self.cells[i + 1:, :, 0])
            hi = np.minimum(self.cells[i, :, 1], self.cells[i + 1:, :, 1])
            if np.any(np.all(hi - lo > 1e-12, axis=1)):
                raise ConstructionError(f"cell {i} overlaps another cell")
        nodes, weights = _gauss_legendre(self.order)
        d = self.dim
        grids = np.meshgrid(*([nodes] * d), indexing="ij")
        ref = np.stack([g.ravel() for g in grids], axis=-1)             # (q, d) on [-1, 1]^d
        wref = np.prod(np.meshgrid(*([weights] * d), indexing="ij"), axis=0).ravel()
        lo, hi = self.cells[:, :, 0], self.cells[:, :, 1]
        half = 0.5 * (hi - lo)
        self.nodes = (lo + half)[:, None, :] + half[:, None, :] * ref[None]     # (n, q, d)
        self.weights = wref[None, :] * np.prod(half, axis=1)[:, None]          # (n, q)

    @classmethod
    def uniform(cls, counts, order=3):
        counts = [int(c) for c in np.atleast_1d(counts)]
        edges = [np.linspace(0.0, 1.0, c + 1) for c in counts]
        idx = np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")
        idx = np.stack([i.ravel() for i in idx], axis=-1)
        cells = np.stack([np.stack([edges[k][idx[:, k]], edges[k][idx[:, k] + 1]], axis=-1)
                          for k in range(len(counts))], axis=1)
        return cls(cells, order, edges)

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def dim(self):
        return self.cells.shape[1]

    @property
    def volumes(self):
        return np.prod(self.cells[:, :, 1] - self.cells[:, :, 0], axis=1)

    @property
    def flat_nodes(self):
        return self.nodes.reshape(-1, self.dim)

    @property
    def flat_weights(self):
        return self.weights.reshape(-1)

    @property
    def node_cell(self):
        return np.repeat(np.arange(self.n_cells), self.nodes.shape[1])

    def cell_integrals(self, node_values):
        """Per-cell quadrature of values given at :attr:`flat_nodes`."""
        v = np.asarray(node_values, dtype=float).reshape(self.nodes.shape[:2] + (-1,))
        return np.einsum("nq,nq...->n...", self.weights, v).reshape(
            (self.n_cells,) + np.shape(node_values)[1:])

    def locate(self, x):
        """Cell index of each point (cells are half-open, closed at the far boundary)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if self.edges is not None:
            counts = [len(e) - 1 for e in self.edges]
            idx = np.zeros(x.shape[0], dtype=int)
            ok = np.ones(x.shape[0], dtype=bool)
            for k, e in enumerate(self.edges):
                ok &= (x[:, k] >= e[0]) & (x[:, k] <= e[-1])
                ik = np.clip(np.searchsorted(e, x[:, k], side="right") - 1, 0, counts[k] - 1)
                idx = idx * counts[k] + ik
        else:
            idx, ok = self._scan(x)
        if not np.all(ok):
            raise PartitionError(f"point {x[~ok][0].tolist()} is in no cell")
        return idx

    def _scan(self, x):
        lo, hi = self.cells[:, :, 0], self.cells[:, :, 1]
        upper_ok = (x[:, None, :] < hi[None]) | ((hi[None] >= 1.0) & (x[:, None, :] <= hi[None]))
        inside = np.all((x[:, None, :] >= lo[None]) & upper_ok, axis=-1)
        ok = np.any(inside, axis=1)
        return np.argmax(inside, axis=1), ok


# --------------------------------------------------------------------------- problem

def make_imaging_basis(dim, centers, width, amplitude=1.0):
    """Bump modes on the unit box; they vanish on its boundary."""
    return make_gaussian_bump_basis(dim, centers, width, amplitude,
                                    [[0.0, 1.0]] * dim, drift=None, T=1.0)


@dataclass
class MatchProblem:
    template: Template
    partition: CellPartition
    data: Optional[np.ndarray]
    basis: BasisFamily
    eps: float = 0.1
    n_steps: int = 20
    convention: str = "integral"   # data as cell integrals, or "average"
    lambda_d: Optional[float] = field(default=None, repr=False)

    def __post_init__(self):
        if self.template.dim != self.basis.dim or self.partition.dim != self.basis.dim:
            raise ConfigurationError("template, partition and basis dimensions differ", key="dim")
        if self.convention not in ("integral", "average"):
            raise ConfigurationError(f"unknown data convention {self.convention!r}",
                                     key="convention")
        if self.data is not None:
            self.data = np.asarray(self.data, dtype=float).reshape(-1)
            if self.data.size != self.partition.n_cells:
                raise ConfigurationError(
                    f"data has {self.data.size} entries for {self.partition.n_cells} cells",
                    key="data")
        if self.basis.drift is not None:
            raise ConfigurationError("imaging bases must have zero drift", key="basis.drift")
        box = self.basis.support_box
        if box is None or np.any(box[:, 0] < -UNIT_BOX_TOL) or np.any(box[:, 1] > 1 + UNIT_BOX_TOL):
            raise ConfigurationError("imaging modes must be supported inside the unit box",
                                     key="basis.support_box")

    @property
    def dt(self):
        return 1.0 / self.n_steps

    @property
    def dim(self):
        return self.basis.dim

    def with_data(self, data):
        return MatchProblem(self.template, self.partition, data, self.basis, self.eps,
                            self.n_steps, self.convention)

    def zero_control(self):
        return ControlPath.zero(self.basis.n_modes, self.n_steps, self.dt)

    def cell_functional(self, node_values):
        """Cell integrals (or averages, per the data convention) of node values."""
        ints = self.partition.cell_integrals(node_values)
        if self.convention == "average":
            vol = self.partition.volumes.reshape((-1,) + (1,) * (ints.ndim - 1))
            ints = ints / vol
        return ints


def _check_control(problem, u):
    if u.n_modes != problem.basis.n_modes or u.n_steps != problem.n_steps:
        raise ConfigurationError(
            f"control shape {(u.n_modes, u.n_steps)} does not match problem "
            f"{(problem.basis.n_modes, problem.n_steps)}", key="control")
    if not math.isclose(u.dt, problem.dt, rel_tol=1e-12):
        raise ConfigurationError("control dt does not match the problem grid", key="control.dt")


def _outside_mask(x):
    return np.any((x <= 0.0) | (x >= 1.0), axis=-1)


def transport(problem, u: ControlPath, x, record=False):
    """``h_u(x) = eta_{0,1}(x)``; points on or outside the boundary stay fixed."""
    _check_control(problem, u)
    x = np.asarray(x, dtype=float)
    traj = rk4_integrate(problem.basis, u.values, problem.dt, 0, x)
    outside = _outside_mask(x)
    if np.any(outside):
        traj[:, outside] = x[outside]
    inner = traj[:, ~outside] if np.any(outside) else traj
    if inner.size and (np.min(inner) < -UNIT_BOX_TOL or np.max(inner) > 1 + UNIT_BOX_TOL):
        raise IntegrityError("transported point left the closed unit box; check the basis")
    return traj if record else traj[-1]


def transport_template(problem, u: ControlPath, x):
    """``T(h_u(x))``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, problem.dim)
    val = problem.template(transport(problem, u, x))
    return float(val[0]) if single else val


def data_image(partition: CellPartition, d, x):
    """``Y_d(x) = d_i`` for ``x`` in cell ``i``."""
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != partition.n_cells:
        raise ConfigurationError(f"data has {d.size} entries for {partition.n_cells} cells",
                                 key="data")
    return d[partition.locate(x)]


def objective_Jd(problem, u: ControlPath, with_grad=False):
    """``(J_d, reg_term, data_term)``, plus the gradient in ``u`` if requested."""
    if problem.data is None:
        raise ConfigurationError("problem has no data", key="data")
    _check_control(problem, u)
    part = problem.partition
    nodes = part.flat_nodes
    traj = rk4_integrate(problem.basis, u.values, problem.dt, 0, nodes)
    h = traj[-1]
    resid = problem.template(h) - problem.data[part.node_cell]
    w = part.flat_weights
    data_term = 0.5 * float(np.sum(w * resid**2))
    reg = control_cost(u)
    total = reg + data_term
    if not with_grad:
        return total, reg, data_term
    cot = (w * resid)[:, None] * problem.template.grad(h)
    grad, _ = rk4_vjp(problem.basis, u.values, problem.dt, 0, traj, cot)
    return total, reg, data_term, grad + u.values * problem.dt


@dataclass
class MatchResult:
    u_star: ControlPath
    objective: float
    reg_term: float
    data_term: float
    h_map: np.ndarray        # (K, 2, d): input point, transported point
    converged: bool
    start_index: int = 0

    def to_dict(self):
        return {"objective": self.objective, "reg_term": self.reg_term,
                "data_term": self.data_term, "converged": self.converged,
                "start_index": self.start_index}

    def h_map_csv(self):
        d = self.h_map.shape[2]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x_{i + 1}" for i in range(d)] + [f"h_{i + 1}" for i in range(d)])
        for row in self.h_map:
            writer.writerow([repr(float(v)) for v in row.ravel()])
        return buf.getvalue()


def _minimize_over_controls(problem, fun, multistart, seed, tol, maxiter, init_scale):
    L = problem.basis.n_modes
    best = None
    for k, u0 in enumerate(multistart_controls(L, problem.n_steps, multistart, seed, init_scale)):
        u, val, ok = minimize_control(fun, u0, tol, maxiter)
        if best is None or val < best[1]:
            best = (u, val, ok, k)
    return best


def solve_match(problem, multistart=5, seed=0, tol=1e-10, maxiter=1000, init_scale=0.5,
                lattice_size=21) -> MatchResult:
    """Minimise ``J_d`` over piecewise-constant controls (L-BFGS, adjoint gradients)."""
    dt = problem.dt

    def fun(uv):
        out = objective_Jd(problem, ControlPath(uv, dt), with_grad=True)
        return out[0], out[3]

    u, _, ok, k = _minimize_over_controls(problem, fun, multistart, seed, tol, maxiter,
                                          init_scale)
    u_star = ControlPath(u, dt)
    total, reg, data = objective_Jd(problem, u_star)
    grid = lattice(np.array([[0.0, 1.0]] * problem.dim), lattice_size)
    hmap = np.stack([grid, transport(problem, u_star, grid)], axis=1)
    return MatchResult(u_star, total, reg, data, hmap, ok, k)


def compute_lambda_d(problem, **opts):
    """``lambda_d = inf_u J_d(u)``; cached on the problem."""
    res = solve_match(problem, **opts)
    problem.lambda_d = res.objective
    return res


def synthesize_data(problem, u_true: Optional[ControlPath] = None, eps=0.0, seed=0,
                    prior_draw=False, prior_dt=None):
    """``d_i = int_{X_i} T(X(x)) dx + sqrt(eps) xi_i`` (per the problem's convention).

    ``X`` is ``h_{u_true}`` or, with ``prior_draw``, one prior flow sample at
    noise level ``eps``.  The data noise ``xi`` is drawn from a stream
    separate from the prior path.
    """
    if eps < 0:
        raise ConfigurationError("eps must be nonnegative", key="eps")
    nodes = problem.partition.flat_nodes
    if prior_draw:
        dt = prior_dt or problem.dt
        M = int(round(1.0 / dt))
        X = sample_endpoints(problem.basis, eps, nodes, M, dt, seed, 1)[0]
    elif u_true is None:
        X = nodes
    else:
        X = transport(problem, u_true, nodes)
    clean = problem.cell_functional(problem.template(X))
    if eps == 0:
        return clean
    xi = _rng.path_generator(seed, _rng.AUX_PATH_BASE - 1).standard_normal(clean.size)
    return clean + math.sqrt(eps) * xi


class LatticeDistanceFunctional(Functional):
    """``weight * mean_k |h(x_k) - x_k|^2`` over lattice points ``x_k``."""

    name = "lattice_distance"
    lower_bound = 0.0

    def __init__(self, points, weight=1.0):
        self.points = np.asarray(points, dtype=float)
        self.weight = float(weight)

    def __call__(self, Z):
        diff = np.asarray(Z, dtype=float) - self.points
        return self.weight * np.mean(np.sum(diff**2, axis=-1), axis=-1)

    def grad(self, Z):
        diff = np.asarray(Z, dtype=float) - self.points
        return 2.0 * self.weight * diff / self.points.shape[0]

    def params(self):
        return {"points": self.points.tolist(), "weight": self.weight}


def _misfit(problem, h_nodes):
    """``1/2 sum_i |d_i - C_i(h)|^2`` for stacks of node images ``(..., Q, d)``."""
    vals = problem.template(h_nodes)                     # (..., Q)
    moved = np.moveaxis(vals, -1, 0)                      # (Q, ...)
    c = problem.cell_functional(moved)                    # (n, ...)
    diff = problem.data.reshape((-1,) + (1,) * (c.ndim - 1)) - c
    return 0.5 * np.sum(diff**2, axis=0)


def _posterior_variational(problem, F, F_points, misfit, multistart, seed, tol, maxiter):
    """``inf_u { F(h_u) + cost(u) + misfit(h_u) }`` where misfit is 'field' (J_d) or 'cells'."""
    dt = problem.dt
    part = problem.partition
    nodes = part.flat_nodes
    Q = nodes.shape[0]
    pts = nodes if F_points is None else np.concatenate([nodes, F_points])

    def fun(uv):
        traj = rk4_integrate(problem.basis, uv, dt, 0, pts)
        end = traj[-1]
        hn = end[:Q]
        cot = np.zeros_like(end)
        if misfit == "field":
            resid = problem.template(hn) - problem.data[part.node_cell]
            val = 0.5 * float(np.sum(part.flat_weights * resid**2))
            cot[:Q] = (part.flat_weights * resid)[:, None] * problem.template.grad(hn)
        else:
            c = problem.cell_functional(problem.template(hn))
            diff = c - problem.data
            val = 0.5 * float(np.sum(diff**2))
            scale = part.flat_weights.copy()
            if problem.convention == "average":
                scale = scale / part.volumes[part.node_cell]
            cot[:Q] = (scale * diff[part.node_cell])[:, None] * problem.template.grad(hn)
        if F is not None and F_points is not None:
            val += float(F(end[Q:]))
            cot[Q:] = F.grad(end[Q:])
        grad, _ = rk4_vjp(problem.basis, uv, dt, 0, traj, cot)
        return val + 0.5 * float(np.sum(uv**2)) * dt, grad + uv * dt

    u, val, ok, _ = _minimize_over_controls(problem, fun, multistart, seed, tol, maxiter, 0.5)
    return val, ControlPath(u, dt), ok


def posterior_laplace_check(problem, F: Optional[Functional], F_points, eps_list, n_samples,
                            seed, prior_dt=None, threads=1, multistart=3, tol=1e-10,
                            maxiter=1000):
    """Reweighted-prior estimate of the posterior Laplace functional.

    For each ``eps`` the two terms

        term1 = -eps log mean exp(-[F(h) + misfit(h)] / eps)
        term2 = +eps log mean exp(-misfit(h) / eps)

    are averaged over prior draws ``h = psi^eps_{0,1}`` with
    ``misfit(h) = 1/2 sum_i |d_i - C_i(h)|^2`` (``C_i`` the cell integral, or
    average under that convention).  Their sum is compared with
    ``target = inf_u {F(h_u) + J_d(u)} - lambda_d``.  The column
    ``target_cells`` repeats the variational computation with the cell
    misfit in place of the field discrepancy of ``J_d``; it is the exact
    small-noise limit of the estimator.

    ``F`` sees ``h`` at ``F_points``.  ``F = None`` means ``F = 0``.  For
    constant ``F`` the two terms cancel exactly and no optimisation runs.
    """
    if problem.data is None:
        raise ConfigurationError("problem has no data", key="data")
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ConfigurationError("eps_list is empty", key="eps_list")
    if any(e <= 0 for e in eps_list):
        raise ConfigurationError("eps values must be positive", key="eps_list")
    if problem.basis.n_modes > 3:
        raise ConfigurationError("posterior checks support at most 3 modes", key="basis")
    F = ConstantFunctional(0.0) if F is None else F
    constant = isinstance(F, ConstantFunctional)
    dt = prior_dt or problem.dt
    M = int(round(1.0 / dt))
    nodes = problem.partition.flat_nodes
    Q = nodes.shape[0]
    if constant or F_points is None:
        F_points = np.zeros((0, problem.dim))
    F_points = np.asarray(F_points, dtype=float).reshape(-1, problem.dim)
    pts = np.concatenate([nodes, F_points])

    if constant:
        target = target_cells = F.value
    else:
        opt = dict(multistart=multistart, seed=seed, tol=tol, maxiter=maxiter)
        if problem.lambda_d is None:
            compute_lambda_d(problem, **opt)
        lam_cells = _posterior_variational(problem, None, None, "cells", **opt)[0]
        target = (_posterior_variational(problem, F, F_points, "field", **opt)[0]
                  - problem.lambda_d)
        target_cells = (_posterior_variational(problem, F, F_points, "cells", **opt)[0]
                        - lam_cells)

    rows = []
    for eps in eps_list:
        Z = sample_endpoints(problem.basis, eps, pts, M, dt, seed, n_samples, threads)
        mis = _misfit(problem, Z[:, :Q])
        fv = np.broadcast_to(np.asarray(F(Z[:, Q:]), dtype=float), (n_samples,))
        f_min = float(fv.min())
        a = -((fv - f_min) + mis) / eps
        b = -mis / eps
        inner1 = -eps * log_mean_exp(a)
        term2 = eps * log_mean_exp(b)
        estimate = f_min + (inner1 + term2)
        wa = np.exp(a - a.max())
        wb = np.exp(b - b.max())
        ess = float(wa.sum() ** 2 / np.sum(wa**2))
        if ess < 2.0:
            raise UnderflowError(f"effective sample size {ess:.3g} at eps={eps}; "
                                 "use a larger eps or more samples")
        infl = wa / wa.mean() - wb / wb.mean()
        stderr = eps * float(np.std(infl, ddof=1)) / math.sqrt(n_samples)
        rows.append({"eps": eps, "estimate": estimate, "term1": f_min + inner1, "term2": term2,
                     "stderr": stderr, "ess": ess, "target": target,
                     "gap": abs(estimate - target), "target_cells": target_cells,
                     "gap_cells": abs(estimate - target_cells)})
    return rows


def rate_Id(problem, u: ControlPath):
    """``J_d(u) - lambda_d``: an upper bound on ``I_d`` at ``h = h_u``."""
    if problem.lambda_d is None:
        raise MissingCacheError("lambda_d is not cached; call compute_lambda_d first")
    return objective_Jd(problem, u)[0] - problem.lambda_d
