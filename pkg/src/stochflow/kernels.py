"""
Finite-mode basis families.

A :class:`BasisFamily` bundles a drift field ``b`` and ``L`` mode fields
``f_l``; together they define a spatially correlated Brownian motion

    F(x, t) = int_0^t b(x, r) dr + sum_l int_0^t f_l(x, r) dbeta_l(r)

whose spatial covariance is ``a(x, y, t) = sum_l f_l(x, t) f_l(y, t)^T``.
The mode count ``L`` is part of the model; nothing here truncates silently.

All field evaluations are vectorised: ``x`` has shape ``(..., d)`` and a
field returns ``(..., d)`` values and ``(..., d, d)`` Jacobians with entries
``[i, j] = d f_i / d x_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapabilityError, ConstructionError, DomainError

__all__ = [
    "Field",
    "ZeroField",
    "ConstantField",
    "LinearField",
    "GaussianBumpField",
    "CallableField",
    "ScaledField",
    "BasisFamily",
    "ValidationReport",
    "smooth_step",
    "box_cutoff",
    "evaluate_covariance",
    "validate_basis",
    "make_gaussian_bump_basis",
    "make_constant_basis",
    "make_linear_basis",
    "basis_from_config",
]

#: fraction of each box side on which the cutoff ramps from 0 to 1 (per end)
CUTOFF_MARGIN = 0.05


class Field:
    """A (possibly time-dependent) vector field on R^d."""

    dim: int
    has_gradient = True
    n_derivatives = 1

    def value(self, x, t=0.0):
        raise NotImplementedError

    def jacobian(self, x, t=0.0):
        raise NotImplementedError


class ZeroField(Field):
    n_derivatives = 2  # every derivative is available (and zero)

    def __init__(self, dim):
        self.dim = int(dim)

    def value(self, x, t=0.0):
        return np.zeros(np.shape(x))

    def jacobian(self, x, t=0.0):
        x = np.asarray(x)
        return np.zeros(x.shape + (self.dim,))

    def __repr__(self):
        return f"ZeroField(dim={self.dim})"


class ConstantField(Field):
    n_derivatives = 2

    def __init__(self, vector):
        self.vector = np.atleast_1d(np.asarray(vector, dtype=float))
        self.dim = self.vector.size

    def value(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.vector, x.shape).copy()

    def jacobian(self, x, t=0.0):
        x = np.asarray(x)
        return np.zeros(x.shape + (self.dim,))

    def __repr__(self):
        return f"ConstantField({self.vector.tolist()})"


class LinearField(Field):
    """``f(x) = A x + c``."""

    n_derivatives = 2

    def __init__(self, matrix, offset=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.dim = self.matrix.shape[0]
        if self.matrix.shape != (self.dim, self.dim):
            raise ConstructionError("linear field matrix must be square")
        self.offset = (np.zeros(self.dim) if offset is None
                       else np.atleast_1d(np.asarray(offset, dtype=float)))

    def value(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self.offset, x.shape).copy()
        # explicit sums keep results independent of the batch layout
        for j in range(self.dim):
            out += self.matrix[:, j] * x[..., j:j + 1]
        return out

    def jacobian(self, x, t=0.0):
        x = np.asarray(x)
        return np.broadcast_to(self.matrix, x.shape + (self.dim,)).copy()

    def __repr__(self):
        return f"LinearField({self.matrix.tolist()}, {self.offset.tolist()})"


def smooth_step(r):
    """C-infinity step: 0 for r <= 0, 1 for r >= 1, and its derivative."""
    r = np.asarray(r, dtype=float)
    inside = (r > 0.0) & (r < 1.0)
    if not inside.any():
        return np.where(r >= 1.0, 1.0, 0.0), np.zeros(r.shape)
    rc = np.where(inside, r, 0.5)
    p = np.exp(-1.0 / rc)
    q = np.exp(-1.0 / (1.0 - rc))
    s = np.where(inside, p / (p + q), np.where(r >= 1.0, 1.0, 0.0))
    dp = p / rc**2
    dq = q / (1.0 - rc) ** 2
    ds = np.where(inside, (dp * q + p * dq) / (p + q) ** 2, 0.0)
    return s, ds


def box_cutoff(x, box, need_grad=True):
    """Smooth cutoff equal to 1 on the inner 90% of ``box`` and 0 on its boundary.

    Returns ``(chi, grad_chi)`` with shapes ``(...)`` and ``(..., d)``;
    ``grad_chi`` is ``None`` unless ``need_grad``.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    margin = CUTOFF_MARGIN * (hi - lo)
    to_lo = x - lo
    to_hi = hi - x
    nearest = np.minimum(to_lo, to_hi)
    sign = np.where(to_lo <= to_hi, 1.0, -1.0)
    s, ds = smooth_step(nearest / margin)
    chi = np.prod(s, axis=-1)
    if not need_grad:
        return chi, None
    d = x.shape[-1]
    grad = np.empty(x.shape)
    for k in range(d):
        others = np.ones(x.shape[:-1])
        for j in range(d):
            if j != k:
                others = others * s[..., j]
        grad[..., k] = others * ds[..., k] * sign[..., k] / margin[k]
    return chi, grad


class GaussianBumpField(Field):
    """``amplitude * exp(-|x - c|^2 / (2 w^2)) * chi(x) * e_axis``."""

    n_derivatives = 1

    def __init__(self, center, width, amplitude, axis, box=None):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.dim = self.center.size
        self.width = float(width)
        self.amplitude = float(amplitude)
        self.axis = int(axis)
        self.box = None if box is None else np.asarray(box, dtype=float).reshape(self.dim, 2)
        if self.width <= 0:
            raise ConstructionError(f"bump width must be positive, got {width}")
        if not 0 <= self.axis < self.dim:
            raise ConstructionError(f"axis {axis} out of range for dim {self.dim}")

    def _profile(self, x, need_grad=True):
        diff = x - self.center
        r2 = np.sum(diff * diff, axis=-1)
        g = self.amplitude * np.exp(-r2 / (2.0 * self.width**2))
        grad_g = -g[..., None] * diff / self.width**2 if need_grad else None
        if self.box is not None:
            chi, grad_chi = box_cutoff(x, self.box, need_grad)
            if need_grad:
                grad_g = grad_g * chi[..., None] + g[..., None] * grad_chi
            g = g * chi
        return g, grad_g

    def value(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        g, _ = self._profile(x, need_grad=False)
        out = np.zeros(x.shape)
        out[..., self.axis] = g
        return out

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        _, grad_g = self._profile(x)
        out = np.zeros(x.shape + (self.dim,))
        out[..., self.axis, :] = grad_g
        return out

    def __repr__(self):
        return (f"GaussianBumpField(center={self.center.tolist()}, width={self.width}, "
                f"amplitude={self.amplitude}, axis={self.axis})")


class CallableField(Field):
    """Wraps user functions ``fn(x, t)`` and optionally ``grad(x, t)``."""

    n_derivatives = 0

    def __init__(self, dim, fn: Callable, grad: Optional[Callable] = None):
        self.dim = int(dim)
        self._fn = fn
        self._grad = grad
        self.has_gradient = grad is not None
        self.n_derivatives = 1 if grad is not None else 0

    def value(self, x, t=0.0):
        return np.asarray(self._fn(np.asarray(x, dtype=float), t), dtype=float)

    def jacobian(self, x, t=0.0):
        if self._grad is None:
            raise CapabilityError("field was built without an analytic gradient")
        return np.asarray(self._grad(np.asarray(x, dtype=float), t), dtype=float)


class ScaledField(Field):
    def __init__(self, inner: Field, scale: float):
        self.inner = inner
        self.scale = float(scale)
        self.dim = inner.dim
        self.has_gradient = inner.has_gradient
        self.n_derivatives = inner.n_derivatives

    def value(self, x, t=0.0):
        return self.scale * self.inner.value(x, t)

    def jacobian(self, x, t=0.0):
        return self.scale * self.inner.jacobian(x, t)


@dataclass(frozen=True)
class BasisFamily:
    """Drift ``b`` and modes ``f_1..f_L`` on ``[0, T]``.

    When ``support_box`` is set, every mode is forced to vanish outside it.
    """

    dim: int
    modes: tuple = ()
    drift: Optional[Field] = None
    T: float = 1.0
    support_box: Optional[np.ndarray] = None
    name: str = "basis"
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ConstructionError(f"dim must be 1, 2 or 3, got {self.dim}")
        object.__setattr__(self, "modes", tuple(self.modes))
        for f in self.modes + ((self.drift,) if self.drift is not None else ()):
            if f.dim != self.dim:
                raise ConstructionError(f"field {f!r} has dim {f.dim}, basis has {self.dim}")
        if self.support_box is not None:
            box = np.asarray(self.support_box, dtype=float).reshape(self.dim, 2)
            if np.any(box[:, 1] <= box[:, 0]):
                raise ConstructionError("support box must have positive extent")
            object.__setattr__(self, "support_box", box)
        if not self.T > 0:
            raise ConstructionError("horizon T must be positive")

    @property
    def n_modes(self):
        return len(self.modes)

    @property
    def has_gradients(self):
        fields = self.modes + ((self.drift,) if self.drift is not None else ())
        return all(f.has_gradient for f in fields)

    def check_time(self, t):
        if not (-1e-12 <= t <= self.T * (1 + 1e-12) + 1e-12):
            raise DomainError(f"time {t} outside [0, {self.T}]")

    def _inside(self, x):
        if self.support_box is None:
            return None
        box = self.support_box
        return np.all((x >= box[:, 0]) & (x <= box[:, 1]), axis=-1)

    def mode_values(self, x, t=0.0):
        """Array of shape ``(L, ..., d)``."""
        x = np.asarray(x, dtype=float)
        out = np.empty((self.n_modes,) + x.shape)
        for l, f in enumerate(self.modes):
            out[l] = f.value(x, t)
        inside = self._inside(x)
        if inside is not None:
            out *= inside[..., None]
        return out

    def mode_jacobians(self, x, t=0.0):
        """Array of shape ``(L, ..., d, d)``."""
        x = np.asarray(x, dtype=float)
        out = np.empty((self.n_modes,) + x.shape + (self.dim,))
        for l, f in enumerate(self.modes):
            if not f.has_gradient:
                raise CapabilityError(f"mode {l} ({f!r}) has no analytic gradient")
            out[l] = f.jacobian(x, t)
        inside = self._inside(x)
        if inside is not None:
            out *= inside[..., None, None]
        return out

    def drift_value(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros(x.shape)
        return self.drift.value(x, t)

    def drift_jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros(x.shape + (self.dim,))
        if not self.drift.has_gradient:
            raise CapabilityError("drift has no analytic gradient")
        return self.drift.jacobian(x, t)

    def scaled(self, factor):
        """Same basis with every mode multiplied by ``factor``."""
        return BasisFamily(self.dim, tuple(ScaledField(f, factor) for f in self.modes),
                           self.drift, self.T, self.support_box,
                           name=f"{self.name}*{factor:g}", spec=self.spec)

    def with_horizon(self, T):
        return BasisFamily(self.dim, self.modes, self.drift, T, self.support_box,
                           name=self.name, spec=self.spec)


def evaluate_covariance(basis: BasisFamily, x, y, t=0.0):
    """``a(x, y, t) = sum_l f_l(x, t) f_l(y, t)^T`` as a ``d x d`` matrix."""
    basis.check_time(t)
    x = np.asarray(x, dtype=float).reshape(basis.dim)
    y = np.asarray(y, dtype=float).reshape(basis.dim)
    fx = basis.mode_values(x, t)
    fy = basis.mode_values(y, t)
    a = np.zeros((basis.dim, basis.dim))
    for l in range(basis.n_modes):
        a += np.outer(fx[l], fy[l])
    return a


@dataclass
class ValidationReport:
    trace_sup: float
    trace_mismatch: float
    mode_lipschitz: list
    drift_lipschitz: float
    gram_min_eig: float
    gram_max_eig: float
    k_effective: int
    n_points: int
    n_times: int

    @property
    def psd_ok(self):
        return self.gram_min_eig >= -1e-8 * max(self.gram_max_eig, 0.0)

    def to_dict(self):
        return {
            "trace_sup": self.trace_sup,
            "trace_mismatch": self.trace_mismatch,
            "mode_lipschitz": list(self.mode_lipschitz),
            "drift_lipschitz": self.drift_lipschitz,
            "gram_min_eig": self.gram_min_eig,
            "gram_max_eig": self.gram_max_eig,
            "psd_ok": bool(self.psd_ok),
            "k_effective": self.k_effective,
            "n_points": self.n_points,
            "n_times": self.n_times,
        }


def _empirical_lipschitz(values, points):
    """Max divided difference over all sample pairs."""
    n = points.shape[0]
    if n < 2:
        return 0.0
    dv = np.linalg.norm(values[:, None, :] - values[None, :, :], axis=-1)
    dx = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    mask = dx > 0
    return float(np.max(dv[mask] / dx[mask])) if np.any(mask) else 0.0


def validate_basis(basis: BasisFamily, sample_grid, t_grid) -> ValidationReport:
    """Sampled finite-trace, Lipschitz and covariance-PSD diagnostics."""
    pts = np.asarray(sample_grid, dtype=float).reshape(-1, basis.dim)
    times = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if pts.shape[0] == 0 or times.size == 0:
        raise ConstructionError("validation grids must be nonempty")
    L, d, n = basis.n_modes, basis.dim, pts.shape[0]
    trace_sup = 0.0
    trace_mismatch = 0.0
    mode_lip = [0.0] * L
    drift_lip = 0.0
    gram_min = np.inf
    gram_max = -np.inf
    for t in times:
        basis.check_time(t)
        fv = basis.mode_values(pts, t)  # (L, n, d)
        sq = np.sum(fv**2, axis=(0, 2))
        trace_sup = max(trace_sup, float(sq.max()) if L else 0.0)
        for i in range(n):
            tr = np.trace(evaluate_covariance(basis, pts[i], pts[i], t))
            trace_mismatch = max(trace_mismatch, abs(tr - sq[i]) / max(1.0, abs(sq[i])))
        for l in range(L):
            mode_lip[l] = max(mode_lip[l], _empirical_lipschitz(fv[l], pts))
        drift_lip = max(drift_lip, _empirical_lipschitz(basis.drift_value(pts, t), pts))
        vecs = fv.reshape(L, n * d)
        gram = vecs.T @ vecs
        eig = np.linalg.eigvalsh(gram) if n * d else np.zeros(1)
        gram_min = min(gram_min, float(eig[0]))
        gram_max = max(gram_max, float(eig[-1]))
    fields = basis.modes + ((basis.drift,) if basis.drift is not None else ())
    k_eff = min((f.n_derivatives for f in fields), default=2)
    return ValidationReport(trace_sup, trace_mismatch, mode_lip, drift_lip,
                            gram_min, gram_max, k_eff, n, times.size)


def _as_box(support_box, dim):
    box = np.asarray(support_box, dtype=float).reshape(dim, 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise ConstructionError("support box must have positive extent")
    return box


def make_gaussian_bump_basis(dim, centers, width, amplitude, support_box,
                             drift: Optional[Field] = None, T=1.0, axes=None):
    """One Gaussian bump per (center, axis) pair, cut off smoothly at the box.

    ``axes`` restricts which coordinate directions get a mode; by default all
    ``dim`` directions do.
    """
    box = _as_box(support_box, dim)
    centers = np.asarray(centers, dtype=float).reshape(-1, dim)
    if width <= 0:
        raise ConstructionError(f"bump width must be positive, got {width}")
    inside = np.all((centers >= box[:, 0]) & (centers <= box[:, 1]), axis=1)
    if not np.all(inside):
        raise ConstructionError(f"centers outside support box: {centers[~inside].tolist()}")
    axes = range(dim) if axes is None else axes
    modes = tuple(GaussianBumpField(c, width, amplitude, k, box)
                  for c in centers for k in axes)
    spec = {"kind": "gaussian_bump", "dim": dim, "centers": centers.tolist(), "width": width,
            "amplitude": amplitude, "support_box": box.tolist(), "T": T}
    return BasisFamily(dim, modes, drift, T, box, name="gaussian_bump", spec=spec)


def make_constant_basis(vectors, drift: Optional[Field] = None, T=1.0):
    """Spatially constant modes; the noise is then additive."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    dim = vectors.shape[1]
    spec = {"kind": "constant", "vectors": vectors.tolist(), "T": T}
    return BasisFamily(dim, tuple(ConstantField(v) for v in vectors), drift, T,
                       name="constant", spec=spec)


def make_linear_basis(matrices, drift: Optional[Field] = None, T=1.0):
    """Modes ``f_l(x) = A_l x``; in d=1 with A=1 the flow is geometric Brownian motion."""
    mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in matrices]
    dim = mats[0].shape[0]
    spec = {"kind": "linear", "matrices": [m.tolist() for m in mats], "T": T}
    return BasisFamily(dim, tuple(LinearField(m) for m in mats), drift, T,
                       name="linear", spec=spec)


def _drift_from_config(cfg, dim):
    if cfg is None:
        return None
    kind = cfg.get("kind", "zero")
    if kind == "zero":
        return None
    if kind == "constant":
        return ConstantField(cfg["vector"])
    if kind == "linear":
        return LinearField(cfg["matrix"], cfg.get("offset"))
    raise ConstructionError(f"unknown drift kind {kind!r}")


_BASIS_KEYS = {
    "constant": {"kind", "dim", "T", "vectors", "drift"},
    "linear": {"kind", "dim", "T", "matrices", "drift"},
    "gaussian_bump": {"kind", "dim", "T", "centers", "width", "amplitude",
                      "support_box", "drift", "axes"},
}


def basis_from_config(cfg: dict) -> BasisFamily:
    """Build a basis from a config table (see the CLI docs for the schema)."""
    kind = cfg.get("kind")
    if kind not in _BASIS_KEYS:
        raise ConstructionError(f"unknown basis kind {kind!r}")
    unknown = set(cfg) - _BASIS_KEYS[kind]
    if unknown:
        raise ConstructionError(f"unknown basis keys {sorted(unknown)}")
    T = float(cfg.get("T", 1.0))
    if kind == "constant":
        vectors = np.atleast_2d(np.asarray(cfg.get("vectors", []), dtype=float))
        dim = int(cfg.get("dim", vectors.shape[1] if vectors.size else 1))
        drift = _drift_from_config(cfg.get("drift"), dim)
        if vectors.size == 0:
            return BasisFamily(dim, (), drift, T, name="zero", spec=dict(cfg))
        basis = make_constant_basis(vectors, drift, T)
    elif kind == "linear":
        mats = cfg["matrices"]
        dim = int(np.atleast_2d(np.asarray(mats[0])).shape[0])
        basis = make_linear_basis(mats, _drift_from_config(cfg.get("drift"), dim), T)
    else:
        dim = int(cfg["dim"])
        basis = make_gaussian_bump_basis(
            dim, cfg["centers"], float(cfg["width"]), float(cfg["amplitude"]),
            cfg["support_box"], _drift_from_config(cfg.get("drift"), dim), T,
            axes=cfg.get("axes"))
    return BasisFamily(basis.dim, basis.modes, basis.drift, basis.T, basis.support_box,
                       name=basis.name, spec=dict(cfg))


def lattice(box, n_per_axis):
    """Regular tensor lattice over ``box`` (shape ``(d, 2)``), endpoints included."""
    box = np.asarray(box, dtype=float)
    axes = [np.linspace(lo, hi, n_per_axis) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def sample_points(dim, n, box, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    box = np.asarray(box, dtype=float).reshape(dim, 2)
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((n, dim))


def mode_sum(weights: Sequence, values):
    """``sum_l weights[l] * values[l]`` with a fixed, layout-independent order.

    ``weights[l]`` broadcasts against ``values[l]``.
    """
    out = np.zeros(values.shape[1:])
    for l in range(values.shape[0]):
        out += weights[l] * values[l]
    return out
