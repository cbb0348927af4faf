import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochflow.control_flow import ControlPath, control_cost
from stochflow.errors import (ConfigurationError, ConstructionError, IntegrityError,
                              MissingCacheError, PartitionError)
from stochflow.imaging import (CellPartition, LatticeDistanceFunctional, MatchProblem,
                               compute_lambda_d, data_image, load_raster_template,
                               make_imaging_basis, objective_Jd, posterior_laplace_check,
                               rate_Id, solve_match, synthesize_data, template_from_config,
                               transport, transport_template)
from stochflow.kernels import BasisFamily, CallableField
from stochflow.ldp_lab import ConstantFunctional

EDGE = {"kind": "edge", "dim": 1, "position": 0.5, "steepness": 8.0}


def problem_1d(template=None, cells=10, convention="integral", center=0.5, n_steps=20):
    basis = make_imaging_basis(1, [[center]], 0.25)
    T = template_from_config(template or EDGE)
    return MatchProblem(T, CellPartition.uniform([cells]), None, basis, n_steps=n_steps,
                        convention=convention)


def problem_2d():
    basis = make_imaging_basis(2, [[0.5, 0.5]], 0.3)
    T = template_from_config({"kind": "gaussian", "dim": 2, "center": [0.4, 0.6], "width": 0.25})
    return MatchProblem(T, CellPartition.uniform([3, 3]), None, basis, n_steps=10)


def const_u(p, levels):
    return ControlPath.constant(levels, p.n_steps, p.dt)


# --------------------------------------------------------------------------- transport

def test_zero_control_returns_template():
    p = problem_1d()
    x = np.linspace(0, 1, 11)[:, None]
    assert np.array_equal(transport_template(p, p.zero_control(), x), p.template(x))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.sampled_from([0.0, 1.0]))
def test_boundary_points_fixed(level, xb):
    p = problem_1d()
    assert transport_template(p, const_u(p, [level]), np.array([xb])) == p.template(np.array([xb]))


def test_outside_points_fixed():
    p = problem_1d()
    x = np.array([[-0.5], [1.5]])
    assert np.array_equal(transport(p, const_u(p, [3.0]), x), x)


def _fine_transport(x, level, center, width, steps=100_000):
    # independent explicit midpoint integrator of the 1-D bump field
    def step(r):
        if r <= 0:
            return 0.0
        if r >= 1:
            return 1.0
        a, b = math.exp(-1 / r), math.exp(-1 / (1 - r))
        return a / (a + b)

    def v(y):
        chi = step(y / 0.05) * step((1 - y) / 0.05)
        return level * math.exp(-(y - center) ** 2 / (2 * width**2)) * chi

    h = 1.0 / steps
    for _ in range(steps):
        y = x + 0.5 * h * v(x)
        x = x + h * v(y)
    return x


def test_transport_matches_fine_step_oracle():
    p = problem_1d(center=0.4, n_steps=20)
    h = transport(p, const_u(p, [0.9]), np.array([[0.5]]))[0, 0]
    ref = _fine_transport(0.5, 0.9, 0.4, 0.25)
    assert abs(h - ref) <= 1e-6


def test_integrity_error_for_bad_basis():
    # a mode that does not vanish on the boundary pushes points out of the box
    f = CallableField(1, lambda x, t: np.ones_like(x), lambda x, t: np.zeros(x.shape + (1,)))
    basis = BasisFamily(1, (f,), None, 1.0, [[0.0, 1.0]])
    T = template_from_config(EDGE)
    p = MatchProblem(T, CellPartition.uniform([4]), None, basis, n_steps=10)
    with pytest.raises(IntegrityError):
        transport(p, const_u(p, [1.0]), np.array([[0.95]]))


# --------------------------------------------------------------------------- partitions

def test_single_cell_data_image():
    part = CellPartition.uniform([1])
    x = np.random.default_rng(0).random((20, 1))
    assert np.all(data_image(part, [3.0], x) == 3.0)


def test_two_cell_indicator():
    part = CellPartition.uniform([2])
    x = np.array([[0.1], [0.49], [0.5], [0.7], [1.0], [0.0]])
    assert data_image(part, [0.0, 1.0], x).tolist() == [0, 0, 1, 1, 1, 0]


def _random_partition(rng, dim):
    edges = [np.concatenate([[0.0], np.sort(rng.uniform(0.05, 0.95, 3)), [1.0]])
             for _ in range(dim)]
    idx = np.stack(np.meshgrid(*[np.arange(4)] * dim, indexing="ij"), -1).reshape(-1, dim)
    cells = np.stack([np.stack([edges[k][idx[:, k]], edges[k][idx[:, k] + 1]], -1)
                      for k in range(dim)], axis=1)
    return CellPartition(cells[rng.permutation(len(cells))]), edges


@pytest.mark.parametrize("dim", [1, 2])
def test_locate_matches_linear_scan(dim):
    rng = np.random.default_rng(dim)
    part, _ = _random_partition(rng, dim)
    d = rng.normal(size=part.n_cells)
    x = rng.random((100, dim))
    expected = []
    for p in x:
        for i, c in enumerate(part.cells):
            if all(c[k, 0] <= p[k] < c[k, 1] for k in range(dim)):
                expected.append(d[i])
                break
    assert np.array_equal(data_image(part, d, x), expected)
    uni = CellPartition.uniform([5] * dim)
    scan_idx, ok = uni._scan(x)
    assert ok.all() and np.array_equal(uni.locate(x), scan_idx)


def test_point_outside_partition():
    with pytest.raises(PartitionError):
        data_image(CellPartition.uniform([2]), [0, 1], np.array([[1.2]]))


def test_partition_validation():
    with pytest.raises(ConstructionError):
        CellPartition([[[0.0, 0.6]], [[0.5, 1.0]]])
    with pytest.raises(ConstructionError):
        CellPartition([[[0.0, 0.5]]])
    part = CellPartition.uniform([3, 2])
    np.testing.assert_allclose(part.weights.sum(axis=1), part.volumes, rtol=1e-14)


def test_quadrature_exact_for_quintics():
    part = CellPartition.uniform([4])
    x = part.flat_nodes[:, 0]
    vals = part.cell_integrals(x**5)
    edges = np.linspace(0, 1, 5)
    np.testing.assert_allclose(vals, (edges[1:] ** 6 - edges[:-1] ** 6) / 6, rtol=1e-14)


# --------------------------------------------------------------------------- objective

def test_affine_template_residual_is_within_cell_variance():
    a = 1.5
    p = problem_1d({"kind": "affine", "dim": 1, "coeffs": [a], "offset": 0.2}, cells=10)
    avg = p.partition.cell_integrals(p.template(p.partition.flat_nodes)) / p.partition.volumes
    p = p.with_data(avg)
    J, reg, data = objective_Jd(p, p.zero_control())
    h = 0.1
    assert reg == 0.0
    assert data == pytest.approx(0.5 * 10 * a**2 * h**3 / 12, rel=1e-12)


def test_constant_template_cell_averages_zero_objective():
    p = problem_1d({"kind": "constant", "dim": 1, "value": 0.7}, cells=5)
    p = p.with_data(np.full(5, 0.7))
    assert objective_Jd(p, p.zero_control())[0] <= 1e-30


def test_single_cell_zero_template():
    p = problem_1d({"kind": "constant", "dim": 1, "value": 0.0}, cells=1).with_data([1.0])
    assert objective_Jd(p, p.zero_control())[0] == pytest.approx(0.5, abs=1e-15)


def test_objective_matches_refined_quadrature():
    p = problem_1d(cells=8).with_data(np.linspace(0, 1, 8))
    u = ControlPath(0.7 * np.random.default_rng(3).normal(size=(1, 20)), p.dt)
    fine = MatchProblem(p.template, CellPartition(p.partition.cells, order=6), p.data, p.basis,
                        n_steps=p.n_steps)
    a, b = objective_Jd(p, u)[0], objective_Jd(fine, u)[0]
    assert abs(a - b) <= 1e-4


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=20, max_size=20))
def test_objective_decomposition(vals):
    p = problem_1d().with_data(np.linspace(0, 1, 10))
    u = ControlPath(np.array([vals]), p.dt)
    J, reg, data = objective_Jd(p, u)
    assert J == reg + data
    assert reg == control_cost(u)


@pytest.mark.parametrize("make", [lambda: problem_1d(), problem_2d,
                                  lambda: MatchProblem(
                                      template_from_config(EDGE), CellPartition.uniform([6]), None,
                                      make_imaging_basis(1, [[0.3], [0.7]], 0.2), n_steps=10)])
def test_objective_gradient_vs_central_differences(make):
    p = make()
    p = p.with_data(np.random.default_rng(0).random(p.partition.n_cells))
    rng = np.random.default_rng(1)
    u = ControlPath(0.5 * rng.normal(size=(p.basis.n_modes, p.n_steps)), p.dt)
    g = objective_Jd(p, u, with_grad=True)[3]
    h = 1e-6
    fd = np.zeros_like(g)
    for idx in np.ndindex(*g.shape):
        e = np.zeros_like(g)
        e[idx] = h
        fd[idx] = (objective_Jd(p, ControlPath(u.values + e, p.dt))[0]
                   - objective_Jd(p, ControlPath(u.values - e, p.dt))[0]) / (2 * h)
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


# --------------------------------------------------------------------------- matching

def test_generator_dominance():
    for conv in ("integral", "average"):
        p = problem_1d(convention=conv)
        ut = const_u(p, [0.8])
        p = p.with_data(synthesize_data(p, ut))
        res = solve_match(p, multistart=3)
        assert res.objective <= objective_Jd(p, ut)[0]
        assert res.objective == res.reg_term + res.data_term
        assert res.reg_term == control_cost(res.u_star)


def test_constant_template_gives_zero_control():
    p = problem_1d({"kind": "constant", "dim": 1, "value": 0.3}).with_data(np.linspace(0, 1, 10))
    res = solve_match(p, multistart=3)
    assert np.max(np.abs(res.u_star.values)) <= 1e-8
    assert res.data_term == pytest.approx(objective_Jd(p, p.zero_control())[2], abs=1e-14)


def test_h_map_export():
    p = problem_1d().with_data(np.linspace(0, 1, 10))
    res = solve_match(p, multistart=1, lattice_size=5)
    lines = res.h_map_csv().splitlines()
    assert lines[0] == "x_1,h_1" and len(lines) == 6
    assert res.h_map[0, 1, 0] == 0.0 and res.h_map[-1, 1, 0] == 1.0


# --------------------------------------------------------------------------- data

def test_synthesize_constant_template_single_cell():
    p = problem_1d({"kind": "constant", "dim": 1, "value": 1.0}, cells=1)
    assert synthesize_data(p, p.zero_control()).tolist() == [1.0]


def test_synthesize_zero_control_is_cell_quadrature():
    p = problem_1d()
    d = synthesize_data(p, p.zero_control())
    part = p.partition
    np.testing.assert_array_equal(d, part.cell_integrals(p.template(part.flat_nodes)))
    avg = synthesize_data(problem_1d(convention="average"), p.zero_control())
    np.testing.assert_allclose(avg, d / part.volumes, rtol=1e-15)


def test_synthesize_is_deterministic():
    p = problem_1d()
    a = synthesize_data(p, const_u(p, [0.5]), eps=0.04, seed=12)
    b = synthesize_data(p, const_u(p, [0.5]), eps=0.04, seed=12)
    c = synthesize_data(p, const_u(p, [0.5]), eps=0.04, seed=13)
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)
    pa = synthesize_data(p, eps=0.04, seed=12, prior_draw=True)
    pb = synthesize_data(p, eps=0.04, seed=12, prior_draw=True)
    assert pa.tobytes() == pb.tobytes()


def test_synthesize_rejects_negative_eps():
    p = problem_1d()
    with pytest.raises(ConfigurationError):
        synthesize_data(p, p.zero_control(), eps=-1.0)


# --------------------------------------------------------------------------- posterior

@pytest.fixture(scope="module")
def posterior_problem():
    p = problem_1d()
    return p.with_data(synthesize_data(p, const_u(p, [0.8])))


def test_posterior_zero_functional_exact(posterior_problem):
    rows = posterior_laplace_check(posterior_problem, None, None, [0.2, 0.1, 0.05], 2000, seed=1)
    assert all(r["estimate"] == 0.0 for r in rows)


def test_posterior_constant_functional_exact(posterior_problem):
    rows = posterior_laplace_check(posterior_problem, ConstantFunctional(1.7), None, [0.2, 0.05],
                                   2000, seed=1)
    assert all(r["estimate"] == 1.7 and r["target"] == 1.7 for r in rows)


def test_posterior_rows_are_consistent(posterior_problem):
    pts = np.linspace(0.1, 0.9, 5)[:, None]
    F = LatticeDistanceFunctional(pts, weight=5.0)
    rows = posterior_laplace_check(posterior_problem, F, pts, [0.2, 0.1], 2000, seed=2,
                                   multistart=2)
    for r in rows:
        assert r["estimate"] == pytest.approx(r["term1"] + r["term2"], abs=1e-14)
        assert r["stderr"] > 0 and r["ess"] > 2
        assert r["target"] >= -1e-8 and r["target_cells"] >= -1e-8


def test_posterior_validation(posterior_problem):
    with pytest.raises(ConfigurationError):
        posterior_laplace_check(posterior_problem, None, None, [], 100, seed=0)
    with pytest.raises(ConfigurationError):
        posterior_laplace_check(problem_1d(), None, None, [0.1], 100, seed=0)


def test_lattice_distance_gradient():
    pts = np.array([[0.2], [0.5], [0.8]])
    F = LatticeDistanceFunctional(pts, weight=2.0)
    Z = pts + np.array([[0.1], [-0.2], [0.05]])
    h = 1e-6
    fd = np.zeros_like(Z)
    for idx in np.ndindex(*Z.shape):
        e = np.zeros_like(Z)
        e[idx] = h
        fd[idx] = (F(Z + e) - F(Z - e)) / (2 * h)
    np.testing.assert_allclose(F.grad(Z), fd, rtol=1e-6)
    assert F(pts) == 0.0


# --------------------------------------------------------------------------- rate I_d

@pytest.fixture(scope="module")
def rate_problem():
    p = problem_1d(convention="average")
    p = p.with_data(synthesize_data(p, const_u(p, [0.8])))
    res = compute_lambda_d(p, multistart=3)
    return p, res


def test_rate_Id_requires_lambda():
    p = problem_1d().with_data(np.zeros(10))
    with pytest.raises(MissingCacheError):
        rate_Id(p, p.zero_control())


def test_rate_Id_zero_at_minimiser(rate_problem):
    p, res = rate_problem
    assert abs(rate_Id(p, res.u_star)) <= 1e-12


def test_rate_Id_nonnegative(rate_problem):
    p, _ = rate_problem
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = ControlPath(rng.normal(size=(1, p.n_steps)), p.dt)
        assert rate_Id(p, u) >= -1e-9


def test_rate_Id_recomputation(rate_problem):
    p, res = rate_problem
    u2 = res.u_star.scaled(2.0)
    assert abs(rate_Id(p, u2) - (objective_Jd(p, u2)[0] - p.lambda_d)) <= 1e-10


# --------------------------------------------------------------------------- templates

def test_raster_template_bilinear(tmp_path):
    # bilinear interpolation reproduces an affine image exactly
    xs, ys = np.linspace(0, 1, 5), np.linspace(0, 1, 4)
    vals = np.array([[1 + 2 * x - y for x in xs] for y in ys])
    text = "2 5 4 0 1 0 1\n" + "\n".join(" ".join(repr(float(v)) for v in row) for row in vals)
    path = tmp_path / "img.txt"
    path.write_text(text)
    T = load_raster_template(str(path))
    pts = np.random.default_rng(0).random((30, 2))
    np.testing.assert_allclose(T(pts), 1 + 2 * pts[:, 0] - pts[:, 1], atol=1e-14)
    np.testing.assert_allclose(T.grad(pts), np.tile([2.0, -1.0], (30, 1)), atol=1e-12)
    assert T.bound == np.max(np.abs(vals))


def test_raster_1d_and_errors():
    T = load_raster_template("1 3 0 1\n0 1 0\n")
    assert T(np.array([[0.25]])) == pytest.approx(0.5)
    assert T(np.array([[0.75]])) == pytest.approx(0.5)
    with pytest.raises(ConstructionError):
        load_raster_template("1 4 0 1\n0 1 0\n")


@pytest.mark.parametrize("cfg", [
    EDGE, {"kind": "gaussian", "dim": 2, "center": [0.5, 0.5], "width": 0.2},
    {"kind": "affine", "dim": 2, "coeffs": [1.0, -2.0]}])
def test_template_gradients_and_bounds(cfg):
    T = template_from_config(cfg)
    x = np.random.default_rng(1).random((10, cfg["dim"]))
    h = 1e-6
    for j in range(cfg["dim"]):
        e = np.zeros(cfg["dim"])
        e[j] = h
        np.testing.assert_allclose(T.grad(x)[:, j], (T(x + e) - T(x - e)) / (2 * h), rtol=1e-6,
                                   atol=1e-9)
    assert np.all(np.abs(T(x)) <= T.bound)


def test_template_registry_errors():
    with pytest.raises(ConstructionError):
        template_from_config({"kind": "photo"})
    with pytest.raises(ConstructionError):
        template_from_config({"kind": "edge", "dim": 1, "position": 0.5})


def test_problem_validation():
    T = template_from_config(EDGE)
    basis = make_imaging_basis(1, [[0.5]], 0.25)
    with pytest.raises(ConfigurationError):
        MatchProblem(T, CellPartition.uniform([4]), [1.0, 2.0], basis)
    with pytest.raises(ConfigurationError):
        MatchProblem(T, CellPartition.uniform([4]), None, basis, convention="median")
    from stochflow.kernels import make_gaussian_bump_basis
    wide = make_gaussian_bump_basis(1, [[0.5]], 0.25, 1.0, [[-1.0, 2.0]])
    with pytest.raises(ConfigurationError):
        MatchProblem(T, CellPartition.uniform([4]), None, wide)
