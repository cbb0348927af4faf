import math

import numpy as np
import pytest

from stochflow import _rng
from stochflow.control_flow import ControlPath
from stochflow.errors import BlowUpError, CapabilityError, ConfigurationError
from stochflow.flow_sim import (NoisePath, ball_lattice, check_flow_property, flow_distance,
                                invert_flow, jacobian_flow, simulate_flow)
from stochflow.kernels import (BasisFamily, CallableField, ConstantField, LinearField,
                               make_constant_basis, make_gaussian_bump_basis, make_linear_basis)
from stochflow.trajectory import FlowTrajectory


def test_zero_everything_is_identity(bump2d):
    pts = [[0.1, 0.2], [-1.0, 0.5]]
    noise = NoisePath.generate(bump2d.n_modes, 50, 0.02, seed=1)
    tr = simulate_flow(bump2d, None, 0.0, pts, 0.0, 1.0, noise, with_jacobians=True)
    assert np.all(tr.positions == np.asarray(pts)[None])
    assert np.all(tr.jacobians == np.eye(2))


def test_constant_drift_exact():
    basis = make_constant_basis([[1.0]], drift=ConstantField([0.5]))
    tr = simulate_flow(basis, None, 0.0, [[0.0], [2.0]], 0.0, 1.0, None, dt=0.25)
    np.testing.assert_allclose(tr.positions[:, :, 0],
                               np.array([0.0, 2.0])[None] + 0.5 * tr.times[:, None], atol=1e-15)


def test_geometric_brownian_motion_strong_error(gbm_basis):
    dt = 1e-4
    noise = NoisePath.generate(1, 10_000, dt, seed=2024)
    tr = simulate_flow(gbm_basis, None, 1.0, [[1.0]], 0.0, 1.0, noise)
    beta1 = float(np.sum(noise.increments[0]))
    exact = math.exp(beta1 - 0.5)
    assert abs(tr.endpoint[0, 0] - exact) <= 5e-2


def test_gbm_jacobian_is_position_over_start(gbm_basis):
    noise = NoisePath.generate(1, 200, 0.005, seed=9)
    x0 = 1.7
    tr = simulate_flow(gbm_basis, None, 1.0, [[x0]], 0.0, 1.0, noise, with_jacobians=True)
    np.testing.assert_allclose(tr.jacobians[:, 0, 0, 0], tr.positions[:, 0, 0] / x0, rtol=1e-12)


def test_constant_mode_jacobian_is_identity():
    basis = make_constant_basis([[1.0, 0.0], [0.3, 0.7]])
    noise = NoisePath.generate(2, 40, 0.025, seed=3)
    J = jacobian_flow(basis, None, 0.5, [[0.0, 0.0], [1.0, -2.0]], 0.0, 1.0, noise)
    assert np.all(J == np.eye(2))


@pytest.mark.parametrize("seed", [0, 1])
def test_bump_jacobian_matches_finite_differences(bump2d, seed):
    dt = 0.01
    noise = NoisePath.generate(bump2d.n_modes, 100, dt, seed=seed)
    x0 = np.array([[0.2, -0.3], [-0.6, 0.4]])
    J = jacobian_flow(bump2d, None, 0.1, x0, 0.0, 1.0, noise)[-1]
    h = 1e-5
    for p in range(2):
        fd = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            plus = simulate_flow(bump2d, None, 0.1, [x0[p] + e], 0.0, 1.0, noise).endpoint[0]
            minus = simulate_flow(bump2d, None, 0.1, [x0[p] - e], 0.0, 1.0, noise).endpoint[0]
            fd[:, j] = (plus - minus) / (2 * h)
        assert np.max(np.abs(J[p] - fd)) <= 1e-3 * np.max(np.abs(fd))


def test_jacobians_need_gradients():
    basis = BasisFamily(1, (CallableField(1, lambda x, t: np.sin(x)),))
    noise = NoisePath.generate(1, 10, 0.1, seed=0)
    with pytest.raises(CapabilityError):
        jacobian_flow(basis, None, 0.1, [[0.3]], 0.0, 1.0, noise)
    simulate_flow(basis, None, 0.1, [[0.3]], 0.0, 1.0, noise)


def test_linear_drift_semigroup_defect_is_first_order():
    basis = BasisFamily(1, (), LinearField([[1.0]]), 1.0)
    pts = [[1.0], [0.5]]
    defects = []
    for dt in (0.01, 0.005, 0.0025):
        defects.append(check_flow_property(basis, None, 0.0, pts, 0.0, 0.5, 1.0, None, dt=dt))
    for a, b in zip(defects, defects[1:]):
        assert 1.7 <= a / b <= 2.3


def test_additive_noise_composes_exactly():
    basis = make_constant_basis([[1.0]])
    noise = NoisePath.generate(1, 100, 0.01, seed=5)
    assert check_flow_property(basis, None, 0.3, [[0.0], [1.0]], 0.0, 0.37, 1.0, noise) == 0.0


def test_degenerate_times_give_zero_defect(bump2d):
    noise = NoisePath.generate(bump2d.n_modes, 100, 0.01, seed=5)
    assert check_flow_property(bump2d, None, 0.1, [[0.1, 0.2]], 0.5, 0.5, 0.5, noise) == 0.0


def test_misaligned_grids_raise(bump2d):
    noise = NoisePath.generate(bump2d.n_modes, 100, 0.01, seed=5)
    u = ControlPath.zero(bump2d.n_modes, 40, 0.025)
    with pytest.raises(ConfigurationError):
        simulate_flow(bump2d, u, 0.1, [[0, 0]], 0.0, 1.0, noise)
    with pytest.raises(ConfigurationError):
        simulate_flow(bump2d, None, 0.1, [[0, 0]], 0.0, 0.505, noise)
    short = NoisePath.generate(bump2d.n_modes, 10, 0.01, seed=5)
    with pytest.raises(ConfigurationError):
        simulate_flow(bump2d, None, 0.1, [[0, 0]], 0.0, 0.5, short)


def test_blow_up_reports_step():
    basis = BasisFamily(1, (), LinearField([[50.0]]), 400.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(BlowUpError) as info:
            simulate_flow(basis, None, 0.0, [[1.0]], 0.0, 400.0, None, dt=0.5)
    assert 150 < info.value.step < 400


def test_determinism(bump2d):
    a = simulate_flow(bump2d, None, 0.1, [[0.1, 0.2]], 0.0, 1.0,
                      NoisePath.generate(bump2d.n_modes, 100, 0.01, seed=77), True)
    b = simulate_flow(bump2d, None, 0.1, [[0.1, 0.2]], 0.0, 1.0,
                      NoisePath.generate(bump2d.n_modes, 100, 0.01, seed=77), True)
    assert a.to_bytes() == b.to_bytes()


def test_increments_are_independent_of_batching():
    single = [_rng.brownian_increments(3, p, 2, 50, 0.01) for p in range(5)]
    batch = _rng.brownian_batch(3, range(5), 2, 50, 0.01)
    for p in range(5):
        assert np.array_equal(single[p], batch[p])
    sub = _rng.brownian_batch(3, range(2, 4), 2, 50, 0.01)
    assert np.array_equal(sub[0], single[2])


def test_increment_statistics():
    inc = _rng.brownian_batch(11, range(200), 3, 500, 0.01) / 0.1
    z = inc.ravel()
    assert abs(z.mean()) < 5 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 5 * math.sqrt(2 / z.size)


def test_orientation_preserved_at_small_noise():
    basis = make_gaussian_bump_basis(2, [[-0.5, 0.0], [0.5, 0.0], [0.0, 0.5], [0.0, -0.5]],
                                     0.5, 1.0, [[-2, 2], [-2, 2]])
    noise = NoisePath.generate(basis.n_modes, 1000, 1e-3, seed=8)
    grid = np.stack(np.meshgrid(np.linspace(-1, 1, 5), np.linspace(-1, 1, 5)), -1).reshape(-1, 2)
    J = jacobian_flow(basis, None, 0.1, grid, 0.0, 1.0, noise)
    assert np.all(np.linalg.det(J) > 0)


def test_trajectory_exports_roundtrip(bump2d):
    noise = NoisePath.generate(bump2d.n_modes, 10, 0.1, seed=4)
    tr = simulate_flow(bump2d, None, 0.1, [[0.1, 0.2], [0.3, 0.4]], 0.0, 1.0, noise, True)
    back = FlowTrajectory.from_bytes(tr.to_bytes())
    assert np.array_equal(back.positions, tr.positions)
    assert np.array_equal(back.jacobians, tr.jacobians)
    assert back.eps == 0.1 and back.meta["seed"] == 4
    assert tr.to_bytes()[:4] == b"SFLW"
    lines = tr.to_csv().splitlines()
    assert lines[0].split(",")[:4] == ["time", "point_id", "x_1", "x_2"]
    assert "J_11" in lines[0]
    assert len(lines) == 1 + 11 * 2
    row = lines[-1].split(",")
    assert float(row[2]) == tr.positions[-1, 1, 0]


# --------------------------------------------------------------------------- distance

def _translation_pair(shift):
    pts = ball_lattice(1, 4)
    times = np.array([0.0, 1.0])
    eye = np.broadcast_to(np.eye(1), (2, pts.shape[0], 1, 1)).copy()
    fwd = FlowTrajectory(pts, times, np.stack([pts, pts + shift]), eye, 0.0, {})
    inv = FlowTrajectory(pts, times, np.stack([pts, pts - shift]), eye, 0.0, {})
    ident = FlowTrajectory(pts, times, np.stack([pts, pts]), eye, 0.0, {})
    return fwd, inv, ident


def test_distance_of_identical_flows_is_zero(bump2d):
    noise = NoisePath.generate(bump2d.n_modes, 20, 0.05, seed=3)
    pts = ball_lattice(2, 2, per_axis=5)
    a = simulate_flow(bump2d, None, 0.1, pts, 0.0, 1.0, noise, True)
    assert flow_distance(a, a, m=0, N_max=2) == 0.0
    assert flow_distance(a, a, m=1, N_max=2) == 0.0


def test_translation_distance():
    fwd, inv, ident = _translation_pair(1.0)
    d = flow_distance(fwd, ident, m=0, N_max=4, inverse_a=inv, inverse_b=ident)
    assert d == pytest.approx(2 * (1 - 2**-4) * 0.5, abs=1e-15)
    assert d == pytest.approx(0.9375, abs=1e-15)


def _double_loop_distance(A, B, IA, IB, N_max):
    best = 0.0
    for k in range(A.times.size):
        total = 0.0
        for fa, fb in ((A, B), (IA, IB)):
            for N in range(1, N_max + 1):
                s = 0.0
                for p in range(A.points.shape[0]):
                    if math.sqrt(sum(v * v for v in A.points[p])) <= N + 1e-12:
                        diff = math.sqrt(sum((fa.positions[k, p, i] - fb.positions[k, p, i]) ** 2
                                             for i in range(A.dim)))
                        s = max(s, diff)
                total += 2.0 ** (-N) * s / (1 + s)
        best = max(best, total)
    return best


def test_distance_matches_double_loop(bump2d):
    pts = ball_lattice(2, 2, per_axis=5)
    na = NoisePath.generate(bump2d.n_modes, 20, 0.05, seed=1)
    nb = NoisePath.generate(bump2d.n_modes, 20, 0.05, seed=2)
    A = simulate_flow(bump2d, None, 0.1, pts, 0.0, 1.0, na, True)
    B = simulate_flow(bump2d, None, 0.1, pts, 0.0, 1.0, nb, True)
    IA, IB = invert_flow(A), invert_flow(B)
    d = flow_distance(A, B, m=0, N_max=2, inverse_a=IA, inverse_b=IB)
    assert d > 0
    assert abs(d - _double_loop_distance(A, B, IA, IB, 2)) <= 1e-12


def test_inverse_of_deterministic_flow(bump2d):
    u = ControlPath(np.random.default_rng(0).normal(size=(bump2d.n_modes, 20)), 0.05)
    pts = ball_lattice(2, 1, per_axis=5)
    fwd = simulate_flow(bump2d, u, 0.0, pts, 0.0, 1.0, None, dt=0.05)
    inv = invert_flow(fwd, basis=bump2d, control=u)
    back = simulate_flow(bump2d, u, 0.0, inv.positions[-1], 0.0, 1.0, None, dt=0.05)
    # Euler forward vs RK4 backward: agreement to first order in dt
    assert np.max(np.abs(back.endpoint - pts)) < 0.05


def test_newton_inverse_of_noisy_flow(bump2d):
    pts = ball_lattice(2, 1, per_axis=9)
    noise = NoisePath.generate(bump2d.n_modes, 100, 0.01, seed=6)
    fwd = simulate_flow(bump2d, None, 0.05, pts, 0.0, 1.0, noise, True)
    inv = invert_flow(fwd)
    inner = np.linalg.norm(pts, axis=1) < 0.5
    again = simulate_flow(bump2d, None, 0.05, inv.positions[-1][inner], 0.0, 1.0, noise)
    assert np.max(np.abs(again.endpoint - pts[inner])) < 0.02


def test_distance_rejects_mismatched_grids(bump2d):
    fwd, inv, ident = _translation_pair(1.0)
    other = FlowTrajectory(fwd.points, np.array([0.0, 0.5]), fwd.positions, fwd.jacobians, 0.0, {})
    with pytest.raises(ConfigurationError):
        flow_distance(fwd, other, inverse_a=inv, inverse_b=inv)
