import sys

import numpy as np
import pytest

from stochflow.kernels import (CallableField, ConstantField, LinearField, make_constant_basis,
                               make_gaussian_bump_basis, make_linear_basis, BasisFamily)


@pytest.fixture
def translation_basis():
    """dx = u dt + sqrt(eps) dW in one dimension."""
    return make_constant_basis([[1.0]])


@pytest.fixture
def gbm_basis():
    """Single linear mode f(x) = x."""
    return make_linear_basis([[[1.0]]])


@pytest.fixture
def bump8():
    centers = np.linspace(0.1, 0.9, 8)[:, None]
    return make_gaussian_bump_basis(1, centers, 0.15, 1.0, [[0.0, 1.0]])


@pytest.fixture
def bump2d():
    centers = [[-0.4, 0.0], [0.4, 0.1], [0.0, -0.5]]
    return make_gaussian_bump_basis(2, centers, 0.6, 0.8, [[-2.0, 2.0], [-2.0, 2.0]])


def fd_jacobian(fn, x, h=1e-6):
    """Central-difference Jacobian ``[i, j] = d fn_i / d x_j`` at a single point."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def pytest_terminal_summary(terminalreporter):
    """Print one verdict line per acceptance criterion that ran."""
    module = sys.modules.get("test_acceptance")
    RESULTS = getattr(module, "RESULTS", None)
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
