"""Counter-based Gaussian increments.

Each sample path owns a Philox stream keyed by ``(seed, path)``; within the
stream, increments are laid out mode-major, ``(mode, step)``.  A path's
increments therefore depend only on its key, never on which worker drew it
or in what order.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def path_key(seed, path):
    return (int(seed) & _MASK64) | ((int(path) & _MASK64) << 64)


def path_generator(seed, path=0):
    return np.random.Generator(np.random.Philox(key=path_key(seed, path)))


def brownian_increments(seed, path, n_modes, n_steps, dt):
    """``(n_modes, n_steps)`` array of N(0, dt) increments for one path."""
    z = path_generator(seed, path).standard_normal((n_modes, n_steps))
    return np.sqrt(dt) * z


def brownian_batch(seed, paths, n_modes, n_steps, dt):
    """Stack of increments for several paths, shape ``(len(paths), L, M)``."""
    out = np.empty((len(paths), n_modes, n_steps))
    for i, p in enumerate(paths):
        out[i] = brownian_increments(seed, p, n_modes, n_steps, dt)
    return out


# path indices reserved for auxiliary draws, well away from sample paths
AUX_PATH_BASE = 1 << 62
