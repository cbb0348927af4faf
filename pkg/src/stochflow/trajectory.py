"""Time-indexed positions (and Jacobians) of a finite point set under a flow."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError

MAGIC = b"SFLW"
FORMAT_VERSION = 1
# magic, version, d, P, M, eps, seed (u64), flags (bit 0: jacobians, bit 1: seed set)
_HEADER = struct.Struct("<4sHHIIdQB")
_HAS_JAC, _HAS_SEED = 1, 2


@dataclass
class FlowTrajectory:
    points: np.ndarray            # (P, d)
    times: np.ndarray             # (M + 1,)
    positions: np.ndarray         # (M + 1, P, d)
    jacobians: Optional[np.ndarray] = None  # (M + 1, P, d, d)
    eps: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def endpoint(self):
        return self.positions[-1]

    def to_csv(self, path_or_buf=None):
        """Columns: time, point_id, x_1..x_d[, J_11..J_dd]."""
        d = self.dim
        cols = ["time", "point_id"] + [f"x_{i + 1}" for i in range(d)]
        if self.jacobians is not None:
            cols += [f"J_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        M1, P = self.positions.shape[:2]
        t = np.repeat(self.times, P)
        pid = np.tile(np.arange(P), M1)
        blocks = [t[:, None], pid[:, None], self.positions.reshape(-1, d)]
        if self.jacobians is not None:
            blocks.append(self.jacobians.reshape(-1, d * d))
        table = np.hstack(blocks)
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        fmt = ["%.17g", "%d"] + ["%.17g"] * (table.shape[1] - 2)
        np.savetxt(buf, table, fmt=fmt, delimiter=",")
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        with open(path_or_buf, "w") as fh:
            fh.write(text)
        return None

    def to_bytes(self):
        d, P, M = self.dim, self.n_points, self.n_steps
        has_j = self.jacobians is not None
        seed = self.meta.get("seed")
        flags = (_HAS_JAC if has_j else 0) | (_HAS_SEED if seed is not None else 0)
        head = _HEADER.pack(MAGIC, FORMAT_VERSION, d, P, M, float(self.eps),
                            0 if seed is None else int(seed), flags)
        parts = [head, self.points.astype("<f8").tobytes(), self.times.astype("<f8").tobytes(),
                 self.positions.astype("<f8").tobytes()]
        if has_j:
            parts.append(self.jacobians.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob):
        magic, version, d, P, M, eps, seed, flags = _HEADER.unpack_from(blob, 0)
        has_j = flags & _HAS_JAC
        if magic != MAGIC or version != FORMAT_VERSION:
            raise ConfigurationError("not a flow trajectory dump (bad magic/version)")
        off = _HEADER.size

        def take(count, shape):
            nonlocal off
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            return arr.astype(float)

        points = take(P * d, (P, d))
        times = take(M + 1, (M + 1,))
        positions = take((M + 1) * P * d, (M + 1, P, d))
        jac = take((M + 1) * P * d * d, (M + 1, P, d, d)) if has_j else None
        return cls(points, times, positions, jac, eps, {"seed": seed if flags & _HAS_SEED else None})
