"""Direct sparse solution of the saddle systems behind PDAS and the discrete
weighted H^-1 machinery.

Systems are solved with a sparse LU factorization (deterministic column
ordering), and every solve is residual-checked.  The zero-mean condition of
the weighted Poisson solver is imposed through one Lagrange-multiplier row
rather than by pinning a dof, which keeps the operator symmetric and matches
the mean-free definition exactly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly
from .mesh import NodalVector

RESIDUAL_RTOL = 1e-9


class SingularSystemError(RuntimeError):
    """Raised when a linear system is singular or a solve fails its residual check."""


class BlockSystem:
    """Assembled sparse system with a cached LU factorization."""

    def __init__(self, matrix, label=""):
        self.matrix = sp.csc_matrix(matrix)
        self.label = label
        self._lu = None
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"system must be square, got {self.matrix.shape}")

    @classmethod
    def from_blocks(cls, blocks, label=""):
        return cls(sp.bmat(blocks, format="csc"), label)

    @property
    def factor(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:  # SuperLU reports exact singularity this way
                raise SingularSystemError(f"singular system ({self.label}): {exc}") from exc
        return self._lu

    def solve_many(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        x = self.factor.solve(rhs)
        res = np.abs(self.matrix @ x - rhs).max()
        scale = 1.0 + np.abs(rhs).max()
        if not np.isfinite(res) or res > RESIDUAL_RTOL * scale:
            raise SingularSystemError(
                f"solve failed residual check ({self.label}): |r|_inf = {res:.3e}, scale = {scale:.3e}"
            )
        return x

    def solve(self, rhs):
        return self.solve_many(np.asarray(rhs, dtype=float).reshape(-1))


def solve(system, rhs):
    """Solve a BlockSystem (or raw sparse matrix) against one right-hand side."""
    if not isinstance(system, BlockSystem):
        system = BlockSystem(system)
    return system.solve(rhs)


def attach_mean_row(matrix, q):
    """Border a matrix with the mean-constraint row/column (int phi_i)."""
    q = np.asarray(q, dtype=float)
    return sp.bmat([[matrix, q[:, None]], [q[None, :], None]], format="csc")


class WeightedPoisson:
    """Discrete weighted Poisson solver: z with (M grad z, grad v) = (g, v), int z = 0.

    `g` enters through its load vector; the factorization is cached so the
    operator can be applied repeatedly (H^-1 norms, energy evaluations).
    """

    def __init__(self, space, m_coeff):
        self.space = space
        self.stiffness = assembly.assemble_stiffness(space, m_coeff)
        _, _, self.q = assembly.unit_system(space)
        self.system = BlockSystem(attach_mean_row(self.stiffness, self.q), label="weighted Poisson")

    def apply_load(self, load, check_mean=True):
        load = np.asarray(load, dtype=float)
        if check_mean:
            total = abs(load.sum())
            if total > 1e-10 * (1.0 + np.abs(load).sum()):
                raise ValueError(
                    f"source is not mean-free (sum = {load.sum():.3e}); "
                    "mass conservation was violated upstream"
                )
        sol = self.system.solve(np.concatenate([load, [0.0]]))
        return sol[:-1]

    def norm_sq(self, load, check_mean=True):
        """Squared weighted discrete H^-1 seminorm of the functional `load`."""
        z = self.apply_load(load, check_mean=check_mean)
        return float(load @ z)


def h_minus1_apply(space, m_coeff, g):
    """One-shot weighted Poisson solve.

    `g` may be a NodalVector (interpreted as an FE function, its load vector
    is formed with the mass matrix) or a raw load vector.
    """
    if isinstance(g, NodalVector):
        b, _, _ = assembly.unit_system(space)
        load = b @ g.values
    else:
        load = np.asarray(g, dtype=float)
    z = WeightedPoisson(space, m_coeff).apply_load(load)
    return NodalVector(z, space)
