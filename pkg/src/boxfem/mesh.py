"""Structured meshes, order-p Lagrange spaces, quadrature and nodal interpolation.

Meshes are uniform tensor-product grids on an interval (1D) or a rectangle
(2D).  Degrees of freedom are the values at equispaced Lagrange nodes, with
one global index per mesh node (C0 continuity), ordered lexicographically by
coordinate so that all downstream output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class Mesh:
    """Uniform tensor-product mesh.

    Attributes
    ----------
    lo, hi : tuple of float
        Domain bounds per axis.
    cells : tuple of int
        Number of cells per axis (>= 1 each).
    """

    lo: tuple
    hi: tuple
    cells: tuple

    def __post_init__(self):
        self.lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        self.hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        self.cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        if not (len(self.lo) == len(self.hi) == len(self.cells)):
            raise ValueError("inconsistent axis counts")
        if self.dim not in (1, 2):
            raise ValueError("only 1D and 2D meshes are supported")
        for a, b, c in zip(self.lo, self.hi, self.cells):
            if c < 1:
                raise ValueError("cells per axis must be >= 1")
            if not b > a:
                raise ValueError("domain bounds must satisfy hi > lo")

    @property
    def dim(self):
        return len(self.cells)

    @property
    def h(self):
        """Cell size per axis."""
        return tuple((b - a) / c for a, b, c in zip(self.lo, self.hi, self.cells))

    @property
    def cell_diameter(self):
        """Diameter of one cell (all cells are congruent)."""
        return float(np.hypot(*self.h)) if self.dim == 2 else self.h[0]

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    @property
    def volume(self):
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))


def interval(x0, x1, n):
    return Mesh((x0,), (x1,), (n,))


def rectangle(xspan, yspan, cells):
    return Mesh((xspan[0], yspan[0]), (xspan[1], yspan[1]), (cells[0], cells[1]))


def lagrange_basis_1d(p, pts):
    """Equispaced Lagrange basis on the reference cell [0, 1].

    Returns (values, derivatives), each of shape (p+1, len(pts)).
    """
    pts = np.asarray(pts, dtype=float)
    nodes = np.linspace(0.0, 1.0, p + 1)
    vals = np.ones((p + 1, pts.size))
    ders = np.zeros((p + 1, pts.size))
    for j in range(p + 1):
        for m in range(p + 1):
            if m == j:
                continue
            djm = nodes[j] - nodes[m]
            ders[j] = (ders[j] * (pts - nodes[m]) + vals[j]) / djm
            vals[j] = vals[j] * (pts - nodes[m]) / djm
    return vals, ders


@dataclass(eq=False)
class QuadratureRule:
    """Tensorized Gauss-Legendre rule on the reference cell [0,1]^dim.

    Exact for polynomials of degree <= 2*npts-1 per axis.
    """

    points: np.ndarray  # (nq, dim)
    weights: np.ndarray  # (nq,)

    @classmethod
    def gauss(cls, dim, npts):
        x, w = np.polynomial.legendre.leggauss(npts)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        if dim == 1:
            return cls(x[:, None].copy(), w.copy())
        px, py = np.meshgrid(x, x, indexing="ij")
        wx, wy = np.meshgrid(w, w, indexing="ij")
        pts = np.column_stack([px.ravel(), py.ravel()])
        return cls(pts, (wx * wy).ravel())


def default_quadrature(p, dim, extra=0):
    """Rule used for assembly: ceil((2p+3)/2) = p+2 points per axis."""
    return QuadratureRule.gauss(dim, p + 2 + extra)


@dataclass(eq=False)
class FeSpace:
    """Continuous order-p Lagrange space on a structured mesh.

    dof_coords holds the global node coordinates, shape (ndof, dim), sorted
    lexicographically.  connectivity maps cell -> local dof -> global dof.
    """

    mesh: Mesh
    order: int
    dof_coords: np.ndarray
    connectivity: np.ndarray
    nodes_per_axis: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def ndof(self):
        return self.dof_coords.shape[0]

    @property
    def dim(self):
        return self.mesh.dim

    def boundary_dofs(self):
        """Global indices of dofs on the domain boundary."""
        if self.dim == 1:
            return np.array([0, self.ndof - 1])
        nx, ny = self.nodes_per_axis
        ix, iy = np.divmod(np.arange(self.ndof), ny)
        on_bnd = (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)
        return np.flatnonzero(on_bnd)

    def cell_of(self, pts):
        """Cell multi-index and local coordinates for physical points (n, dim)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells = np.empty((pts.shape[0], self.dim), dtype=int)
        local = np.empty_like(pts)
        for ax in range(self.dim):
            lo, h, nc = self.mesh.lo[ax], self.mesh.h[ax], self.mesh.cells[ax]
            rel = (pts[:, ax] - lo) / h
            if np.any(rel < -1e-12) or np.any(rel > nc + 1e-12):
                raise ValueError("point outside the mesh domain")
            e = np.clip(np.floor(rel).astype(int), 0, nc - 1)
            cells[:, ax] = e
            local[:, ax] = rel - e
        return cells, local


def build_space(mesh, p):
    """Build the order-p Lagrange space on `mesh`.

    1D dof count is p*cells+1; 2D is (p*cells_x+1)*(p*cells_y+1).
    """
    p = int(p)
    if not 1 <= p <= 4:
        raise ValueError(f"polynomial order must be in 1..4, got {p}")
    if mesh.dim == 1:
        n = mesh.cells[0]
        nn = p * n + 1
        coords = np.linspace(mesh.lo[0], mesh.hi[0], nn)[:, None]
        conn = p * np.arange(n)[:, None] + np.arange(p + 1)[None, :]
        return FeSpace(mesh, p, coords, conn.astype(int), (nn,))
    nx, ny = mesh.cells
    nnx, nny = p * nx + 1, p * ny + 1
    xs = np.linspace(mesh.lo[0], mesh.hi[0], nnx)
    ys = np.linspace(mesh.lo[1], mesh.hi[1], nny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ex, ey = ex.ravel(), ey.ravel()
    jx, jy = np.meshgrid(np.arange(p + 1), np.arange(p + 1), indexing="ij")
    jx, jy = jx.ravel(), jy.ravel()
    conn = (p * ex[:, None] + jx[None, :]) * nny + (p * ey[:, None] + jy[None, :])
    return FeSpace(mesh, p, coords, conn.astype(int), (nnx, nny))


@dataclass(eq=False)
class NodalVector:
    """Coefficient vector of a finite-element function."""

    values: np.ndarray
    space: FeSpace

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.ndof,):
            raise ValueError("length must equal the dof count of the space")

    def copy(self):
        return NodalVector(self.values.copy(), self.space)

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)


def call_on_points(fn, pts):
    """Evaluate a scalar function given per-axis coordinate arrays."""
    pts = np.atleast_2d(pts)
    out = fn(*(pts[:, ax] for ax in range(pts.shape[1])))
    return np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()


def interpolate(space, g):
    """Nodal interpolation: V_i = g(x_i)."""
    return NodalVector(call_on_points(g, space.dof_coords), space)


def _tensor_basis(space, local, grad=False):
    """Basis values (n, nloc) and optionally physical gradients (n, dim, nloc)
    at per-point local coordinates."""
    p = space.order
    if space.dim == 1:
        vals, ders = lagrange_basis_1d(p, local[:, 0])
        if not grad:
            return vals.T, None
        return vals.T, (ders.T / space.mesh.h[0])[:, None, :]
    vx, dx = lagrange_basis_1d(p, local[:, 0])
    vy, dy = lagrange_basis_1d(p, local[:, 1])
    # local index jl = jx*(p+1) + jy
    vals = (vx[:, None, :] * vy[None, :, :]).reshape((p + 1) ** 2, -1).T
    if not grad:
        return vals, None
    gx = (dx[:, None, :] * vy[None, :, :]).reshape((p + 1) ** 2, -1).T / space.mesh.h[0]
    gy = (vx[:, None, :] * dy[None, :, :]).reshape((p + 1) ** 2, -1).T / space.mesh.h[1]
    return vals, np.stack([gx, gy], axis=1)


def evaluate_many(v, pts, grad=False):
    """Evaluate a NodalVector (and optionally its gradient) at points (n, dim)."""
    space = v.space
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    cells, local = space.cell_of(pts)
    if space.dim == 1:
        cell_flat = cells[:, 0]
    else:
        cell_flat = cells[:, 0] * space.mesh.cells[1] + cells[:, 1]
    dofs = space.connectivity[cell_flat]  # (n, nloc)
    coeffs = v.values[dofs]
    vals, grads = _tensor_basis(space, local, grad=grad)
    out = np.einsum("nj,nj->n", coeffs, vals)
    if not grad:
        return out
    gout = np.einsum("nj,ndj->nd", coeffs, grads)
    return out, gout


def evaluate(v, x):
    """Point evaluation sum_i V_i phi_i(x)."""
    return float(evaluate_many(v, np.atleast_2d(np.asarray(x, dtype=float)))[0])
