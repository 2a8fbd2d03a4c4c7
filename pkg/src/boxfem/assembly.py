"""Sparse assembly of weighted mass/stiffness matrices and load vectors.

Coefficients may be constants, scalar functions of position, symmetric
matrix-valued functions of position, or nodal fields (a NodalVector pushed
through an optional pointwise map, e.g. a mobility M applied to the FE
interpolant of a discrete state).  All cells are congruent, so one set of
reference basis tables serves the whole mesh and assembly vectorizes over
cells.
"""

from __future__ import annotations

import numbers

import numpy as np
import scipy.sparse as sp

from .mesh import NodalVector, call_on_points, default_quadrature, lagrange_basis_1d


class Coefficient:
    """Tagged union of the coefficient kinds accepted by the assemblers."""

    def __init__(self, kind, value=None, fn=None, vec=None, transform=None):
        self.kind = kind
        self.value = value
        self.fn = fn
        self.vec = vec
        self.transform = transform

    @classmethod
    def constant(cls, value):
        return cls("const", value=float(value))

    @classmethod
    def function(cls, fn):
        return cls("func", fn=fn)

    @classmethod
    def matrix(cls, fn):
        """fn(x, y) -> array (n, 2, 2), symmetric at every sample point."""
        return cls("matrix", fn=fn)

    @classmethod
    def nodal(cls, vec, transform=None):
        """FE field, optionally composed with a pointwise map `transform`."""
        return cls("nodal", vec=vec, transform=transform)


def as_coefficient(obj):
    if isinstance(obj, Coefficient):
        return obj
    if isinstance(obj, numbers.Number):
        return Coefficient.constant(obj)
    if isinstance(obj, NodalVector):
        return Coefficient.nodal(obj)
    if callable(obj):
        return Coefficient.function(obj)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a coefficient")


def _tables(space, nq_axis):
    """Reference basis tables at quadrature points, cached per space.

    Returns dict with vals (nloc, nq), grads (dim, nloc, nq), qw (nq,),
    detj (float), pts (ncells, nq, dim).
    """
    key = ("tables", nq_axis)
    if key in space._cache:
        return space._cache[key]
    p, dim, mesh = space.order, space.dim, space.mesh
    rule = default_quadrature(p, dim, extra=nq_axis - (p + 2))
    if dim == 1:
        vals, ders = lagrange_basis_1d(p, rule.points[:, 0])
        grads = (ders / mesh.h[0])[None, :, :]
        cell_lo = mesh.lo[0] + mesh.h[0] * np.arange(mesh.cells[0])
        pts = (cell_lo[:, None] + mesh.h[0] * rule.points[:, 0][None, :])[:, :, None]
    else:
        vx, dx = lagrange_basis_1d(p, rule.points[:, 0])
        vy, dy = lagrange_basis_1d(p, rule.points[:, 1])
        nloc = (p + 1) ** 2
        vals = (vx[:, None, :] * vy[None, :, :]).reshape(nloc, -1)
        gx = (dx[:, None, :] * vy[None, :, :]).reshape(nloc, -1) / mesh.h[0]
        gy = (vx[:, None, :] * dy[None, :, :]).reshape(nloc, -1) / mesh.h[1]
        grads = np.stack([gx, gy])
        ex, ey = np.meshgrid(np.arange(mesh.cells[0]), np.arange(mesh.cells[1]), indexing="ij")
        lo = np.column_stack([mesh.lo[0] + mesh.h[0] * ex.ravel(), mesh.lo[1] + mesh.h[1] * ey.ravel()])
        pts = lo[:, None, :] + rule.points[None, :, :] * np.asarray(mesh.h)[None, None, :]
    out = {"vals": vals, "grads": grads, "qw": rule.weights, "detj": float(np.prod(mesh.h)), "pts": pts}
    space._cache[key] = out
    return out


def sample_coefficient(coeff, space, nq_axis):
    """Coefficient values at all quadrature points, shape (ncells, nq)
    (or (ncells, nq, 2, 2) for matrix coefficients)."""
    coeff = as_coefficient(coeff)
    tab = _tables(space, nq_axis)
    ncells, nq = tab["pts"].shape[0], tab["pts"].shape[1]
    if coeff.kind == "const":
        return np.full((ncells, nq), coeff.value)
    flat = tab["pts"].reshape(-1, space.dim)
    if coeff.kind == "func":
        return call_on_points(coeff.fn, flat).reshape(ncells, nq)
    if coeff.kind == "matrix":
        k = np.asarray(coeff.fn(*(flat[:, ax] for ax in range(space.dim))), dtype=float)
        if k.shape != (flat.shape[0], 2, 2):
            raise ValueError("matrix coefficient must return shape (n, 2, 2)")
        return k.reshape(ncells, nq, 2, 2)
    if coeff.kind == "nodal":
        if coeff.vec.space is not space:
            raise ValueError("nodal coefficient lives on a different space")
        local = coeff.vec.values[space.connectivity]  # (ncells, nloc)
        out = np.einsum("cj,jq->cq", local, tab["vals"])
        if coeff.transform is not None:
            out = np.asarray(coeff.transform(out), dtype=float)
        return out
    raise ValueError(f"unknown coefficient kind {coeff.kind!r}")


def _scatter(space, local_mats):
    conn = space.connectivity
    nloc = conn.shape[1]
    rows = np.repeat(conn, nloc, axis=1).ravel()
    cols = np.tile(conn, (1, nloc)).ravel()
    a = sp.coo_matrix((local_mats.ravel(), (rows, cols)), shape=(space.ndof, space.ndof))
    return a.tocsr()


def _nq(space, nq_axis):
    return space.order + 2 if nq_axis is None else nq_axis


def assemble_mass(space, weight=1.0, nq_axis=None):
    """Weighted mass matrix A_ij = int weight * phi_i phi_j.

    The weight must be strictly positive at every quadrature point.
    """
    nq_axis = _nq(space, nq_axis)
    w = sample_coefficient(weight, space, nq_axis)
    if w.ndim != 2:
        raise ValueError("mass weight must be scalar-valued")
    if np.any(w <= 0.0):
        raise ValueError("mass weight must be strictly positive at quadrature points")
    tab = _tables(space, nq_axis)
    local = tab["detj"] * np.einsum("q,cq,iq,jq->cij", tab["qw"], w, tab["vals"], tab["vals"])
    return _scatter(space, local)


def assemble_stiffness(space, coeff=1.0, nq_axis=None):
    """Stiffness matrix A_ij = int coeff * grad(phi_i) . grad(phi_j).

    Scalar coefficients may touch zero (degenerate mobilities do) but must not
    be negative; matrix coefficients must be symmetric at the sample points.
    """
    nq_axis = _nq(space, nq_axis)
    c = sample_coefficient(coeff, space, nq_axis)
    tab = _tables(space, nq_axis)
    if c.ndim == 2:
        if np.any(c < -1e-14 * max(1.0, np.abs(c).max())):
            raise ValueError("stiffness coefficient has negative samples")
        local = tab["detj"] * np.einsum("q,cq,diq,djq->cij", tab["qw"], c, tab["grads"], tab["grads"])
        return _scatter(space, local)
    if space.dim != 2:
        raise ValueError("matrix coefficients require a 2D space")
    asym = np.abs(c[..., 0, 1] - c[..., 1, 0]).max()
    if asym > 1e-12 * max(1.0, np.abs(c).max()):
        raise ValueError("matrix coefficient is not symmetric")
    local = tab["detj"] * np.einsum("q,cqab,aiq,bjq->cij", tab["qw"], c, tab["grads"], tab["grads"])
    local = 0.5 * (local + np.swapaxes(local, 1, 2))
    return _scatter(space, local)


def assemble_load(space, g, nq_axis=None):
    """Load vector b_i = int g * phi_i."""
    nq_axis = _nq(space, nq_axis)
    vals = sample_coefficient(g, space, nq_axis)
    if vals.ndim != 2:
        raise ValueError("load density must be scalar-valued")
    tab = _tables(space, nq_axis)
    local = tab["detj"] * np.einsum("q,cq,iq->ci", tab["qw"], vals, tab["vals"])
    b = np.zeros(space.ndof)
    np.add.at(b, space.connectivity.ravel(), local.ravel())
    return NodalVector(b, space)


def load_from_samples(space, samples, nq_axis=None):
    """Load vector from precomputed quadrature-point samples (ncells, nq)."""
    nq_axis = _nq(space, nq_axis)
    tab = _tables(space, nq_axis)
    local = tab["detj"] * np.einsum("q,cq,iq->ci", tab["qw"], samples, tab["vals"])
    b = np.zeros(space.ndof)
    np.add.at(b, space.connectivity.ravel(), local.ravel())
    return b


def integrate_samples(space, samples, nq_axis=None):
    """Integral over the domain of values sampled at quadrature points."""
    nq_axis = _nq(space, nq_axis)
    tab = _tables(space, nq_axis)
    return float(tab["detj"] * np.einsum("q,cq->", tab["qw"], samples))


def unit_system(space):
    """Cached (mass matrix, unit stiffness, dof integrals int phi_i)."""
    key = "unit_system"
    if key not in space._cache:
        b = assemble_mass(space)
        s1 = assemble_stiffness(space)
        q = assemble_load(space, 1.0).values
        space._cache[key] = (b, s1, q)
    return space._cache[key]
