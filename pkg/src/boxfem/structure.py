"""Structure diagnostics (mass, bounds, energies, error norms, EOC) and the
bound-preserving mass-conservative projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import assembly
from .assembly import Coefficient, unit_system
from .mesh import NodalVector, call_on_points, evaluate_many, interpolate, lagrange_basis_1d


@dataclass
class Diagnostics:
    mass: float
    min_value: float
    max_value: float
    dirichlet_energy: float
    t: float = 0.0
    e1: Optional[float] = None
    modified_energy: Optional[float] = None


def diagnostics(u, sav=None, r=None, t=0.0, kappa=1.0):
    """Mass, nodal range and energies of a state.

    With a SAV configuration the potential energy E1 is reported, and with the
    auxiliary scalar r also the modified energy kappa/2 |grad u|^2 + r^2.
    """
    space = u.space
    b, s1, q = unit_system(space)
    vals = np.asarray(u)
    dirichlet = 0.5 * float(vals @ (s1 @ vals))
    out = Diagnostics(
        mass=float(q @ vals),
        min_value=float(vals.min()),
        max_value=float(vals.max()),
        dirichlet_energy=dirichlet,
        t=t,
    )
    if sav is not None:
        from .schemes import potential_energy

        out.e1 = potential_energy(u, sav)
        if r is not None:
            out.modified_energy = kappa * dirichlet + float(r) ** 2
    return out


def eoc(pairs):
    """Experimental orders of convergence from [(h, error), ...] rows."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two (h, error) pairs")
    hs = np.array([p[0] for p in pairs], dtype=float)
    es = np.array([p[1] for p in pairs], dtype=float)
    if np.any(np.diff(hs) >= 0):
        raise ValueError("mesh sizes must be strictly decreasing")
    if np.any(es <= 0):
        raise ValueError("errors must be positive")
    return list(np.log(es[:-1] / es[1:]) / np.log(hs[:-1] / hs[1:]))


class ErrorNorms(NamedTuple):
    l2: float
    h1: float
    absolute: bool = False


def _exact_samples(space, u_exact, grad_exact, t, nq_axis):
    """Exact values and gradients at quadrature points.  grad_exact returns a
    tuple of per-axis components (a bare array is accepted in 1D)."""
    tab = assembly._tables(space, nq_axis)
    flat = tab["pts"].reshape(-1, space.dim)
    if isinstance(u_exact, NodalVector):
        vals, grads = evaluate_many(u_exact, flat, grad=True)
    else:
        fn = u_exact if t is None else (lambda *xs: u_exact(*xs, t))
        vals = call_on_points(fn, flat)
        grads = None
        if grad_exact is not None:
            gfn = grad_exact if t is None else (lambda *xs: grad_exact(*xs, t))
            comps = gfn(*(flat[:, ax] for ax in range(space.dim)))
            if not isinstance(comps, (tuple, list)):
                comps = (comps,)
            grads = np.stack(
                [np.broadcast_to(np.asarray(c, dtype=float), (flat.shape[0],)) for c in comps],
                axis=1)
    shape = tab["pts"].shape[:2]
    vals = vals.reshape(shape)
    if grads is not None:
        grads = grads.reshape(shape + (space.dim,))
    return tab, vals, grads


def error_norms(u_h, u_exact, t=None, grad_exact=None, extra_points=2):
    """Relative L2 and H1-seminorm errors against an exact solution or a
    reference NodalVector (sampled pointwise, +2 quadrature points per axis).

    A zero-norm exact solution flips the result to absolute norms.
    """
    space = u_h.space
    nq_axis = space.order + 2 + extra_points
    tab, ex_vals, ex_grads = _exact_samples(space, u_exact, grad_exact, t, nq_axis)

    local = np.asarray(u_h)[space.connectivity]
    uh_vals = np.einsum("cj,jq->cq", local, tab["vals"])
    uh_grads = np.einsum("cj,djq->cqd", local, tab["grads"])

    w = tab["detj"] * tab["qw"]
    l2_err = np.sqrt(np.einsum("q,cq->", w, (uh_vals - ex_vals) ** 2))
    l2_ref = np.sqrt(np.einsum("q,cq->", w, ex_vals**2))
    if ex_grads is None:
        h1_err = h1_ref = np.nan
    else:
        h1_err = np.sqrt(np.einsum("q,cqd->", w, (uh_grads - ex_grads) ** 2))
        h1_ref = np.sqrt(np.einsum("q,cqd->", w, ex_grads**2))
    if l2_ref < 1e-14:
        return ErrorNorms(float(l2_err), float(h1_err), absolute=True)
    h1 = float(h1_err / h1_ref) if ex_grads is not None and h1_ref > 1e-14 else float(h1_err)
    return ErrorNorms(float(l2_err / l2_ref), h1, absolute=False)


def _sup_norm_fe(v, samples_per_axis=None):
    """Sup of |v_h| over the domain, on a per-cell sample grid."""
    space = v.space
    n = samples_per_axis or (space.order + 3)
    xi = np.linspace(0.0, 1.0, n)
    if space.dim == 1:
        vals, _ = lagrange_basis_1d(space.order, xi)
        local = np.asarray(v)[space.connectivity]
        return float(np.abs(np.einsum("cj,jq->cq", local, vals)).max())
    vx, _ = lagrange_basis_1d(space.order, xi)
    p = space.order
    vals = (vx[:, None, :, None] * vx[None, :, None, :]).reshape((p + 1) ** 2, n * n)
    local = np.asarray(v)[space.connectivity]
    return float(np.abs(np.einsum("cj,jq->cq", local, vals)).max())


def _fine_mean(space, fn, extra=6):
    tab = assembly._tables(space, space.order + 2 + extra)
    flat = tab["pts"].reshape(-1, space.dim)
    vals = call_on_points(fn, flat).reshape(tab["pts"].shape[:2])
    return tab["detj"] * float(np.einsum("q,cq->", tab["qw"], vals)) / space.mesh.volume


def bp_mc_project(v, space, bounds):
    """Bound-preserving, mass-conservative projection into the nodal box.

    Centers the box, interpolates, restores the mass with a constant shift
    c1, and if the shift pushed nodal values out of the box blends toward the
    mean with the smallest admissible factor c2.  Fails explicitly when no
    c2 in (0, 1) exists (mesh too coarse for this v).
    """
    box = bounds.at(0.0) if hasattr(bounds, "at") else bounds
    shift = 0.5 * (box.a + box.b)
    beta = 0.5 * (box.b - box.a)
    _, _, q = unit_system(space)
    vol = space.mesh.volume

    if isinstance(v, NodalVector):
        centered = NodalVector(np.asarray(v) - shift, space)
        m = float(q @ np.asarray(centered)) / vol
    else:
        centered = interpolate(space, lambda *xs: np.asarray(v(*xs), dtype=float) - shift)
        m = _fine_mean(space, v) - shift

    c1 = m - float(q @ np.asarray(centered)) / vol
    tilde = np.asarray(centered) + c1

    if tilde.min() >= -beta and tilde.max() <= beta:
        out = tilde
    else:
        sup = _sup_norm_fe(NodalVector(tilde, space))
        if sup - abs(m) <= 0:
            raise ValueError("projection degenerate: |v| at the bound everywhere (constant-like input)")
        c2 = (sup - beta) / (sup - abs(m))
        if not 0.0 < c2 < 1.0:
            raise ValueError(
                f"blend factor c2 = {c2:.3e} outside (0, 1): mesh too coarse for this input"
            )
        out = (1.0 - c2) * tilde + c2 * m
    return NodalVector(out + shift, space)
