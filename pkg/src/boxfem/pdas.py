"""Primal-dual active-set solver for the coupled fourth-order variational
inequality with nodal box constraints.

One problem descriptor (ViProblem) covers the stationary, BDF, SAV-augmented
and second-order-regularized variants.  Each iteration freezes an active set,
clamps those dofs to the violated bound, solves the remaining equality system
for (u, w) (plus the scalar auxiliary variable when present), recovers the
multiplier as the dofwise residual of the second equation, and updates the
sets from u + mu/c.  Convergence requires both a repeated active set and a
small KKT residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from . import assembly, linsolve
from .linsolve import BlockSystem, SingularSystemError, attach_mean_row
from .mesh import NodalVector

KKT_TOL = 1e-8


class Box(NamedTuple):
    """Resolved bounds: nominal interval [a, b] and enforced interval [lo, hi]."""

    a: float
    b: float
    lo: float
    hi: float


@dataclass
class BoxBounds:
    """Nodal box [a, b], optionally time-dependent, with a relaxation tolerance.

    The enforced (admissible) interval is [a + tol_relax, b - tol_relax]: the
    relaxation moves the bound into the domain by a tolerated amount so that
    degenerate coefficients (sqrt(u), log(1 -+ u)) are never sampled at a
    singular endpoint.  Values produced under the relaxed box trivially satisfy
    the nominal one.
    """

    a: float | Callable
    b: float | Callable
    tol_relax: float = 0.0

    def at(self, t=0.0):
        av = float(self.a(t)) if callable(self.a) else float(self.a)
        bv = float(self.b(t)) if callable(self.b) else float(self.b)
        if not av < bv:
            raise ValueError(f"bounds must satisfy a < b, got [{av}, {bv}]")
        if self.tol_relax < 0:
            raise ValueError("tol_relax must be >= 0")
        lo, hi = av + self.tol_relax, bv - self.tol_relax
        if not lo < hi:
            raise ValueError("tol_relax swallows the admissible interval")
        return Box(av, bv, lo, hi)


def clamp(values, box):
    """Nodewise projection onto the admissible interval."""
    return np.clip(values, box.lo, box.hi)


@dataclass
class SavCoupling:
    """Bordered scalar coupling of the auxiliary variable.

    d       : load vector of f(u_bar) / (2 sqrt(E1(u_bar)))
    alpha_k : leading BDF coefficient
    r_hist  : A_k applied to the r history
    u_hist  : A_k applied to the u history (dof values)
    """

    d: np.ndarray
    alpha_k: float
    r_hist: float
    u_hist: np.ndarray


@dataclass
class PdasConfig:
    c: float = 1e-2
    max_iter: int = 50
    fix_w_mean: bool = True

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("threshold c must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class PdasReport:
    iterations: int = 0
    active_lower: list = field(default_factory=list)
    active_upper: list = field(default_factory=list)
    kkt_residual: float = np.inf
    converged: bool = False
    w_mean_fixed: bool = False
    sav_residual: Optional[float] = None
    sav_r: Optional[float] = None
    mass_residual: Optional[float] = None
    message: str = ""

    @property
    def final_active_lower(self):
        return self.active_lower[-1] if self.active_lower else np.array([], dtype=int)

    @property
    def final_active_upper(self):
        return self.active_upper[-1] if self.active_upper else np.array([], dtype=int)


class PdasFailure(RuntimeError):
    """Raised by the schemes when a step's PDAS solve did not converge."""

    def __init__(self, report, context=""):
        self.report = report
        super().__init__(f"PDAS did not converge ({context}): {report.message}")


@dataclass(eq=False)
class ViProblem:
    """Descriptor of one box-constrained coupled solve.

    First equation:   theta*(u, v) + (M grad w, grad v) [+ (K grad u, grad v)] = rhs1
    Second equation:  (w, xi) <= (S grad u, grad xi) + rhs2 [+ SAV term]  on the box.
    """

    space: object
    theta: float
    a_m: sp.spmatrix
    s: sp.spmatrix
    rhs1: np.ndarray
    rhs2: np.ndarray
    bounds: Box
    s_k: Optional[sp.spmatrix] = None
    sav: Optional[SavCoupling] = None
    tau: float = 1.0
    dirichlet: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.space.ndof
        for name in ("a_m", "s", "s_k"):
            mat = getattr(self, name)
            if mat is not None and mat.shape != (n, n):
                raise ValueError(f"{name} has shape {mat.shape}, expected {(n, n)}")
        self.rhs1 = np.asarray(self.rhs1, dtype=float)
        self.rhs2 = np.asarray(self.rhs2, dtype=float)
        if self.theta < 0 or (self.theta == 0 and self.dirichlet is None):
            raise ValueError("theta must be positive (or zero with Dirichlet constraints)")
        if self.dirichlet is not None:
            self.dirichlet = np.asarray(self.dirichlet, dtype=int)


class _Reduced(NamedTuple):
    free: np.ndarray
    b: sp.spmatrix
    a_m: sp.spmatrix
    s: sp.spmatrix
    s_k: Optional[sp.spmatrix]
    rhs1: np.ndarray
    rhs2: np.ndarray
    d: Optional[np.ndarray]
    q: np.ndarray


def _reduce(prob):
    """Operators restricted to the free (non-Dirichlet) dofs."""
    key = "reduced"
    if key in prob._cache:
        return prob._cache[key]
    b_full, _, q_full = assembly.unit_system(prob.space)
    n = prob.space.ndof
    if prob.dirichlet is None:
        free = np.arange(n)
        red = _Reduced(free, sp.csr_matrix(b_full), sp.csr_matrix(prob.a_m), sp.csr_matrix(prob.s),
                       None if prob.s_k is None else sp.csr_matrix(prob.s_k),
                       prob.rhs1, prob.rhs2,
                       None if prob.sav is None else prob.sav.d, q_full)
    else:
        free = np.setdiff1d(np.arange(n), prob.dirichlet)
        pick = lambda m: None if m is None else sp.csr_matrix(m)[free][:, free]
        red = _Reduced(free, pick(b_full), pick(prob.a_m), pick(prob.s), pick(prob.s_k),
                       prob.rhs1[free], prob.rhs2[free],
                       None if prob.sav is None else prob.sav.d[free], q_full[free])
    prob._cache[key] = red
    return red


def _expand(prob, red, vec):
    full = np.zeros(prob.space.ndof)
    full[red.free] = vec
    return full


def _sav_rhs(prob, red, act_idx, u_act):
    sav = prob.sav
    r3 = sav.r_hist - float(sav.d @ sav.u_hist)
    if act_idx.size:
        r3 += sav.alpha_k * float(red.d[act_idx] @ u_act)
    return r3


def unconstrained_solve(prob):
    """Direct solve of the equality system with the box ignored.

    Used as the PDAS initial guess for stationary problems and as the
    comparison solution in the Dirichlet positivity experiment.
    """
    red = _reduce(prob)
    nf = red.free.size
    e11 = prob.theta * red.b
    if red.s_k is not None:
        e11 = e11 + red.s_k
    blocks = [[e11, red.a_m], [-red.s, red.b]]
    rhs = [red.rhs1, red.rhs2]
    if prob.sav is not None:
        a = prob.sav.alpha_k
        blocks[0].append(None)
        blocks[1].append(sp.csc_matrix(-2.0 * red.d[:, None]))
        blocks.append([sp.csc_matrix(-a * red.d[None, :]), None, sp.csc_matrix([[a]])])
        rhs.append([_sav_rhs(prob, red, np.array([], dtype=int), np.array([]))])
    sol = BlockSystem.from_blocks(blocks, label="unconstrained solve").solve(np.concatenate([np.atleast_1d(r) for r in rhs]))
    u = _expand(prob, red, sol[:nf])
    w = _expand(prob, red, sol[nf:2 * nf])
    r = float(sol[2 * nf]) if prob.sav is not None else None
    return NodalVector(u, prob.space), NodalVector(w, prob.space), r


def _solve_active(prob, red, lower, upper):
    """One PDAS step: clamp the active dofs, solve for the rest."""
    nf = red.free.size
    box = prob.bounds
    act = lower | upper
    act_idx = np.flatnonzero(act)
    i_idx = np.flatnonzero(~act)
    n_i = i_idx.size
    u_act = np.where(lower[act_idx], box.lo, box.hi)

    e11_cols = prob.theta * red.b + (red.s_k if red.s_k is not None else 0.0)
    r1 = red.rhs1.copy()
    if act_idx.size:
        r1 -= sp.csr_matrix(e11_cols)[:, act_idx] @ u_act

    fix_mean = n_i == 0 and prob.dirichlet is None
    if n_i == 0:
        # every dof clamped: w (and r) solve alone, with the mean row pinning
        # the constant that the mobility stiffness cannot see
        blocks = [[red.a_m]]
        rhs = [r1]
        if fix_mean:
            blocks[0].append(sp.csc_matrix(red.q[:, None]))
            blocks.append([sp.csc_matrix(red.q[None, :]), None])
            rhs.append([0.0])
        sol = BlockSystem.from_blocks(blocks, label="pdas all-active step").solve(
            np.concatenate([np.atleast_1d(r) for r in rhs]))
        w = sol[:nf]
        u = np.empty(nf)
        u[act_idx] = u_act
        if prob.sav is not None:
            r = _sav_rhs(prob, red, act_idx, u_act) / prob.sav.alpha_k
        else:
            r = None
        return u, w, r, fix_mean

    e11 = sp.csr_matrix(e11_cols)[:, i_idx]
    e21 = -sp.csr_matrix(red.s)[i_idx][:, i_idx]
    b_rows = sp.csr_matrix(red.b)[i_idx]
    blocks = [[e11, red.a_m], [e21, b_rows]]
    r2 = red.rhs2[i_idx].copy()
    if act_idx.size:
        r2 += sp.csr_matrix(red.s)[i_idx][:, act_idx] @ u_act
    rhs = [r1, r2]
    if prob.sav is not None:
        a = prob.sav.alpha_k
        blocks[0].append(None)
        blocks[1].append(sp.csc_matrix(-2.0 * red.d[i_idx, None]))
        blocks.append([sp.csc_matrix(-a * red.d[None, i_idx]), None, sp.csc_matrix([[a]])])
        rhs.append([_sav_rhs(prob, red, act_idx, u_act)])
    sol = BlockSystem.from_blocks(blocks, label=f"pdas step, {act_idx.size} active").solve(
        np.concatenate([np.atleast_1d(r) for r in rhs]))
    u = np.empty(nf)
    u[i_idx] = sol[:n_i]
    u[act_idx] = u_act
    w = sol[n_i:n_i + nf]
    r = float(sol[n_i + nf]) if prob.sav is not None else None
    return u, w, r, False


def pdas_solve(prob, cfg, u_init, mu_init=None):
    """Run the primal-dual active-set iteration.

    The initial sets come from the indicator u_init + mu_init/c (mu_init
    defaults to zero, reducing to the plain primal-violation start); passing
    the previous time step's multiplier warm-starts the vacuum/contact
    regions of parabolic runs.

    Returns (u, w, mu, report).  A report with converged=False is returned on
    stagnation or when max_iter is hit; singular linear systems raise
    SingularSystemError naming the iteration and active set.
    """
    red = _reduce(prob)
    box = prob.bounds
    u0 = np.asarray(u_init.values if isinstance(u_init, NodalVector) else u_init, dtype=float)
    if not np.all(np.isfinite(u0)):
        raise ValueError("initial guess contains non-finite values")
    uf = u0[red.free]
    if mu_init is not None:
        uf = uf + np.asarray(mu_init)[red.free] / cfg.c
    # deadband at machine-noise scale: exact-contact dofs otherwise cycle
    # between equally valid roundoff-level classifications
    tie = 1e-13 * (1.0 + max(abs(box.lo), abs(box.hi)))
    lower = uf < box.lo - tie
    upper = uf > box.hi + tie
    report = PdasReport()
    u = w = mu_f = None
    r = None

    for it in range(cfg.max_iter):
        try:
            u, w, r, fixed = _solve_active(prob, red, lower, upper)
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"{exc} [pdas iteration {it}, {int(lower.sum())} lower / {int(upper.sum())} upper active]"
            ) from exc
        report.w_mean_fixed = report.w_mean_fixed or fixed
        report.iterations = it + 1
        report.active_lower.append(red.free[np.flatnonzero(lower)])
        report.active_upper.append(red.free[np.flatnonzero(upper)])

        rho = red.b @ w - red.s @ u - red.rhs2
        if prob.sav is not None:
            rho = rho - 2.0 * r * red.d
        mu_f = np.zeros_like(u)
        act = lower | upper
        mu_f[act] = rho[act]

        indicator = u + mu_f / cfg.c
        new_lower = indicator < box.lo - tie
        new_upper = indicator > box.hi + tie
        if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
            break
        lower, upper = new_lower, new_upper
    else:
        report.message = f"max_iter = {cfg.max_iter} exceeded; last active set retained"
        report.converged = False

    # snap roundoff-scale stragglers onto the bound they graze
    np.copyto(u, box.lo, where=(u < box.lo) & (u > box.lo - 2 * tie))
    np.copyto(u, box.hi, where=(u > box.hi) & (u < box.hi + 2 * tie))

    u_full = _expand(prob, red, u)
    w_full = _expand(prob, red, w)
    mu_full = _expand(prob, red, mu_f)
    uvec = NodalVector(u_full, prob.space)
    wvec = NodalVector(w_full, prob.space)
    muvec = NodalVector(mu_full, prob.space)

    report.kkt_residual = kkt_residual(prob, uvec, wvec, muvec)
    if not report.message:
        if report.kkt_residual <= KKT_TOL:
            report.converged = True
            report.message = "active set repeated, KKT residual below tolerance"
        else:
            report.converged = False
            report.message = (
                f"active set repeated but KKT residual {report.kkt_residual:.3e} > {KKT_TOL:.0e}"
            )
    if prob.dirichlet is None:
        total = red.rhs1.sum()
        report.mass_residual = abs(prob.theta * float(red.q @ u) - total) / (1.0 + abs(total))
    if prob.sav is not None:
        sav = prob.sav
        lhs = sav.alpha_k * r - sav.r_hist
        rhs = float(sav.d @ (sav.alpha_k * u_full - sav.u_hist))
        report.sav_residual = abs(lhs - rhs) / (1.0 + abs(lhs))
        report.sav_r = r
    return uvec, wvec, muvec, report


def kkt_residual(prob, u, w, mu):
    """Scaled max over equality residual, complementarity, multiplier sign and
    bound violation for a candidate KKT triple."""
    red = _reduce(prob)
    box = prob.bounds
    uf = np.asarray(u)[red.free]
    wf = np.asarray(w)[red.free]
    muf = np.asarray(mu)[red.free]

    e11 = prob.theta * (red.b @ uf) + red.a_m @ wf
    if red.s_k is not None:
        e11 += red.s_k @ uf
    eq1 = np.abs(e11 - red.rhs1).max() / (1.0 + np.abs(red.rhs1).max())

    rho = red.b @ wf - red.s @ uf - red.rhs2
    if prob.sav is not None:
        sav = prob.sav
        r = (sav.r_hist + float(sav.d @ (sav.alpha_k * np.asarray(u) - sav.u_hist))) / sav.alpha_k
        rho = rho - 2.0 * r * red.d
    s2 = 1.0 + max(np.abs(red.b @ wf).max(), np.abs(red.s @ uf).max(), np.abs(red.rhs2).max())
    eq2 = np.abs(rho - muf).max() / s2

    atol = 1e-12 * (box.hi - box.lo)
    at_lo = uf <= box.lo + atol
    at_hi = uf >= box.hi - atol
    interior = ~(at_lo | at_hi)
    comp = np.abs(muf[interior]).max() / s2 if interior.any() else 0.0
    sign = 0.0
    if at_lo.any():
        sign = max(sign, max(0.0, muf[at_lo].max()) / s2)
    if at_hi.any():
        sign = max(sign, max(0.0, -muf[at_hi].min()) / s2)
    bound = max(0.0, (box.lo - uf).max(), (uf - box.hi).max()) / (box.b - box.a)
    return float(max(eq1, eq2, comp, sign, bound))


def _h1m_system(prob):
    if "h1m" not in prob._cache:
        red = _reduce(prob)
        prob._cache["h1m"] = BlockSystem(attach_mean_row(red.a_m, red.q), label="energy H^-1 solve")
    return prob._cache["h1m"]


def energy_value(prob, v):
    """Value of the convex objective whose minimizer the PDAS solution is.

    Stationary form: 1/2 |sqrt(kappa) grad v|^2 + (f2, v) + 1/2 |v - f1|^2 in
    the weighted discrete H^-1 seminorm.  For BDF problems the same code
    evaluates the per-step objective (Dirichlet part scaled by alpha_k, the
    history misfit by 1/(2 tau), plus alpha_k s^2 under SAV coupling).
    """
    if prob.dirichlet is not None:
        raise ValueError("energy_value is defined for the Neumann (mass-conserving) problems")
    red = _reduce(prob)
    vol = prob.space.mesh.volume
    vv = np.asarray(v, dtype=float)
    target = red.rhs1.sum() / prob.theta
    if abs(float(red.q @ vv) - target) > 1e-9 * (vol + abs(target)):
        raise ValueError("candidate violates the mass constraint of the admissible set")
    g = prob.theta * (red.b @ vv) - red.rhs1
    z = _h1m_system(prob).solve(np.concatenate([g, [0.0]]))[:-1]
    val = prob.tau * (0.5 * prob.theta * float(vv @ (red.s @ vv)) + float(red.rhs2 @ vv) + 0.5 * float(g @ z))
    if prob.sav is not None:
        sav = prob.sav
        s = (sav.r_hist + float(sav.d @ (sav.alpha_k * vv - sav.u_hist))) / sav.alpha_k
        val += sav.alpha_k * s * s
    return val
