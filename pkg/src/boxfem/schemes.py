"""Time integrators and initialization built on the PDAS solver.

BDF-k stepping with clamped extrapolation of the nonlinear coefficients,
optional SAV augmentation for potential terms, and the fourth-order
regularization of second-order problems.  Nonlinear coefficients are always
evaluated at the clamped extrapolant, so degenerate mobilities are never
sampled outside their admissible interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction as Fr
from typing import Callable, Optional

import numpy as np

from . import assembly
from .assembly import Coefficient, assemble_load, assemble_stiffness, unit_system
from .linsolve import BlockSystem, attach_mean_row
from .mesh import NodalVector
from .pdas import (BoxBounds, PdasConfig, PdasFailure, SavCoupling, ViProblem,
                   pdas_solve, unconstrained_solve)

_ALPHA = {1: Fr(1), 2: Fr(3, 2), 3: Fr(11, 6), 4: Fr(25, 12), 5: Fr(137, 60)}
_A_COEFFS = {
    1: (Fr(1),),
    2: (Fr(2), Fr(-1, 2)),
    3: (Fr(3), Fr(-3, 2), Fr(1, 3)),
    4: (Fr(4), Fr(-3), Fr(4, 3), Fr(-1, 4)),
    5: (Fr(5), Fr(-5), Fr(10, 3), Fr(-5, 4), Fr(1, 5)),
}
_B_COEFFS = {
    1: (Fr(1),),
    2: (Fr(2), Fr(-1)),
    3: (Fr(3), Fr(-3), Fr(1)),
    4: (Fr(4), Fr(-6), Fr(4), Fr(-1)),
    5: (Fr(5), Fr(-10), Fr(10), Fr(-5), Fr(1)),
}


@dataclass(frozen=True)
class BdfTable:
    """Exact BDF-k coefficients: alpha_k u^{n+1} - A_k(u^n) over tau, with
    B_k the matching explicit extrapolation (sums to one)."""

    k: int
    alpha: Fr
    a_coeffs: tuple
    b_coeffs: tuple

    @property
    def alpha_f(self):
        return float(self.alpha)

    @property
    def a_floats(self):
        return np.array([float(c) for c in self.a_coeffs])

    @property
    def b_floats(self):
        return np.array([float(c) for c in self.b_coeffs])


def bdf_table(k):
    if k not in _ALPHA:
        raise ValueError(f"BDF order must be in 1..5, got {k}")
    return BdfTable(k, _ALPHA[k], _A_COEFFS[k], _B_COEFFS[k])


@dataclass
class SavConfig:
    """Potential data for the auxiliary-variable scheme: F on [a, b], its
    derivative f, and the constant C0 keeping E1 = int F + C0 positive."""

    F: Callable
    f: Callable
    C0: float = 1.0


@dataclass
class TimeState:
    """Ring buffer of recent solution vectors (newest first) plus the scalar
    auxiliary history and the last multiplier (used to warm-start PDAS)."""

    space: object
    history: list
    r_history: list
    t: float
    tau: float
    mu: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, u0, tau, r0=None, t=0.0):
        rh = [] if r0 is None else [float(r0)]
        return cls(u0.space, [np.asarray(u0, dtype=float).copy()], rh, float(t), float(tau))

    @property
    def latest(self):
        return NodalVector(self.history[0], self.space)

    def advanced(self, values, t_new, r_new=None, mu_new=None):
        hist = [np.asarray(values, dtype=float)] + self.history[:4]
        rh = self.r_history
        if r_new is not None:
            rh = [float(r_new)] + rh[:4]
        return TimeState(self.space, hist, rh, float(t_new), self.tau, mu=mu_new)


def _combo(vectors, coeffs):
    out = coeffs[0] * vectors[0]
    for c, v in zip(coeffs[1:], vectors[1:]):
        out = out + c * v
    return out


def extrapolate_clamped(state, tbl, bounds):
    """B_k extrapolation of the history, clamped nodewise to the admissible box."""
    if len(state.history) < tbl.k:
        raise ValueError(f"history of length {len(state.history)} is too short for BDF{tbl.k}")
    box = bounds.at(state.t + state.tau)
    vals = _combo(state.history, tbl.b_floats[: tbl.k])
    return NodalVector(np.clip(vals, box.lo, box.hi), state.space)


def _clamped_transform(fn, box):
    # p >= 2 interpolants can dip outside the nodal range inside a cell;
    # re-clamp the samples so degenerate coefficients stay in-domain
    return lambda vals: fn(np.clip(vals, box.lo, box.hi))


def _step_common(state, tbl, bounds, forcing):
    k = tbl.k
    if len(state.history) < k:
        raise ValueError(f"history of length {len(state.history)} is too short for BDF{k}")
    tau, t_new = state.tau, state.t + state.tau
    box = bounds.at(t_new)
    ubar = extrapolate_clamped(state, tbl, bounds)
    b_mat, s1, _ = unit_system(state.space)
    hist = _combo(state.history, tbl.a_floats[:k])
    rhs1 = b_mat @ hist / tau
    if forcing is not None:
        rhs1 = rhs1 + assemble_load(state.space, lambda *xs: forcing(*xs, t_new)).values
    return t_new, box, ubar, b_mat, s1, hist, rhs1


def _mobility_matrix(space, ubar, mobility, box):
    coeff = Coefficient.nodal(ubar, transform=_clamped_transform(mobility, box))
    samples = assembly.sample_coefficient(coeff, space, space.order + 2)
    if samples.min() <= 0.0:
        raise ValueError("mobility is not strictly positive on the clamped box")
    return assemble_stiffness(space, coeff)


def step_fourth_order(state, tbl, mobility, bounds, cfg, forcing=None):
    """One BDF-k step of u_t = div(M(u) grad w), w = -lap u (+ forcing)."""
    t_new, box, ubar, b_mat, s1, hist, rhs1 = _step_common(state, tbl, bounds, forcing)
    a_m = _mobility_matrix(state.space, ubar, mobility, box)
    prob = ViProblem(state.space, tbl.alpha_f / state.tau, a_m, s1, rhs1,
                     np.zeros(state.space.ndof), box, tau=state.tau)
    u, w, mu, report = pdas_solve(prob, cfg, ubar, mu_init=state.mu)
    if not report.converged:
        raise PdasFailure(report, context=f"fourth-order step to t = {t_new:.6g}")
    return state.advanced(u.values, t_new, mu_new=mu.values), report


def potential_energy(u, sav):
    """E1(u) = int F(u) + C0, by assembly-grade quadrature of the interpolant."""
    space = u.space
    samples = assembly.sample_coefficient(Coefficient.nodal(u, transform=sav.F), space, space.order + 2)
    return assembly.integrate_samples(space, samples) + sav.C0


def sav_init(u_h, sav):
    """Initial auxiliary variable r = sqrt(E1(u_h))."""
    e1 = potential_energy(u_h, sav)
    if e1 <= 0.0:
        raise ValueError(f"E1 = {e1:.3e} <= 0: increase C0 in the SAV configuration")
    return float(np.sqrt(e1))


def step_sav(state, tbl, mobility, sav, bounds, cfg, forcing=None, kappa=1.0):
    """One BDF-k step of the SAV-augmented scheme for u_t = div(M(u) grad w),
    w = -kappa lap u + f(u)."""
    t_new, box, ubar, b_mat, s1, hist, rhs1 = _step_common(state, tbl, bounds, forcing)
    if len(state.r_history) < tbl.k:
        raise ValueError("auxiliary-variable history is too short; initialize r with sav_init")
    space = state.space
    a_m = _mobility_matrix(space, ubar, mobility, box)

    usamp = assembly.sample_coefficient(Coefficient.nodal(ubar), space, space.order + 2)
    usamp = np.clip(usamp, box.lo, box.hi)
    e1 = assembly.integrate_samples(space, sav.F(usamp)) + sav.C0
    if e1 <= 0.0:
        raise ValueError(f"E1(u_bar) = {e1:.3e} <= 0 at t = {t_new:.6g}: C0 too small")
    d = assembly.load_from_samples(space, sav.f(usamp)) / (2.0 * np.sqrt(e1))
    r_hist = float(_combo(np.array(state.r_history), tbl.a_floats[: tbl.k]))

    s_mat = s1 if kappa == 1.0 else kappa * s1
    coupling = SavCoupling(d, tbl.alpha_f, r_hist, hist)
    prob = ViProblem(space, tbl.alpha_f / state.tau, a_m, s_mat, rhs1,
                     np.zeros(space.ndof), box, sav=coupling, tau=state.tau)
    u, w, mu, report = pdas_solve(prob, cfg, ubar, mu_init=state.mu)
    if not report.converged:
        raise PdasFailure(report, context=f"SAV step to t = {t_new:.6g}")
    return state.advanced(u.values, t_new, r_new=report.sav_r, mu_new=mu.values), report


def step_second_order(state, tbl, conductivity, bounds, cfg, forcing=None):
    """One BDF-k step of u_t = div(K(u) grad u) via the consistent fourth-order
    regularization with eps = h^(p+1), h the cell diameter."""
    t_new, box, ubar, b_mat, s1, hist, rhs1 = _step_common(state, tbl, bounds, forcing)
    space = state.space
    sqrt_eps = space.mesh.cell_diameter ** ((space.order + 1) / 2.0)
    s_k = assemble_stiffness(space, Coefficient.nodal(ubar, transform=_clamped_transform(conductivity, box)))
    prob = ViProblem(space, tbl.alpha_f / state.tau, sqrt_eps * s1, sqrt_eps * s1, rhs1,
                     np.zeros(space.ndof), box, s_k=s_k, tau=state.tau)
    u, w, mu, report = pdas_solve(prob, cfg, ubar, mu_init=state.mu)
    if not report.converged:
        raise PdasFailure(report, context=f"second-order step to t = {t_new:.6g}")
    return state.advanced(u.values, t_new, mu_new=mu.values), report


def solve_stationary(f1, f2, mobility, kappa, space, bounds, cfg=None, t=0.0):
    """Stationary coupled solve: (u, v) + (M grad w, grad v) = (f1, v) with the
    box-constrained second equation w = -div(kappa grad u) + f2."""
    cfg = cfg or PdasConfig()
    box = bounds.at(t)
    rhs1 = assemble_load(space, f1).values
    mean = rhs1.sum() / space.mesh.volume
    slack = 1e-12 * (box.b - box.a)
    if not (box.lo - slack <= mean <= box.hi + slack):
        raise ValueError(
            f"mean of f1 = {mean:.6g} lies outside the admissible interval "
            f"[{box.lo:.6g}, {box.hi:.6g}]: the constrained problem is infeasible"
        )
    _, s1, _ = unit_system(space)
    a_m = assemble_stiffness(space, mobility)
    s_mat = assemble_stiffness(space, kappa)
    rhs2 = assemble_load(space, f2).values
    prob = ViProblem(space, 1.0, a_m, s_mat, rhs1, rhs2, box)
    u0, _, _ = unconstrained_solve(prob)
    u, w, mu, report = pdas_solve(prob, cfg, u0)
    if not report.converged:
        raise PdasFailure(report, context="stationary solve")
    return u, w, report


def solve_second_order_stationary(f1, conductivity, space, bounds, cfg=None):
    """Regularized stationary second-order solve with strongly imposed
    homogeneous Dirichlet conditions on u and w.

    Returns (u, w, report, u_unconstrained); the unconstrained mixed solution
    doubles as the PDAS initial guess.
    """
    cfg = cfg or PdasConfig()
    box = bounds.at(0.0)
    sqrt_eps = space.mesh.cell_diameter ** ((space.order + 1) / 2.0)
    _, s1, _ = unit_system(space)
    s_k = assemble_stiffness(space, conductivity)
    rhs1 = assemble_load(space, f1).values
    prob = ViProblem(space, 0.0, sqrt_eps * s1, sqrt_eps * s1, rhs1,
                     np.zeros(space.ndof), box, s_k=s_k,
                     dirichlet=space.boundary_dofs())
    u0, _, _ = unconstrained_solve(prob)
    u, w, mu, report = pdas_solve(prob, cfg, u0)
    if not report.converged:
        raise PdasFailure(report, context="stationary second-order solve")
    return u, w, report, u0


def init_vi(u0, bilap_u0, space, bounds, cfg=None, t=0.0):
    """Bound-preserving, mass-conservative initialization: the stationary solve
    with data u0 + lap^2 u0 reproduces u0 to order p+1 while projecting it into
    the box."""
    f1 = lambda *xs: np.asarray(u0(*xs), dtype=float) + np.asarray(bilap_u0(*xs), dtype=float)
    u, _, report = solve_stationary(f1, 0.0, 1.0, 1.0, space, bounds, cfg, t=t)
    return u


def init_postprocess(u_tilde, bounds, cfg=None, t=0.0):
    """L2-closest nodally-boxed vector with the same mass as u_tilde.

    Primal-dual active-set iteration on the mass-matrix-weighted projection
    QP; feasible inputs are returned unchanged.
    """
    cfg = cfg or PdasConfig()
    space = u_tilde.space
    box = bounds.at(t)
    b_mat, _, q = unit_system(space)
    ut = np.asarray(u_tilde, dtype=float)
    mass = float(q @ ut)
    mean = mass / space.mesh.volume
    if not (box.lo <= mean <= box.hi):
        raise ValueError(f"mass mean {mean:.6g} outside [{box.lo:.6g}, {box.hi:.6g}]: projection infeasible")
    tie = 1e-13 * (1.0 + max(abs(box.lo), abs(box.hi)))
    if ut.min() >= box.lo - tie and ut.max() <= box.hi + tie:
        return NodalVector(np.clip(ut, box.lo, box.hi), space)

    n = space.ndof
    b_ut = b_mat @ ut
    lower = ut < box.lo - tie
    upper = ut > box.hi + tie
    import scipy.sparse as sp

    for _ in range(cfg.max_iter):
        act = lower | upper
        a_idx = np.flatnonzero(act)
        i_idx = np.flatnonzero(~act)
        v_act = np.where(lower[a_idx], box.lo, box.hi)
        bii = sp.csr_matrix(b_mat)[i_idx][:, i_idx]
        sysm = attach_mean_row(bii, q[i_idx])
        rhs_top = b_ut[i_idx] - sp.csr_matrix(b_mat)[i_idx][:, a_idx] @ v_act
        rhs = np.concatenate([rhs_top, [mass - float(q[a_idx] @ v_act)]])
        sol = BlockSystem(sysm, label="mass projection").solve(rhs)
        v = np.empty(n)
        v[i_idx] = sol[:-1]
        v[a_idx] = v_act
        lam = sol[-1]
        grad = b_mat @ (v - ut) - lam * q
        mu = np.zeros(n)
        mu[a_idx] = -grad[a_idx]
        indicator = v + mu / cfg.c
        new_lower = indicator < box.lo - tie
        new_upper = indicator > box.hi + tie
        if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
            np.copyto(v, box.lo, where=(v < box.lo) & (v > box.lo - 2 * tie))
            np.copyto(v, box.hi, where=(v > box.hi) & (v < box.hi + 2 * tie))
            scale = 1.0 + np.abs(b_mat @ v).max() + np.abs(b_ut).max()
            stat = np.abs(grad[i_idx]).max() if i_idx.size else 0.0
            sign = 0.0
            if lower.any():
                sign = max(sign, max(0.0, mu[lower].max()))
            if upper.any():
                sign = max(sign, max(0.0, -mu[upper].min()))
            feas = max(0.0, (box.lo - v).max(), (v - box.hi).max())
            if max(stat, sign) > 1e-9 * scale or feas > 0.0:
                raise RuntimeError(f"projection KKT residual too large: {max(stat, sign, feas):.3e}")
            return NodalVector(v, space)
        lower, upper = new_lower, new_upper
    raise RuntimeError("mass projection active-set iteration did not converge")
