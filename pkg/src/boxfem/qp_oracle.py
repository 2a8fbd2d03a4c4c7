"""Dense projected-gradient oracle for the box-and-mass-constrained quadratic
programs that the PDAS solver is supposed to minimize.

Everything here is deliberately independent of the sparse solver path: the
reduced objective is built with dense linear algebra, the feasible set is
handled by an exact knapsack projection, and the minimizer is found by
accelerated projected gradient descent with an exact quadratic line search.
Only small problems (tens of dofs) are intended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly


@dataclass
class DenseQP:
    """min 1/2 v'Hv + g'v + c  subject to  lo <= v <= hi,  q'v = mass."""

    H: np.ndarray
    g: np.ndarray
    const: float
    q: np.ndarray
    mass: float
    lo: float
    hi: float

    def value(self, v):
        return 0.5 * float(v @ (self.H @ v)) + float(self.g @ v) + self.const


def project_box_mass(x, q, mass, lo, hi):
    """Euclidean projection onto {lo <= v <= hi, q'v = mass} (q > 0).

    The projection is clip(x + lam*q) with lam the root of the monotone
    piecewise-linear equation q'clip(x + lam*q) = mass, located exactly by
    scanning the sorted breakpoints.
    """
    q = np.asarray(q, dtype=float)
    if q.sum() * lo - 1e-12 > mass or q.sum() * hi + 1e-12 < mass:
        raise ValueError("mass target incompatible with the box")
    bp = np.sort(np.concatenate([(lo - x) / q, (hi - x) / q]))
    f = lambda lam: float(q @ np.clip(x + lam * q, lo, hi)) - mass
    vals = np.array([f(b) for b in bp])
    idx = np.searchsorted(vals, 0.0)
    if idx == 0:
        lam = bp[0]
    elif idx == len(bp):
        lam = bp[-1]
    else:
        # linear on [bp[idx-1], bp[idx]]: slope = sum of q_i^2 over free dofs
        lam0 = 0.5 * (bp[idx - 1] + bp[idx])
        inner = x + lam0 * q
        free = (inner > lo) & (inner < hi)
        slope = float((q[free] ** 2).sum())
        lam = lam0 - f(lam0) / slope if slope > 0 else bp[idx]
    return np.clip(x + lam * q, lo, hi)


def solve_qp(qp, x0=None, tol=1e-10, max_iter=100_000):
    """Projected gradient with exact line search along the projection arc.

    Stops when the projected-gradient step stalls below `tol` (relative) or
    stops improving; the iterates stay feasible throughout.
    """
    n = qp.H.shape[0]
    lip = float(np.linalg.eigvalsh(qp.H).max())
    step = 1.0 / max(lip, 1e-30)
    x = project_box_mass(x0 if x0 is not None else np.full(n, qp.mass / qp.q.sum()),
                         qp.q, qp.mass, qp.lo, qp.hi)
    best_gap, since_best = np.inf, 0
    for _ in range(max_iter):
        grad = qp.H @ x + qp.g
        z = project_box_mass(x - step * grad, qp.q, qp.mass, qp.lo, qp.hi)
        d = z - x
        gap = np.abs(d).max()
        if gap <= tol * (1.0 + np.abs(x).max()):
            return x
        if gap < 0.5 * best_gap:
            best_gap, since_best = gap, 0
        else:
            since_best += 1
            if since_best > 5000:  # floating-point floor reached
                return x
        dhd = float(d @ (qp.H @ d))
        t_ls = float(np.clip(-float(grad @ d) / dhd, 0.0, 1.0)) if dhd > 0 else 1.0
        # at the floating-point floor the search direction degenerates;
        # fall back to the plain projected point, which stays feasible
        x = x + t_ls * d if t_ls > 0 else z
    return x


def dense_objective(prob):
    """Dense reduced objective of a (Neumann) ViProblem.

    J(v) = tau * [theta/2 v'Sv + f2'v + 1/2 (theta Bv - f1)' L (theta Bv - f1)]
    with L the mean-constrained inverse of the mobility stiffness; plus the
    alpha_k s(v)^2 term under SAV coupling.
    """
    if prob.dirichlet is not None:
        raise ValueError("dense oracle covers the Neumann problems only")
    space = prob.space
    b_mat, _, q = assembly.unit_system(space)
    n = space.ndof
    s_dense = prob.s.toarray()
    b_dense = b_mat.toarray()
    a_m = prob.a_m.toarray()
    bordered = np.zeros((n + 1, n + 1))
    bordered[:n, :n] = a_m
    bordered[:n, n] = q
    bordered[n, :n] = q
    rhs = np.vstack([np.eye(n), np.zeros((1, n))])
    l_op = np.linalg.solve(bordered, rhs)[:n, :]
    l_op = 0.5 * (l_op + l_op.T)

    th, tau = prob.theta, prob.tau
    h = tau * (th * s_dense + th**2 * b_dense @ l_op @ b_dense)
    g = tau * (prob.rhs2 - th * b_dense @ l_op @ prob.rhs1)
    const = tau * 0.5 * float(prob.rhs1 @ (l_op @ prob.rhs1))
    if prob.s_k is not None:
        h = h + tau * prob.s_k.toarray()
    if prob.sav is not None:
        sav = prob.sav
        s0 = (sav.r_hist - float(sav.d @ sav.u_hist)) / sav.alpha_k
        h = h + 2.0 * sav.alpha_k * np.outer(sav.d, sav.d)
        g = g + 2.0 * sav.alpha_k * s0 * sav.d
        const = const + sav.alpha_k * s0 * s0
    h = 0.5 * (h + h.T)
    mass = prob.rhs1.sum() / th
    return DenseQP(h, g, const, q, mass, prob.bounds.lo, prob.bounds.hi)


def oracle_minimize(prob, x0=None, tol=1e-12):
    """Minimizer of the problem's convex objective via the dense oracle."""
    return solve_qp(dense_objective(prob), x0=x0, tol=tol)


def random_stationary_problem(rng, n_cells=None, p=1, active_target=True):
    """Small random stationary ViProblem with (typically) active constraints.

    The box is placed strictly inside the range of the unconstrained solution,
    so both bounds usually bind.
    """
    from .mesh import build_space, interval
    from .pdas import Box, BoxBounds, ViProblem, unconstrained_solve

    # small kappa lets u track the data, giving an O(1) solution range so the
    # box bites the peaks without drowning the multiplier scale
    space = build_space(interval(0.0, 1.0, int(rng.integers(8, 12)) if n_cells is None else n_cells), p)
    kappa = float(10.0 ** rng.uniform(-4.0, -2.0))
    mob = float(rng.uniform(0.5, 2.0))
    amp = float(rng.uniform(1.0, 3.0)) if active_target else 0.2
    freq = int(rng.integers(1, 4))
    phase = float(rng.uniform(0, 2 * np.pi))
    mean0 = float(rng.uniform(0.35, 0.65))
    # subtract the oscillation's own mean so mean(f1) stays inside the box
    osc_mean = (np.sin(freq * np.pi + phase) - np.sin(phase)) / (freq * np.pi)
    f1 = lambda x: mean0 + amp * (np.cos(freq * np.pi * x + phase) - osc_mean)
    f2 = lambda x: float(rng.uniform(-0.5, 0.5)) * np.sin(np.pi * x)
    a_m = assembly.assemble_stiffness(space, mob)
    s = assembly.assemble_stiffness(space, kappa)
    rhs1 = assembly.assemble_load(space, f1).values
    rhs2 = assembly.assemble_load(space, f2).values
    prob = ViProblem(space, 1.0, a_m, s, rhs1, rhs2, BoxBounds(-1e9, 1e9).at())
    if active_target:
        # clip the box a little inside the unconstrained range: the peaks go
        # active while most dofs stay free (the regime the method targets)
        u_free, _, _ = unconstrained_solve(prob)
        vals = np.asarray(u_free)
        mean_u = rhs1.sum() / space.mesh.volume
        lo = mean_u - float(rng.uniform(0.75, 0.95)) * (mean_u - vals.min())
        hi = mean_u + float(rng.uniform(0.75, 0.95)) * (vals.max() - mean_u)
        prob.bounds = Box(lo, hi, lo, hi)
    return prob


def selftest(n_problems=20, seed=20240601, tol=1e-7, verbose=True):
    """Oracle-equivalence suite: PDAS vs dense projected gradient on small
    randomized stationary problems with active constraints.

    Returns the number of failures.
    """
    from .pdas import PdasConfig, energy_value, pdas_solve, unconstrained_solve

    rng = np.random.default_rng(seed)
    failures = 0
    for i in range(n_problems):
        prob = random_stationary_problem(rng)
        u0, _, _ = unconstrained_solve(prob)
        u, w, mu, report = pdas_solve(prob, PdasConfig(), u0)
        x_star = oracle_minimize(prob)
        gap = np.abs(np.asarray(u) - x_star).max()
        qp = dense_objective(prob)
        e_pdas = energy_value(prob, u)
        e_oracle = qp.value(x_star)
        ok = report.converged and gap <= tol and e_pdas <= e_oracle + 1e-9
        failures += 0 if ok else 1
        if verbose:
            n_act = report.final_active_lower.size + report.final_active_upper.size
            print(f"oracle check {i + 1:2d}/{n_problems}: "
                  f"{'PASS' if ok else 'FAIL'}  gap = {gap:.2e}, "
                  f"active dofs = {n_act}, iterations = {report.iterations}")
    return failures
