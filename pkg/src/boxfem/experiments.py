"""Registry of the benchmark problems and drivers producing error tables,
diagnostic traces and iteration-count logs.

Each case carries its coefficients, bounds, manufactured forcing (derived
symbolically offline and hard-coded in closed form), and an initialization
recipe.  Reference-based cases solve their own fine-mesh reference and take
the nodal range of that reference as the box.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import assembly
from .assembly import Coefficient, unit_system
from .mesh import NodalVector, build_space, interpolate, interval, rectangle
from .pdas import BoxBounds, PdasConfig, PdasFailure
from .schemes import (SavConfig, TimeState, bdf_table, init_postprocess,
                      init_vi, sav_init, solve_second_order_stationary,
                      solve_stationary, step_fourth_order, step_sav,
                      step_second_order)
from .structure import eoc, error_norms

CASE_ORDER = [
    "stationary_smooth_2d",
    "stationary_discontinuous_1d",
    "lubrication_accuracy",
    "lubrication_singular",
    "cahn_hilliard_accuracy",
    "cahn_hilliard_logarithmic",
    "second_order_accuracy",
    "dirichlet_positivity",
    "porous_medium_barenblatt",
]


@dataclass
class TestCase:
    name: str
    kind: str  # stationary | fourth-no-potential | fourth-sav | second-order | second-order-stationary
    dim: int
    domain: tuple
    bounds: BoxBounds
    final_time: Optional[float]
    defaults: dict
    params: dict = field(default_factory=dict)
    description: str = ""
    f1: Optional[Callable] = None
    f2: object = 0.0
    stationary_mobility: object = 1.0
    kappa: object = 1.0
    mobility: Optional[Callable] = None
    sav: Optional[SavConfig] = None
    forcing: Optional[Callable] = None
    exact: Optional[Callable] = None
    grad_exact: Optional[Callable] = None
    init: Optional[Callable] = None
    reference: Optional[Callable] = None
    qualitative: bool = False


@dataclass
class RunResult:
    case: str
    params: dict
    seed: Optional[int]
    table: list = field(default_factory=list)
    eoc_l2: list = field(default_factory=list)
    eoc_h1: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    pdas_max: int = 0
    max_mass_drift: float = 0.0
    bound_violations: int = 0
    failures: list = field(default_factory=list)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


def parse_tau_rule(rule):
    """Time-step rule: 'h', 'h/<number>', or a positive literal."""
    if isinstance(rule, (int, float)):
        if rule <= 0:
            raise ValueError("literal time step must be positive")
        return lambda h, r=float(rule): r
    text = str(rule).strip()
    if text == "h":
        return lambda h: h
    m = re.fullmatch(r"h\s*/\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)", text)
    if m:
        denom = float(m.group(1))
        if denom <= 0:
            raise ValueError("time-step denominator must be positive")
        return lambda h, d=denom: h / d
    m = re.fullmatch(r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?", text)
    if m:
        val = float(text)
        if val <= 0:
            raise ValueError("literal time step must be positive")
        return lambda h, r=val: r
    raise ValueError(f"cannot parse time-step rule {rule!r}: use 'h', 'h/<number>' or a literal")


# ---------------------------------------------------------------------------
# case definitions


def _case_stationary_smooth(params):
    pi = np.pi

    def u_exact(x, y):
        return np.cos(4 * pi * x) * np.cos(4 * pi * y)

    def grad_exact(x, y):
        return (-4 * pi * np.sin(4 * pi * x) * np.cos(4 * pi * y),
                -4 * pi * np.cos(4 * pi * x) * np.sin(4 * pi * y))

    def f1(x, y):
        return (1024 * pi**4 * (1 + x) * np.cos(4 * pi * x)
                + 128 * pi**3 * np.sin(4 * pi * x)
                + np.cos(4 * pi * x)) * np.cos(4 * pi * y)

    return TestCase(
        name="stationary_smooth_2d", kind="stationary", dim=2,
        domain=((0.0, 1.0), (0.0, 1.0)),
        bounds=BoxBounds(-1.0, 1.0),
        final_time=None,
        defaults={"p": 1, "k": 1, "mesh_sizes": [8, 16, 32, 64], "tau_rule": "h/2"},
        params=params,
        description="smooth stationary fourth-order system, mobility 1+x",
        f1=f1, f2=0.0, stationary_mobility=lambda x, y: 1.0 + x, kappa=1.0,
        exact=lambda x, y, t=None: u_exact(x, y),
        grad_exact=lambda x, y, t=None: grad_exact(x, y),
    )


def _case_stationary_discontinuous(params):
    eps = float(params.get("eps", 1e-3))

    def mob(x):
        return np.where(np.abs(x) < 0.5, 2.0, eps)

    f1 = lambda x: np.where((x > 0.0) & (x < 1.0), 1.0, 0.0)
    f2 = lambda x: np.where((x > -1.0) & (x < 0.0), 5.0, 0.0)

    def reference(finest_cells, ref_factor=4):
        cells = ref_factor * int(finest_cells)
        space = build_space(interval(-2.0, 2.0, cells), 3)
        u, _, _ = solve_stationary(f1, f2, mob, 1.0, space, BoxBounds(-1e9, 1e9))
        return u

    return TestCase(
        name="stationary_discontinuous_1d", kind="stationary", dim=1,
        domain=((-2.0, 2.0),),
        bounds=BoxBounds(-1e9, 1e9),  # replaced by the reference's nodal range
        final_time=None,
        defaults={"p": 1, "k": 1, "mesh_sizes": [64, 128, 256, 512], "tau_rule": "h/2"},
        params={"eps": eps},
        description="discontinuous mobility/data on (-2,2), reference-based",
        f1=f1, f2=f2, stationary_mobility=mob, kappa=1.0,
        reference=reference,
    )


def _case_lubrication_accuracy(params):
    def u_exact(x, y, t):
        return (1 + np.cos(x) * np.cos(y)) * np.cos(t)

    def grad_exact(x, y, t):
        return (-np.cos(t) * np.sin(x) * np.cos(y), -np.cos(t) * np.cos(x) * np.sin(y))

    def forcing(x, y, t):
        g = np.cos(x) * np.cos(y)
        c2 = np.cos(t) ** 2
        grad_g_sq = np.sin(x) ** 2 * np.cos(y) ** 2 + np.cos(x) ** 2 * np.sin(y) ** 2
        return -(1 + g) * np.sin(t) + 4 * g * (1 + g) * c2 - 2 * c2 * grad_g_sq

    def init(space, bounds, cfg, seed):
        u0 = lambda x, y: 1 + np.cos(x) * np.cos(y)
        bilap = lambda x, y: 4 * np.cos(x) * np.cos(y)
        return init_vi(u0, bilap, space, bounds, cfg), None

    return TestCase(
        name="lubrication_accuracy", kind="fourth-no-potential", dim=2,
        domain=((0.0, 2 * np.pi), (0.0, 2 * np.pi)),
        bounds=BoxBounds(lambda t: 0.0, lambda t: 2 * np.cos(t), tol_relax=1e-15),
        final_time=1.0,
        defaults={"p": 1, "k": 2, "mesh_sizes": [8, 16, 32, 64], "tau_rule": "h/2"},
        params=params,
        description="manufactured lubrication solution, M(v) = v, time-dependent box",
        mobility=lambda v: v,
        forcing=forcing,
        exact=u_exact, grad_exact=grad_exact,
        init=init,
    )


def _case_lubrication_singular(params):
    pi = np.pi

    def init(space, bounds, cfg, seed):
        u0 = lambda x: 0.8 - np.cos(pi * x) + 0.25 * np.cos(2 * pi * x)
        bilap = lambda x: pi**4 * (-np.cos(pi * x) + 4.0 * np.cos(2 * pi * x))
        return init_vi(u0, bilap, space, bounds, cfg), None

    return TestCase(
        name="lubrication_singular", kind="fourth-no-potential", dim=1,
        domain=((-1.0, 1.0),),
        bounds=BoxBounds(0.0, 4.0, tol_relax=1e-15),
        final_time=2e-2,
        defaults={"p": 1, "k": 1, "mesh_sizes": [49], "tau_rule": 1e-4},
        params=params,
        description="singular lubrication M(v) = sqrt(v), touches zero near t = 7.4e-4",
        mobility=lambda v: np.sqrt(v),
        qualitative=True,
        init=init,
    )


def _case_ch_accuracy(params):
    def u_exact(x, y, t):
        return np.cos(x) * np.cos(y) * np.cos(t)

    def grad_exact(x, y, t):
        return (-np.cos(t) * np.sin(x) * np.cos(y), -np.cos(t) * np.cos(x) * np.sin(y))

    def forcing(x, y, t):
        g = np.cos(x) * np.cos(y)
        c = np.cos(t)
        p_fac = 2 * c - g * c**2 + g**3 * c**4
        q_fac = (1 - g**2 * c**2) * p_fac
        dq = -2 * g * c**2 * p_fac + (1 - g**2 * c**2) * (-(c**2) + 3 * g**2 * c**4)
        grad_g_sq = np.sin(x) ** 2 * np.cos(y) ** 2 + np.cos(x) ** 2 * np.sin(y) ** 2
        return -g * np.sin(t) - (dq * grad_g_sq - 2 * g * q_fac)

    sav = SavConfig(
        F=lambda v: (v**5 / 5 - 2 * v**3 / 3 + v) / 4,
        f=lambda v: 0.25 * (v**2 - 1) ** 2,
        C0=1.0,
    )

    def init(space, bounds, cfg, seed):
        u0 = lambda x, y: np.cos(x) * np.cos(y)
        bilap = lambda x, y: 4 * np.cos(x) * np.cos(y)
        u = init_vi(u0, bilap, space, bounds, cfg)
        return u, sav_init(u, sav)

    return TestCase(
        name="cahn_hilliard_accuracy", kind="fourth-sav", dim=2,
        domain=((0.0, 2 * np.pi), (0.0, 2 * np.pi)),
        bounds=BoxBounds(lambda t: -np.cos(t), lambda t: np.cos(t)),
        final_time=1.0,
        defaults={"p": 1, "k": 2, "mesh_sizes": [8, 16, 32, 64], "tau_rule": "h/2"},
        params=params,
        description="manufactured Cahn-Hilliard with M = 1-u^2 and quartic potential term",
        mobility=lambda v: 1.0 - v**2,
        sav=sav, kappa=1.0,
        forcing=forcing,
        exact=u_exact, grad_exact=grad_exact,
        init=init,
    )


def _case_ch_logarithmic(params):
    sav = SavConfig(
        F=lambda v: (1 + v) * np.log1p(v) + (1 - v) * np.log1p(-v) - 2.5 * v**2,
        f=lambda v: np.log1p(v) - np.log1p(-v) - 5.0 * v,
        C0=float(params.get("C0", 1.0)),
    )

    def init(space, bounds, cfg, seed):
        rng = np.random.default_rng(7 if seed is None else seed)
        vals = 0.2 + 0.05 * rng.uniform(-1.0, 1.0, space.ndof)
        u0 = NodalVector(vals, space)
        return u0, sav_init(u0, sav)

    return TestCase(
        name="cahn_hilliard_logarithmic", kind="fourth-sav", dim=2,
        domain=((0.0, 1.0), (0.0, 1.0)),
        bounds=BoxBounds(-1.0, 1.0, tol_relax=1e-10),
        final_time=0.15,
        defaults={"p": 1, "k": 2, "mesh_sizes": [49], "tau_rule": 1e-4},
        params=dict(params),
        description="Cahn-Hilliard with logarithmic potential and degenerate mobility",
        mobility=lambda v: 1.0 - v**2,
        sav=sav, kappa=0.01,
        qualitative=True,
        init=init,
    )


def _case_second_order_accuracy(params):
    pi = np.pi

    def phi(x, y):
        return np.cos(x) * np.cos(y) - 3.0 / (8 * pi) * x**4 + x**3

    def u_exact(x, y, t):
        return phi(x, y) * np.cos(t)

    def grad_exact(x, y, t):
        c = np.cos(t)
        return (c * (-np.sin(x) * np.cos(y) + 3 * x**2 - 3.0 / (2 * pi) * x**3),
                -c * np.cos(x) * np.sin(y))

    def forcing(x, y, t):
        c = np.cos(t)
        f = phi(x, y)
        lap = -2 * np.cos(x) * np.cos(y) + 6 * x - 4.5 / pi * x**2
        gx = -np.sin(x) * np.cos(y) + 3 * x**2 - 1.5 / pi * x**3
        gy = -np.cos(x) * np.sin(y)
        return -f * np.sin(t) - (1 + f * c) * c * lap - c**2 * (gx**2 + gy**2)

    def init(space, bounds, cfg, seed):
        # w0 = -lap(u0) has nonzero Neumann data here, so the stationary-solve
        # initialization is inconsistent; project the interpolant instead
        return init_postprocess(interpolate(space, phi), bounds, cfg), None

    return TestCase(
        name="second_order_accuracy", kind="second-order", dim=2,
        domain=((0.0, 2 * np.pi), (0.0, 2 * np.pi)),
        bounds=BoxBounds(lambda t: -np.cos(t), lambda t: (1 + 2 * np.pi**3) * np.cos(t)),
        final_time=1.0,
        defaults={"p": 1, "k": 2, "mesh_sizes": [8, 16, 32, 64], "tau_rule": "h/2"},
        params=params,
        description="regularized second-order problem with K(v) = 1+v",
        mobility=lambda v: 1.0 + v,
        forcing=forcing,
        exact=u_exact, grad_exact=grad_exact,
        init=init,
    )


def _case_dirichlet_positivity(params):
    eps = 1e-4

    def k_matrix(x, y):
        out = np.empty((x.size, 2, 2))
        out[:, 0, 0] = x**2 + eps * y**2
        out[:, 1, 1] = y**2 + eps * x**2
        out[:, 0, 1] = out[:, 1, 0] = -(1 - eps) * x * y
        return out

    f1 = lambda x, y: np.where(np.abs(x - 0.5) <= 0.125, 1.0, 0.0)

    return TestCase(
        name="dirichlet_positivity", kind="second-order-stationary", dim=2,
        domain=((0.0, 1.0), (0.0, 1.0)),
        bounds=BoxBounds(0.0, 1e6),
        final_time=None,
        defaults={"p": 1, "k": 1, "mesh_sizes": [14], "tau_rule": "h/2"},
        params=params,
        description="anisotropic degenerate diffusion; VI removes FEM undershoots",
        f1=f1,
        stationary_mobility=Coefficient.matrix(k_matrix),
        qualitative=True,
    )


def _case_barenblatt(params):
    m = int(params.get("m", 2))
    alpha = 1.0 / (m + 1)
    beta = alpha * (m - 1) / (2.0 * m)

    def u_exact(x, t):
        t0 = t + 1.0
        core = np.maximum(0.0, 1.0 - beta * x**2 / t0 ** (2 * alpha))
        return t0 ** (-alpha) * core ** (1.0 / (m - 1))

    def init(space, bounds, cfg, seed):
        return interpolate(space, lambda x: u_exact(x, 0.0)), None

    return TestCase(
        name="porous_medium_barenblatt", kind="second-order", dim=1,
        domain=((-5.0, 5.0),),
        bounds=BoxBounds(0.0, 1.0),
        final_time=1.2,
        defaults={"p": 1, "k": 2, "mesh_sizes": [64, 128, 256, 512], "tau_rule": "h/10"},
        params={"m": m},
        description="Barenblatt front of the porous medium equation",
        mobility=lambda v, m=m: m * np.maximum(v, 0.0) ** (m - 1),
        exact=u_exact,
        init=init,
    )


_FACTORIES = {
    "stationary_smooth_2d": _case_stationary_smooth,
    "stationary_discontinuous_1d": _case_stationary_discontinuous,
    "lubrication_accuracy": _case_lubrication_accuracy,
    "lubrication_singular": _case_lubrication_singular,
    "cahn_hilliard_accuracy": _case_ch_accuracy,
    "cahn_hilliard_logarithmic": _case_ch_logarithmic,
    "second_order_accuracy": _case_second_order_accuracy,
    "dirichlet_positivity": _case_dirichlet_positivity,
    "porous_medium_barenblatt": _case_barenblatt,
}


def make_case(name, params=None):
    if name not in _FACTORIES:
        raise KeyError(f"unknown case {name!r}; known: {', '.join(CASE_ORDER)}")
    return _FACTORIES[name](dict(params or {}))


def registry():
    """All benchmark cases with their default parameters."""
    return [make_case(name) for name in CASE_ORDER]


# ---------------------------------------------------------------------------
# drivers


def _space_for(case, cells, p):
    if case.dim == 1:
        return build_space(interval(*case.domain[0], cells), p)
    return build_space(rectangle(case.domain[0], case.domain[1], (cells, cells)), p)


def _forcing_integral(space, forcing, t):
    samples = assembly.sample_coefficient(
        Coefficient.function(lambda *xs: forcing(*xs, t)), space, space.order + 2)
    return assembly.integrate_samples(space, samples)


def _make_stepper(case, bounds, cfg):
    if case.kind == "fourth-no-potential":
        return lambda st, tbl: step_fourth_order(st, tbl, case.mobility, bounds, cfg,
                                                 forcing=case.forcing)
    if case.kind == "fourth-sav":
        return lambda st, tbl: step_sav(st, tbl, case.mobility, case.sav, bounds, cfg,
                                        forcing=case.forcing, kappa=case.kappa)
    if case.kind == "second-order":
        return lambda st, tbl: step_second_order(st, tbl, case.mobility, bounds, cfg,
                                                 forcing=case.forcing)
    raise ValueError(f"case kind {case.kind!r} is not time-dependent")


def _integrate(case, space, k, tau, t_end, cfg, seed, bounds=None, warmup_substeps=1,
               collect=True):
    """March the case from its initial state to t_end; returns (state, rows, stats)."""
    bounds = bounds or case.bounds
    b_mat, s1, q = unit_system(space)
    u0, r0 = case.init(space, bounds, cfg, seed)
    state = TimeState.initial(u0, tau, r0=r0)
    stepper = _make_stepper(case, bounds, cfg)
    tables = {j: bdf_table(j) for j in range(1, k + 1)}

    pm_hist = [float(q @ np.asarray(u0))]
    stats = {"pdas_max": 0, "bound_violations": 0, "max_mass_drift": 0.0,
             "initial_mass": pm_hist[0], "active_steps": []}
    rows = []

    def predicted(tbl, tau_step, pm_h, t_new):
        fs = _forcing_integral(space, case.forcing, t_new) if case.forcing else 0.0
        a = tbl.a_floats[: tbl.k]
        pm_new = (float(np.dot(a, pm_h[: tbl.k])) + tau_step * fs) / tbl.alpha_f
        return [pm_new] + pm_h[:4]

    def record(st, rep, pm_h):
        vals = st.history[0]
        box = bounds.at(st.t)
        n_viol = int(np.count_nonzero((vals < box.lo) | (vals > box.hi)))
        mass = float(q @ vals)
        drift = abs(mass - pm_h[0])
        stats["pdas_max"] = max(stats["pdas_max"], rep.iterations)
        stats["bound_violations"] += n_viol
        stats["max_mass_drift"] = max(stats["max_mass_drift"], drift)
        n_active = rep.final_active_lower.size + rep.final_active_upper.size
        stats["active_steps"].append((st.t, n_active, rep.iterations))
        if collect:
            row = {"t": st.t, "mass": mass, "mass_drift": drift,
                   "min_u": float(vals.min()), "max_u": float(vals.max()),
                   "energy": 0.5 * float(vals @ (s1 @ vals)),
                   "pdas_iters": rep.iterations, "active": n_active,
                   "violations": n_viol}
            if case.sav is not None and st.r_history:
                r = st.r_history[0]
                row["r"] = r
                row["modified_energy"] = case.kappa * row["energy"] + r * r
            rows.append(row)

    n_steps = max(1, int(round(t_end / tau)))
    tau = t_end / n_steps
    state = TimeState(space, state.history, state.r_history, state.t, tau)

    done = 0
    for j in range(min(k - 1, n_steps)):
        if warmup_substeps <= 1:
            state, rep = stepper(state, tables[1])
            pm_hist = predicted(tables[1], tau, pm_hist, state.t)
            record(state, rep, pm_hist)
        else:
            sub = TimeState(space, [state.history[0]], state.r_history[:1],
                            state.t, tau / warmup_substeps, mu=state.mu)
            pm_sub = [pm_hist[0]]
            for _ in range(warmup_substeps):
                sub, rep = stepper(sub, tables[1])
                pm_sub = predicted(tables[1], sub.tau, pm_sub, sub.t)
                stats["pdas_max"] = max(stats["pdas_max"], rep.iterations)
            t_new = state.t + tau
            r_hist = ([sub.r_history[0]] + state.r_history[:4]) if sub.r_history else state.r_history
            state = TimeState(space, [sub.history[0]] + state.history[:4], r_hist, t_new, tau,
                              mu=sub.mu)
            pm_hist = [pm_sub[0]] + pm_hist[:4]
            record(state, rep, pm_hist)
        done += 1

    for j in range(done, n_steps):
        state, rep = stepper(state, tables[k])
        pm_hist = predicted(tables[k], tau, pm_hist, state.t)
        record(state, rep, pm_hist)

    return state, rows, stats


def _solve_stationary_case(case, space, cfg, bounds=None):
    bounds = bounds or case.bounds
    if case.kind == "second-order-stationary":
        u, w, rep, u0 = solve_second_order_stationary(case.f1, case.stationary_mobility,
                                                      space, bounds, cfg)
        return u, w, rep, {"u_unconstrained": u0}
    u, w, rep = solve_stationary(case.f1, case.f2, case.stationary_mobility, case.kappa,
                                 space, bounds, cfg)
    return u, w, rep, {}


def _convergence_level(case, cells, p, k, tau_fn, t_end, cfg, seed, bounds, exact_obj,
                       warmup_substeps):
    t0 = time.perf_counter()
    space = _space_for(case, cells, p)
    h = space.mesh.cell_diameter
    row = {"cells": cells, "h": h, "dofs": space.ndof, "tau": float("nan"),
           "l2_rel": float("nan"), "h1_rel": float("nan"), "pdas_max_iter": 0,
           "mass_drift": 0.0, "violations": 0}
    if case.kind in ("stationary", "second-order-stationary"):
        u, w, rep, extra = _solve_stationary_case(case, space, cfg, bounds)
        err = error_norms(u, exact_obj, t=None, grad_exact=None if isinstance(exact_obj, NodalVector) else case.grad_exact)
        box = bounds.at(0.0) if bounds else case.bounds.at(0.0)
        vals = np.asarray(u)
        row.update(l2_rel=err.l2, h1_rel=err.h1, pdas_max_iter=rep.iterations,
                   mass_drift=rep.mass_residual or 0.0,
                   violations=int(np.count_nonzero((vals < box.lo) | (vals > box.hi))))
    else:
        tau = tau_fn(h)
        state, rows, stats = _integrate(case, space, k, tau, t_end, cfg, seed,
                                        bounds=bounds, warmup_substeps=warmup_substeps,
                                        collect=False)
        err = error_norms(state.latest, exact_obj, t=state.t,
                          grad_exact=None if isinstance(exact_obj, NodalVector) else case.grad_exact)
        row.update(tau=state.tau, l2_rel=err.l2, h1_rel=err.h1,
                   pdas_max_iter=stats["pdas_max"],
                   mass_drift=stats["max_mass_drift"],
                   violations=stats["bound_violations"])
    row["wall"] = time.perf_counter() - t0
    return row


def run_convergence(case, p=None, k=None, mesh_sizes=None, tau_rule=None, cfg=None,
                    seed=None, jobs=1, warmup_substeps=1):
    """Refinement study; returns a RunResult with error table and EOC columns."""
    if isinstance(case, str):
        case = make_case(case)
    p = p or case.defaults["p"]
    k = k or case.defaults["k"]
    mesh_sizes = list(mesh_sizes or case.defaults["mesh_sizes"])
    tau_fn = parse_tau_rule(tau_rule if tau_rule is not None else case.defaults["tau_rule"])
    cfg = cfg or PdasConfig()
    t_start = time.perf_counter()

    bounds = case.bounds
    exact_obj = case.exact
    if case.reference is not None:
        ref = case.reference(max(mesh_sizes))
        ref_vals = np.asarray(ref)
        bounds = BoxBounds(float(ref_vals.min()), float(ref_vals.max()),
                           case.bounds.tol_relax)
        exact_obj = ref
    if exact_obj is None:
        raise ValueError(f"case {case.name} has no exact solution or reference recipe")

    result = RunResult(case=case.name, params=dict(case.params), seed=seed)
    level = lambda cells: _convergence_level(case, cells, p, k, tau_fn, case.final_time,
                                             cfg, seed, bounds, exact_obj, warmup_substeps)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(level, c) for c in mesh_sizes]
            for cells, fut in zip(mesh_sizes, futures):
                try:
                    result.table.append(fut.result())
                except (PdasFailure, ValueError, RuntimeError) as exc:
                    result.failures.append({"cells": cells, "error": str(exc)})
    else:
        for cells in mesh_sizes:
            try:
                result.table.append(level(cells))
            except (PdasFailure, ValueError, RuntimeError) as exc:
                result.failures.append({"cells": cells, "error": str(exc)})

    ok = [r for r in result.table if np.isfinite(r["l2_rel"]) and r["l2_rel"] > 0]
    if len(ok) >= 2:
        result.eoc_l2 = eoc([(r["h"], r["l2_rel"]) for r in ok])
        if all(np.isfinite(r["h1_rel"]) and r["h1_rel"] > 0 for r in ok):
            result.eoc_h1 = eoc([(r["h"], r["h1_rel"]) for r in ok])
    result.pdas_max = max((r["pdas_max_iter"] for r in result.table), default=0)
    result.max_mass_drift = max((r["mass_drift"] for r in result.table), default=0.0)
    result.bound_violations = sum(r["violations"] for r in result.table)
    result.wall_time = time.perf_counter() - t_start
    return result


def run_simulation(case, p=None, k=None, cells=None, tau=None, t_end=None, cfg=None,
                   seed=None, warmup_substeps=1):
    """Single run with per-step diagnostics (or a one-shot stationary solve)."""
    if isinstance(case, str):
        case = make_case(case)
    p = p or case.defaults["p"]
    k = k or case.defaults["k"]
    cells = cells or case.defaults["mesh_sizes"][-1]
    cfg = cfg or PdasConfig()
    t_start = time.perf_counter()
    space = _space_for(case, cells, p)
    result = RunResult(case=case.name, params=dict(case.params), seed=seed)

    if case.kind in ("stationary", "second-order-stationary"):
        u, w, rep, extra = _solve_stationary_case(case, space, cfg)
        vals = np.asarray(u)
        box = case.bounds.at(0.0)
        _, s1, q = unit_system(space)
        result.steps.append({"t": 0.0, "mass": float(q @ vals), "mass_drift": 0.0,
                             "min_u": float(vals.min()), "max_u": float(vals.max()),
                             "energy": 0.5 * float(vals @ (s1 @ vals)),
                             "pdas_iters": rep.iterations,
                             "active": rep.final_active_lower.size + rep.final_active_upper.size,
                             "violations": int(np.count_nonzero((vals < box.lo) | (vals > box.hi)))})
        result.pdas_max = rep.iterations
        result.extra["u"] = u
        result.extra["w"] = w
        if "u_unconstrained" in extra:
            result.extra["min_unconstrained"] = float(np.asarray(extra["u_unconstrained"]).min())
            result.extra["min_vi"] = float(vals.min())
            result.extra["u_unconstrained"] = extra["u_unconstrained"]
    else:
        if tau is None:
            tau_fn = parse_tau_rule(case.defaults["tau_rule"])
            tau = tau_fn(space.mesh.cell_diameter)
        t_end = t_end if t_end is not None else case.final_time
        state, rows, stats = _integrate(case, space, k, tau, t_end, cfg, seed,
                                        warmup_substeps=warmup_substeps, collect=True)
        result.steps = rows
        result.pdas_max = stats["pdas_max"]
        result.max_mass_drift = stats["max_mass_drift"]
        result.bound_violations = stats["bound_violations"]
        result.extra["initial_mass"] = stats["initial_mass"]
        result.extra["active_steps"] = stats["active_steps"]
        result.extra["state"] = state
    result.wall_time = time.perf_counter() - t_start
    return result
