"""First- and second-order variation systems and their finite-difference twins.

Perturbing the initial data around a constant equilibrium,

    f(eps) = u0 + eps*f1 + eps^2*f2,   g, h likewise,

the solution map S(eps) is smooth in eps and its derivatives at eps = 0
satisfy linear cascade systems.  The first variation of the density obeys

    du1/dt = Lap u1 + (r - 2 mu u0) u1 - u0 (chi Lap v1 - xi Lap w1),

(at the trivial equilibrium simply du1/dt = Lap u1 + r u1) while v1, w1 come
from the linearized chemical equations.  The second variation picks up the
sources

    -2 div(u1 grad(chi v1 - xi w1)) - 2 mu u1^2

in the density equation, and a11*u1*v1 + 2*a20*u1^2 + 2*a02*v1^2 (plus the
u2 feedback) in the chemical equations, with initial data u2(0) = 2 f2.

Both orders are solved directly with the same IMEX discretization as the
nonlinear solver, so finite differences of nonlinear runs converge to the
direct solutions at first order in eps; the one-sided ladders (eps > 0 keeps
the data admissible) are sharpened by Richardson extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grid as g
from .forward import (
    EquilibriumState,
    KineticsSpec,
    ParameterSet,
    SolverConfig,
    Trajectory,
    solve_forward,
)
from .grid import Domain

__all__ = [
    "PerturbationFamily",
    "VariationStack",
    "ForwardHandle",
    "solve_first_variation",
    "solve_second_variation",
    "extract_variation_fd",
    "consistency_report",
    "ConsistencyReport",
]

DEFAULT_EPSILONS = (1e-2, 5e-3, 2.5e-3)


@dataclass
class PerturbationFamily:
    """Initial-data perturbation profiles and the epsilon ladder.

    Realized initial data: u0 + eps*f1 + eps^2*f2 (likewise g, h), so the
    first and second eps-derivatives at zero are f1 and 2*f2.
    """

    f1: np.ndarray | None = None
    g1: np.ndarray | None = None
    h1: np.ndarray | None = None
    f2: np.ndarray | None = None
    g2: np.ndarray | None = None
    h2: np.ndarray | None = None
    epsilons: tuple = DEFAULT_EPSILONS
    enforce_nonnegative: bool = True

    def profile(self, name, domain: Domain):
        val = getattr(self, name)
        if val is None:
            return domain.zeros()
        return domain.check_field(np.asarray(val, dtype=float), name)

    def validate(self, domain: Domain):
        eps = tuple(float(e) for e in self.epsilons)
        if any(e <= 0 for e in eps):
            raise ValueError("epsilon ladder entries must be strictly positive")
        if list(eps) != sorted(eps, reverse=True) or len(set(eps)) != len(eps):
            raise ValueError("epsilon ladder must be strictly decreasing")
        if self.enforce_nonnegative:
            for name in ("f1", "g1", "h1", "f2", "g2", "h2"):
                prof = self.profile(name, domain)
                if float(np.min(prof)) < 0:
                    raise ValueError(f"perturbation profile {name} must be non-negative")
        return self

    def initial_data(self, domain: Domain, equilibrium: EquilibriumState, eps: float):
        if eps <= 0:
            raise ValueError("eps must be strictly positive")
        u0, v0, w0 = equilibrium
        f = u0 + eps * self.profile("f1", domain) + eps * eps * self.profile("f2", domain)
        gg = v0 + eps * self.profile("g1", domain) + eps * eps * self.profile("g2", domain)
        h = w0 + eps * self.profile("h1", domain) + eps * eps * self.profile("h2", domain)
        return f, gg, h


@dataclass
class VariationStack:
    """First (and optionally second) variation trajectories with provenance."""

    order1: Trajectory
    order2: Trajectory | None = None
    provenance: str = "direct"
    diagnostics: dict = field(default_factory=dict)

    def validate(self):
        if self.order2 is not None and self.order1 is None:
            raise ValueError("second-order fields require the first order")
        return self


@dataclass
class ForwardHandle:
    """Bundle of a forward run callable with the grid/equilibrium it acts on."""

    domain: Domain
    equilibrium: EquilibriumState
    run: object          # callable (f, g, h) -> Trajectory
    cfg: SolverConfig

    @classmethod
    def from_model(cls, domain, p: ParameterSet, kin: KineticsSpec, cfg: SolverConfig):
        def _run(f, gg, h):
            return solve_forward(domain, (f, gg, h), p, kin, cfg)
        return cls(domain=domain, equilibrium=kin.expansion_point, run=_run, cfg=cfg)


# ---------------------------------------------------------------------------
# direct solvers


def _stored_index_times(cfg: SolverConfig):
    n_steps = cfg.n_steps
    stored = list(range(0, n_steps + 1, cfg.store_every))
    if stored[-1] != n_steps:
        stored.append(n_steps)
    return n_steps, stored, np.array([i * cfg.dt for i in stored])


def _linear_chem_slave(domain, a10_grid, decay, u1, tol):
    return g.helmholtz_solve(domain, a10_grid * u1, decay, tol=tol)


def solve_first_variation(domain: Domain, p: ParameterSet, kin: KineticsSpec,
                          fam: PerturbationFamily, cfg: SolverConfig) -> VariationStack:
    """Direct solution of the first-order variation system (stride-1 storage)."""
    cfg.validate()
    fam.validate(domain)
    kin.validate(domain)
    eq = kin.expansion_point
    dt = cfg.dt
    a10 = kin.coeff_grid("g", (1, 0), domain)
    b10 = kin.coeff_grid("h", (1, 0), domain)
    a10 = a10 if a10 is not None else domain.zeros()
    b10 = b10 if b10 is not None else domain.zeros()
    beta, delta = kin.beta_decay, kin.delta_decay
    r_eff = p.r - 2.0 * p.mu * eq.u0

    u1 = fam.profile("f1", domain)
    if cfg.tau == 0:
        v1 = _linear_chem_slave(domain, a10, beta, u1, cfg.elliptic_tol)
        w1 = _linear_chem_slave(domain, b10, delta, u1, cfg.elliptic_tol)
    else:
        v1 = fam.profile("g1", domain)
        w1 = fam.profile("h1", domain)

    n_steps = cfg.n_steps
    us, vs, ws = ([None] * (n_steps + 1) for _ in range(3))
    us[0], vs[0], ws[0] = u1, v1, w1
    s = cfg.relaxation_speedup
    for n in range(1, n_steps + 1):
        coupling = 0.0
        if eq.u0 != 0.0 and (p.chi or p.xi):
            coupling = eq.u0 * (p.chi * g.laplacian_neumann(domain, v1)
                                - p.xi * g.laplacian_neumann(domain, w1))
        rhs = u1 + dt * (r_eff * u1 - coupling)
        u1 = g.spectral_helmholtz(domain, rhs / dt, 1.0 / dt)
        if cfg.tau == 0:
            v1 = _linear_chem_slave(domain, a10, beta, u1, cfg.elliptic_tol)
            w1 = _linear_chem_slave(domain, b10, delta, u1, cfg.elliptic_tol)
        else:
            v1 = g.spectral_helmholtz(
                domain, (v1 + s * dt * (a10 * us[n - 1] - beta * v1)) / (s * dt), 1.0 / (s * dt))
            w1 = g.spectral_helmholtz(
                domain, (w1 + s * dt * (b10 * us[n - 1] - delta * w1)) / (s * dt), 1.0 / (s * dt))
        us[n], vs[n], ws[n] = u1, v1, w1
    times = np.arange(n_steps + 1) * dt
    traj = Trajectory(domain, times, np.stack(us), np.stack(vs), np.stack(ws))
    return VariationStack(order1=traj, provenance="direct")


def solve_second_variation(domain: Domain, p: ParameterSet, kin: KineticsSpec,
                           fam: PerturbationFamily, first: VariationStack,
                           cfg: SolverConfig) -> VariationStack:
    """Direct solution of the second-order variation system.

    Requires the first variation at every step (stride-1), as produced by
    :func:`solve_first_variation`.
    """
    if first is None or first.order1 is None:
        raise ValueError("second variation requires the first-variation stack")
    cfg.validate()
    eq = kin.expansion_point
    dt = cfg.dt
    o1 = first.order1
    n_steps = cfg.n_steps
    if len(o1.times) != n_steps + 1:
        raise ValueError("first variation must be stored at every step for the second order")
    a10 = kin.coeff_grid("g", (1, 0), domain)
    b10 = kin.coeff_grid("h", (1, 0), domain)
    a10 = a10 if a10 is not None else domain.zeros()
    b10 = b10 if b10 is not None else domain.zeros()
    beta, delta = kin.beta_decay, kin.delta_decay
    r_eff = p.r - 2.0 * p.mu * eq.u0
    s = cfg.relaxation_speedup

    def slave_v2(u2, n):
        src = kin.second_order_sources_g(domain, o1.u[n], o1.v[n])
        return g.helmholtz_solve(domain, a10 * u2 + src, beta, tol=cfg.elliptic_tol)

    def slave_w2(u2, n):
        src = kin.second_order_sources_h(domain, o1.u[n], o1.w[n])
        return g.helmholtz_solve(domain, b10 * u2 + src, delta, tol=cfg.elliptic_tol)

    u2 = 2.0 * fam.profile("f2", domain)
    if cfg.tau == 0:
        v2, w2 = slave_v2(u2, 0), slave_w2(u2, 0)
    else:
        v2, w2 = 2.0 * fam.profile("g2", domain), 2.0 * fam.profile("h2", domain)

    us, vs, ws = ([None] * (n_steps + 1) for _ in range(3))
    us[0], vs[0], ws[0] = u2, v2, w2
    for n in range(1, n_steps + 1):
        m = n - 1
        pot1 = p.chi * o1.v[m] - p.xi * o1.w[m]
        source = -2.0 * p.mu * o1.u[m] * o1.u[m]
        if p.chi or p.xi:
            source = source - 2.0 * g.advective_flux_div(domain, o1.u[m], pot1)
            if eq.u0 != 0.0:
                source = source - eq.u0 * (p.chi * g.laplacian_neumann(domain, vs[m])
                                           - p.xi * g.laplacian_neumann(domain, ws[m]))
        rhs = u2 + dt * (r_eff * u2 + source)
        u2 = g.spectral_helmholtz(domain, rhs / dt, 1.0 / dt)
        if cfg.tau == 0:
            v2, w2 = slave_v2(u2, n), slave_w2(u2, n)
        else:
            src_v = kin.second_order_sources_g(domain, o1.u[m], o1.v[m])
            src_w = kin.second_order_sources_h(domain, o1.u[m], o1.w[m])
            v2 = g.spectral_helmholtz(
                domain, (v2 + s * dt * (a10 * us[m] - beta * v2 + src_v)) / (s * dt), 1.0 / (s * dt))
            w2 = g.spectral_helmholtz(
                domain, (w2 + s * dt * (b10 * us[m] - delta * w2 + src_w)) / (s * dt), 1.0 / (s * dt))
        us[n], vs[n], ws[n] = u2, v2, w2
    times = np.arange(n_steps + 1) * dt
    traj2 = Trajectory(domain, times, np.stack(us), np.stack(vs), np.stack(ws))
    return VariationStack(order1=o1, order2=traj2, provenance="direct")


# ---------------------------------------------------------------------------
# finite-difference extraction


def _traj_linear_comb(domain, terms):
    """Sum of (coeff, Trajectory) pairs as a new Trajectory."""
    times = terms[0][1].times
    u = sum(c * t.u for c, t in terms)
    v = sum(c * t.v for c, t in terms)
    w = sum(c * t.w for c, t in terms)
    return Trajectory(domain, times, u, v, w)


def _neville_to_zero(domain, nodes, values):
    """Polynomial extrapolation of trajectory-valued samples to eps -> 0.

    ``nodes`` is the decreasing eps ladder; column j of the tableau holds the
    degree-j interpolants evaluated at zero, entry i spanning nodes i..i+j.
    Returns (best, corrections) where corrections[k] is the sup-norm change
    introduced by tableau column k+1 (an extrapolation health diagnostic).
    """
    m = len(nodes)
    column = list(values)
    corrections = []
    for j in range(1, m):
        new_column = []
        for i in range(m - j):
            e_lo, e_hi = nodes[i + j], nodes[i]     # e_lo < e_hi
            # P_{i..i+j}(0) = (e_hi * P_{i+1..i+j} - e_lo * P_{i..i+j-1}) / (e_hi - e_lo)
            num = _traj_linear_comb(domain, [
                (e_hi / (e_hi - e_lo), column[i + 1]),
                (-e_lo / (e_hi - e_lo), column[i]),
            ])
            new_column.append(num)
        corrections.append(float(np.max(np.abs(new_column[-1].u - column[-1].u))))
        column = new_column
    return column[-1], corrections


def extract_variation_fd(handle: ForwardHandle, fam: PerturbationFamily, order: int = 1,
                         first_direct: Trajectory | None = None,
                         return_ladder: bool = False):
    """Variations by one-sided differencing of nonlinear runs over the eps ladder.

    Order 1 uses (S(eps) - S(0))/eps, order 2 uses
    2*(S(eps) - S(0) - eps*u1)/eps^2; both are Richardson-extrapolated across
    the ladder (one-sided stencils only, since eps < 0 can break the
    non-negativity of the initial data).  ``first_direct`` substitutes a
    trusted first-order trajectory in the order-2 stencil; by default the
    extrapolated order-1 result is used.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    domain = handle.domain
    fam.validate(domain)
    eps_ladder = tuple(float(e) for e in fam.epsilons)
    eq = handle.equilibrium
    base = handle.run(domain.constant(eq.u0), domain.constant(eq.v0), domain.constant(eq.w0))
    runs = [handle.run(*fam.initial_data(domain, eq, e)) for e in eps_ladder]

    d1 = [_traj_linear_comb(domain, [(1.0 / e, r), (-1.0 / e, base)])
          for e, r in zip(eps_ladder, runs)]
    order1, corr1 = _neville_to_zero(domain, eps_ladder, d1)
    diagnostics = {"order1_corrections": corr1}
    if len(corr1) >= 2 and corr1[-1] > corr1[-2] * 4.0 and corr1[-1] > 1e-12:
        diagnostics["ladder_warning"] = (
            "order-1 extrapolation corrections are not decreasing; ladder too coarse")
    ladder = [(e, VariationStack(order1=d, provenance="finite-difference")) for e, d in zip(eps_ladder, d1)]
    if order == 1:
        stack = VariationStack(order1=order1, provenance="finite-difference",
                               diagnostics=diagnostics)
        return (stack, ladder) if return_ladder else stack

    u1_traj = first_direct if first_direct is not None else order1
    d2 = [_traj_linear_comb(domain, [(2.0 / (e * e), r), (-2.0 / (e * e), base),
                                     (-2.0 / e, u1_traj)])
          for e, r in zip(eps_ladder, runs)]
    order2, corr2 = _neville_to_zero(domain, eps_ladder, d2)
    diagnostics["order2_corrections"] = corr2
    ladder = [(e, VariationStack(order1=s1.order1, order2=s2, provenance="finite-difference"))
              for (e, s1), s2 in zip(ladder, d2)]
    stack = VariationStack(order1=order1, order2=order2, provenance="finite-difference",
                           diagnostics=diagnostics)
    return (stack, ladder) if return_ladder else stack


# ---------------------------------------------------------------------------
# consistency between the two provenances


def space_time_norm(domain: Domain, times, values) -> float:
    """L2 norm over the space-time cylinder with trapezoid weights in both."""
    times = np.asarray(times)
    wt = np.empty(len(times))
    if len(times) == 1:
        wt[0] = 1.0
    else:
        dt = np.diff(times)
        wt[0] = dt[0] / 2
        wt[-1] = dt[-1] / 2
        wt[1:-1] = (dt[:-1] + dt[1:]) / 2
    sq = np.abs(values) ** 2 * domain.weights
    per_time = sq.reshape(len(times), -1).sum(axis=1)
    return math.sqrt(float(np.sum(wt * per_time)))


@dataclass
class ConsistencyReport:
    rows: list                      # (eps, order, l2, linf)
    slopes: dict                    # order -> fitted slope (may be NaN)
    floor: float = 1e-13

    def to_text(self):
        lines = ["eps        order  L2-discrepancy  Linf-discrepancy"]
        for eps, order, l2, linf in self.rows:
            lines.append(f"{eps:<10.3e} {order:<6d} {l2:<15.6e} {linf:<16.6e}")
        for order, slope in sorted(self.slopes.items()):
            tag = "at floor, slope not meaningful" if math.isnan(slope) else f"{slope:.3f}"
            lines.append(f"observed order-{order} slope: {tag}")
        return "\n".join(lines)


def _fit_slope(eps_list, err_list, floor):
    if any(e <= floor for e in err_list):
        return float("nan")
    x = np.log(np.asarray(eps_list))
    y = np.log(np.asarray(err_list))
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


def consistency_report(domain: Domain, direct: VariationStack, ladder,
                       floor: float = 1e-13) -> ConsistencyReport:
    """Per-epsilon discrepancies between direct and finite-difference variations.

    ``ladder`` is the list of (eps, VariationStack) pairs returned by
    :func:`extract_variation_fd` with ``return_ladder=True``.  Slopes come
    from a log-log least-squares fit; discrepancies at the solver floor give
    NaN slopes (flagged, not an error).
    """
    rows = []
    errs = {1: [], 2: []}
    eps_used = {1: [], 2: []}
    for eps, stack in ladder:
        diff = stack.order1.u - direct.order1.u
        l2 = space_time_norm(domain, direct.order1.times, diff)
        linf = float(np.max(np.abs(diff)))
        rows.append((eps, 1, l2, linf))
        errs[1].append(l2)
        eps_used[1].append(eps)
        if stack.order2 is not None and direct.order2 is not None:
            diff2 = stack.order2.u - direct.order2.u
            l2b = space_time_norm(domain, direct.order2.times, diff2)
            rows.append((eps, 2, l2b, float(np.max(np.abs(diff2)))))
            errs[2].append(l2b)
            eps_used[2].append(eps)
    slopes = {}
    for order in (1, 2):
        if errs[order]:
            slopes[order] = _fit_slope(eps_used[order], errs[order], floor)
    return ConsistencyReport(rows=rows, slopes=slopes, floor=floor)
