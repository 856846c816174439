"""Time integration of the attraction-repulsion system with logistic growth.

The density u obeys

    du/dt = Lap u - div(chi u grad v) + div(xi u grad w) + r u - mu u^2,

while the chemical fields v (attractant) and w (repellent) either satisfy
elliptic balance laws (tau = 0) or relax parabolically (tau = 1):

    tau dv/dt = Lap v + G(x, u, v),     tau dw/dt = Lap w + H(x, u, w).

G and H are truncated power series around a constant equilibrium; the applied
model is the linear special case G = alpha*u - beta*v, H = gamma*u - delta*w.

Time stepping is IMEX Euler: diffusion implicit (one screened-Poisson solve
per component), chemotactic advection and reactions explicit.  For tau = 0
the chemical fields are re-slaved to u by the elliptic solver after every
density update, and the supplied initial data g, h are replaced by the
elliptic balance of f from t = 0 (the elliptic equations admit no independent
initial state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import grid as g
from .errors import CFLViolation, NumericsError
from .grid import Domain

__all__ = [
    "ParameterSet",
    "SeparableField",
    "EquilibriumState",
    "KineticsSpec",
    "SolverConfig",
    "Trajectory",
    "MeasurementRecord",
    "steady_state",
    "elliptic_solve",
    "step",
    "solve_forward",
    "measure",
]


class EquilibriumState(NamedTuple):
    """Constant solution (u0, v0, w0); the kinetics must vanish there."""

    u0: float
    v0: float
    w0: float


@dataclass(frozen=True)
class SeparableField:
    """Coefficient of the form A1(x') * A2(x_n), x_n the last coordinate.

    The axial factor must have a nonvanishing integral over its interval,
    otherwise the factorization is not recoverable from transform data.
    """

    transverse: np.ndarray
    axial: np.ndarray

    def on_grid(self, domain: Domain) -> np.ndarray:
        t = np.asarray(self.transverse, dtype=float)
        a = np.asarray(self.axial, dtype=float)
        if domain.dim == 1:
            raise ValueError("separable coefficients need at least two dimensions")
        if t.shape != (domain.cells[0],) or a.shape != (domain.cells[1],):
            raise ValueError(
                f"separable factors have shapes {t.shape}/{a.shape}, "
                f"expected ({domain.cells[0]},)/({domain.cells[1]},)"
            )
        return np.multiply.outer(t, a)

    def axial_integral(self, domain: Domain) -> float:
        w = np.full(domain.cells[-1], domain.spacing[-1])
        w[0] = w[-1] = 0.5 * domain.spacing[-1]
        return float(np.sum(w * self.axial))

    def validate(self, domain: Domain):
        if abs(self.axial_integral(domain)) < 1e-12:
            raise ValueError("axial factor integrates to zero; not an admissible separable form")


@dataclass(frozen=True)
class ParameterSet:
    """The unknowns of the applied model: chi, xi, r, mu, alpha, beta, gamma, delta.

    alpha and gamma may be spatial fields (arrays on the grid, constant along
    the last axis) or separable coefficients; beta and delta are the strictly
    positive decay rates of the chemical balance laws.
    """

    chi: float
    xi: float
    r: float
    mu: float
    alpha: object = 1.0
    beta: float = 1.0
    gamma: object = 1.0
    delta: float = 1.0

    def validate(self, domain: Domain | None = None):
        if self.chi < 0 or self.xi < 0:
            raise ValueError("chemotactic sensitivities chi, xi must be non-negative")
        if self.r < 0:
            raise ValueError("growth rate r must be non-negative")
        if self.mu <= 0:
            raise ValueError("competition strength mu must be strictly positive")
        if self.beta <= 0 or self.delta <= 0:
            raise ValueError("decay rates beta, delta must be strictly positive")
        for name in ("alpha", "gamma"):
            val = getattr(self, name)
            if isinstance(val, np.ndarray):
                if domain is not None:
                    domain.check_field(val, name)
                if np.min(val) < 0:
                    raise ValueError(f"spatial {name} must be non-negative")
            elif isinstance(val, SeparableField):
                if domain is not None:
                    val.validate(domain)
            elif val < 0:
                raise ValueError(f"{name} must be non-negative")
        return self

    def as_dict(self):
        return {
            "chi": self.chi, "xi": self.xi, "r": self.r, "mu": self.mu,
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "delta": self.delta,
        }


def coefficient_on_grid(value, domain: Domain):
    """Materialize a constant / array / separable coefficient on the grid."""
    if isinstance(value, SeparableField):
        return value.on_grid(domain)
    if isinstance(value, np.ndarray):
        return domain.check_field(value, "coefficient")
    return domain.constant(float(value))


def coefficient_mean(value, domain: Domain):
    if isinstance(value, (np.ndarray, SeparableField)):
        f = coefficient_on_grid(value, domain)
        return float(g.quadrature(domain, f) / np.prod(domain.lengths))
    return float(value)


def _monomial_weight(p: int, q: int) -> float:
    # Normalization contract: with these weights the second-variation sources
    # of the chemical equations read  a11*u1*v1 + 2*a20*u1^2 + 2*a02*v1^2.
    if p + q <= 1:
        return 1.0
    if p + q == 2:
        return 0.5 if (p, q) == (1, 1) else 1.0
    return 1.0 / (math.factorial(p) * math.factorial(q))


@dataclass
class KineticsSpec:
    """Truncated power-series kinetics for the chemical equations.

    ``g_coeffs[(p, q)]`` multiplies (u - u0)^p (v - v0)^q in G (weighted per
    :func:`_monomial_weight`), and likewise ``h_coeffs`` for H in (u, w).
    The (0, 1) entries must be constants with negative value (their negation
    is the decay rate); (1, 0) entries must not depend on the last coordinate;
    total order >= 2 entries are constants or separable fields.
    """

    g_coeffs: dict = field(default_factory=dict)
    h_coeffs: dict = field(default_factory=dict)
    expansion_point: EquilibriumState = EquilibriumState(0.0, 0.0, 0.0)
    max_order: int = 2

    @classmethod
    def from_parameters(cls, p: ParameterSet, second_order_g=None, second_order_h=None,
                        expansion_point: EquilibriumState | None = None,
                        max_order: int = 2):
        gc = {(1, 0): p.alpha, (0, 1): -p.beta}
        hc = {(1, 0): p.gamma, (0, 1): -p.delta}
        if second_order_g:
            gc.update(second_order_g)
        if second_order_h:
            hc.update(second_order_h)
        eq = expansion_point if expansion_point is not None else EquilibriumState(0.0, 0.0, 0.0)
        return cls(g_coeffs=gc, h_coeffs=hc, expansion_point=eq, max_order=max_order)

    def validate(self, domain: Domain | None = None):
        for label, table in (("g", self.g_coeffs), ("h", self.h_coeffs)):
            for (p, q), val in table.items():
                if p + q < 1 or p + q > self.max_order:
                    raise ValueError(f"{label}_coeffs[{(p, q)}] outside total order 1..{self.max_order}")
                if (p, q) == (0, 1):
                    if isinstance(val, (np.ndarray, SeparableField)):
                        raise ValueError(f"{label}_coeffs[(0,1)] must be a constant")
                    if float(val) >= 0:
                        raise ValueError(f"{label}_coeffs[(0,1)] must be negative (positive decay)")
                elif (p, q) == (1, 0):
                    if isinstance(val, SeparableField):
                        raise ValueError(f"{label}_coeffs[(1,0)] must not be separable-general; "
                                         "it has to be independent of the last coordinate")
                    if isinstance(val, np.ndarray) and domain is not None and domain.dim > 1:
                        fld = domain.check_field(val, f"{label}_coeffs[(1,0)]")
                        spread = np.max(np.abs(fld - fld[..., :1]))
                        if spread > 1e-10 * (1.0 + np.max(np.abs(fld))):
                            raise ValueError(f"{label}_coeffs[(1,0)] must be independent of the last coordinate")
                elif p + q >= 2:
                    if isinstance(val, np.ndarray):
                        raise ValueError(
                            f"{label}_coeffs[{(p, q)}] of order >= 2 must be a constant or SeparableField")
                    if isinstance(val, SeparableField) and domain is not None:
                        val.validate(domain)
        return self

    @property
    def beta_decay(self) -> float:
        return -float(self.g_coeffs[(0, 1)])

    @property
    def delta_decay(self) -> float:
        return -float(self.h_coeffs[(0, 1)])

    def coeff_grid(self, which: str, key, domain: Domain):
        table = self.g_coeffs if which == "g" else self.h_coeffs
        if key not in table:
            return None
        return coefficient_on_grid(table[key], domain)

    def _evaluate(self, table, domain, du, dn):
        out = np.zeros(domain.shape)
        for (p, q), val in table.items():
            term = coefficient_on_grid(val, domain) * _monomial_weight(p, q)
            if p:
                term = term * du**p
            if q:
                term = term * dn**q
            out += term
        return out

    def evaluate_g(self, domain: Domain, u, v):
        eq = self.expansion_point
        return self._evaluate(self.g_coeffs, domain, u - eq.u0, v - eq.v0)

    def evaluate_h(self, domain: Domain, u, w):
        eq = self.expansion_point
        return self._evaluate(self.h_coeffs, domain, u - eq.u0, w - eq.w0)

    def _nonlinear_in_second(self, table) -> bool:
        return any(q >= 1 and (p, q) != (0, 1) for (p, q) in table)

    def second_order_sources_g(self, domain: Domain, u1, v1):
        """a11*u1*v1 + 2*a20*u1^2 + 2*a02*v1^2 on the grid (zero entries skipped)."""
        out = np.zeros(domain.shape)
        c = self.coeff_grid("g", (1, 1), domain)
        if c is not None:
            out += c * u1 * v1
        c = self.coeff_grid("g", (2, 0), domain)
        if c is not None:
            out += 2.0 * c * u1 * u1
        c = self.coeff_grid("g", (0, 2), domain)
        if c is not None:
            out += 2.0 * c * v1 * v1
        return out

    def second_order_sources_h(self, domain: Domain, u1, w1):
        out = np.zeros(domain.shape)
        c = self.coeff_grid("h", (1, 1), domain)
        if c is not None:
            out += c * u1 * w1
        c = self.coeff_grid("h", (2, 0), domain)
        if c is not None:
            out += 2.0 * c * u1 * u1
        c = self.coeff_grid("h", (0, 2), domain)
        if c is not None:
            out += 2.0 * c * w1 * w1
        return out


@dataclass
class SolverConfig:
    tau: int = 0
    dt: float = 1e-3
    t_final: float = 1.0
    elliptic_tol: float = 1e-10
    cfl_safety: float = 0.9
    store_every: int = 1
    relaxation_speedup: float = 1.0   # tau=1 only: dv/dt = s*(Lap v + G)
    picard_tol: float = 1e-12
    picard_maxiter: int = 64
    require_nonnegative: bool = True
    negativity_floor: float = -1e-9

    def validate(self):
        if self.tau not in (0, 1):
            raise ValueError("tau must be 0 or 1")
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")
        if not (0 < self.cfl_safety <= 1):
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.store_every < 1:
            raise ValueError("store_every must be >= 1")
        return self

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_final / self.dt))
        if abs(n * self.dt - self.t_final) > 1e-9 * self.t_final:
            raise ValueError("t_final must be an integer multiple of dt")
        return max(n, 1)


class Trajectory:
    """Space-time solution triple on stored time slices (immutable arrays)."""

    def __init__(self, domain: Domain, times, u, v, w):
        self.domain = domain
        self.times = np.asarray(times, dtype=float)
        self.u = np.asarray(u)
        self.v = np.asarray(v)
        self.w = np.asarray(w)
        for arr in (self.times, self.u, self.v, self.w):
            arr.setflags(write=False)
        if not (self.u.shape == self.v.shape == self.w.shape == (len(self.times),) + domain.shape):
            raise ValueError("trajectory arrays inconsistent with the stored times and domain")

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.u[-1], self.v[-1], self.w[-1]

    def component(self, name):
        return {"u": self.u, "v": self.v, "w": self.w}[name]

    def scaled(self, factor):
        return Trajectory(self.domain, self.times, factor * self.u, factor * self.v, factor * self.w)


@dataclass
class MeasurementRecord:
    """Boundary traces over time plus the final-time fields."""

    times: np.ndarray
    boundary_u: np.ndarray     # (n_times, n_boundary_nodes)
    boundary_v: np.ndarray
    boundary_w: np.ndarray
    final_u: np.ndarray
    final_v: np.ndarray
    final_w: np.ndarray
    boundary_flat_indices: np.ndarray

    def component_traces(self):
        return {"u": self.boundary_u, "v": self.boundary_v, "w": self.boundary_w}

    def component_finals(self):
        return {"u": self.final_u, "v": self.final_v, "w": self.final_w}


# ---------------------------------------------------------------------------
# steady states and elliptic solves


def steady_state(p: ParameterSet, trivial: bool = False, domain: Domain | None = None) -> EquilibriumState:
    """Constant solution: u0 = r/mu, v0 = alpha*u0/beta, w0 = gamma*u0/delta.

    With ``trivial=True`` (or r = 0) the zero branch is returned.  Spatially
    varying alpha or gamma admit no constant chemical balance and are rejected.
    """
    p.validate(domain)
    if trivial or p.r == 0:
        return EquilibriumState(0.0, 0.0, 0.0)
    for name in ("alpha", "gamma"):
        val = getattr(p, name)
        if isinstance(val, (np.ndarray, SeparableField)):
            raise ValueError(
                f"spatially varying {name} has no constant steady state; request the trivial branch")
    u0 = p.r / p.mu
    return EquilibriumState(u0, float(p.alpha) * u0 / p.beta, float(p.gamma) * u0 / p.delta)


def elliptic_solve(domain: Domain, source, decay, tol=1e-10):
    """Solve (-Lap + decay) v = source with Neumann walls (CG, spectral preconditioner)."""
    if decay <= 0:
        raise NumericsError(
            f"elliptic decay must be strictly positive (got {decay}); the screened "
            "operator would not be positive definite")
    return g.helmholtz_solve(domain, source, decay, tol=tol)


def _slave_chemical(domain, kin, which, u, cfg, previous=None):
    """Solve 0 = Lap v + G(x, u, v) for the chemical field (Picard if nonlinear in v)."""
    eq = kin.expansion_point
    if which == "g":
        decay, base, table = kin.beta_decay, eq.v0, kin.g_coeffs
        evaluate = kin.evaluate_g
    else:
        decay, base, table = kin.delta_decay, eq.w0, kin.h_coeffs
        evaluate = kin.evaluate_h
    nonlinear = kin._nonlinear_in_second(table)
    guess = previous if previous is not None else domain.constant(base)
    v = guess
    for _ in range(cfg.picard_maxiter):
        rhs = evaluate(domain, u, v) + decay * (v - base)
        v_new = base + g.helmholtz_solve(domain, rhs, decay, tol=cfg.elliptic_tol)
        if not nonlinear:
            return v_new
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= cfg.picard_tol * (1.0 + float(np.max(np.abs(v)))):
            return v
    raise NumericsError("Picard iteration for the slaved chemical field did not converge")


def _check_cfl(domain, cfg, p, v, w):
    potential = p.chi * v - p.xi * w
    speed = g.max_face_speed(domain, potential)
    if speed == 0.0:
        return
    bound = cfg.cfl_safety * min(domain.spacing) / speed
    if cfg.dt > bound:
        raise CFLViolation(
            f"dt={cfg.dt:.3e} exceeds the advective stability bound {bound:.3e} "
            f"(max drift speed {speed:.3e})")


def step(domain: Domain, state, p: ParameterSet, kin: KineticsSpec, cfg: SolverConfig):
    """One IMEX Euler step; returns the new (u, v, w) triple.

    The supplied (v, w) must already be consistent with u (slaved for tau=0).
    """
    u, v, w = state
    _check_cfl(domain, cfg, p, v, w)
    dt = cfg.dt
    potential = p.chi * v - p.xi * w
    advect = g.advective_flux_div(domain, u, potential) if (p.chi or p.xi) else 0.0
    reaction = p.r * u - p.mu * u * u
    rhs = u + dt * (reaction - advect)
    u_new = g.spectral_helmholtz(domain, rhs / dt, 1.0 / dt)
    if cfg.require_nonnegative and float(np.min(u_new)) < cfg.negativity_floor:
        raise NumericsError(
            f"density dropped to {float(np.min(u_new)):.3e}, below the negativity floor; "
            "the run is unstable")
    if cfg.tau == 0:
        v_new = _slave_chemical(domain, kin, "g", u_new, cfg, previous=v)
        w_new = _slave_chemical(domain, kin, "h", u_new, cfg, previous=w)
    else:
        s = cfg.relaxation_speedup
        gv = kin.evaluate_g(domain, u, v)
        gw = kin.evaluate_h(domain, u, w)
        v_new = g.spectral_helmholtz(domain, (v + s * dt * gv) / (s * dt), 1.0 / (s * dt))
        w_new = g.spectral_helmholtz(domain, (w + s * dt * gw) / (s * dt), 1.0 / (s * dt))
    return u_new, v_new, w_new


def solve_forward(domain: Domain, init, p: ParameterSet, kin: KineticsSpec,
                  cfg: SolverConfig) -> Trajectory:
    """Integrate the coupled system from initial data (f, g, h).

    For tau = 0 the chemical fields are slaved from the start: g and h are
    accepted but replaced by the elliptic balance of f.
    """
    cfg.validate()
    p.validate(domain)
    kin.validate(domain)
    f0, g0, h0 = (domain.check_field(np.asarray(a, dtype=float), n)
                  for a, n in zip(init, ("f", "g", "h")))
    if cfg.require_nonnegative:
        for arr, name in ((f0, "f"), (g0, "g"), (h0, "h")):
            if float(np.min(arr)) < 0:
                raise ValueError(f"initial data {name} must be non-negative")
    u = f0.copy()
    if cfg.tau == 0:
        v = _slave_chemical(domain, kin, "g", u, cfg)
        w = _slave_chemical(domain, kin, "h", u, cfg)
    else:
        v, w = g0.copy(), h0.copy()

    n_steps = cfg.n_steps
    stored_idx = list(range(0, n_steps + 1, cfg.store_every))
    if stored_idx[-1] != n_steps:
        stored_idx.append(n_steps)
    times = np.array([i * cfg.dt for i in stored_idx])
    shape = (len(stored_idx),) + domain.shape
    us, vs, ws = np.empty(shape), np.empty(shape), np.empty(shape)
    slot = 0
    if stored_idx[0] == 0:
        us[0], vs[0], ws[0] = u, v, w
        slot = 1
    for n in range(1, n_steps + 1):
        u, v, w = step(domain, (u, v, w), p, kin, cfg)
        if slot < len(stored_idx) and stored_idx[slot] == n:
            us[slot], vs[slot], ws[slot] = u, v, w
            slot += 1
    return Trajectory(domain, times, us, vs, ws)


def measure(traj: Trajectory) -> MeasurementRecord:
    """Boundary traces at every stored time plus the three final-time fields."""
    if len(traj) == 0:
        raise ValueError("cannot measure an empty trajectory")
    idx = traj.domain.boundary_indices()
    m = len(traj.times)
    flat = lambda arr: arr.reshape(m, -1)[:, idx]
    return MeasurementRecord(
        times=traj.times.copy(),
        boundary_u=flat(traj.u),
        boundary_v=flat(traj.v),
        boundary_w=flat(traj.w),
        final_u=traj.u[-1].copy(),
        final_v=traj.v[-1].copy(),
        final_w=traj.w[-1].copy(),
        boundary_flat_indices=idx,
    )
