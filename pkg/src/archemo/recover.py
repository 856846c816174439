"""Constructive parameter identification from measurement-map queries.

The pipeline interrogates a forward model (the "oracle") exclusively through
probing initial data, extracts first- and second-order variations of the
solution map by one-sided finite differences, and inverts the same linear
identities that underpin the uniqueness theory, stage by stage:

1. growth rate r from modal decay rates of the first variation;
2. linear kinetic coefficients (alpha, beta) and (gamma, delta) from modal
   balances of the chemical equations, then pointwise in space for
   coefficients that vary transversally;
3. chemotactic sensitivities chi, xi and the competition strength mu from a
   pointwise space-time least squares on the second-variation residual of
   the density equation, cross-checked against the parabolic probe-weighted
   identities;
4. second-order kinetic coefficients from the chemical second-variation
   residual, with declared-separable entries factorized through the moment
   machinery.

Every estimator inverts the discrete-in-time relations the solver actually
satisfies (growth factors per step rather than continuum exponents), so the
stages are exact on noiseless data up to the finite-difference extraction
error of order eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grid as g
from . import probes as pr
from .errors import RecoveryError
from .forward import (
    EquilibriumState,
    KineticsSpec,
    ParameterSet,
    SolverConfig,
    coefficient_on_grid,
    measure,
    solve_forward,
)
from .grid import Domain
from .variation import ForwardHandle, PerturbationFamily, extract_variation_fd

__all__ = [
    "Oracle",
    "PipelineOptions",
    "Experiment",
    "ExperimentBank",
    "axial_mode_profile",
    "recover_r",
    "recover_linear_kinetics",
    "recover_chi_xi_mu",
    "recover_second_kinetics",
    "run_full_pipeline",
    "RecoveryReport",
    "StageRecord",
    "SeparableEstimate",
    "fit_exponential_rate",
    "rate_to_growth",
    "linear_pair_from_ratios",
]


# ---------------------------------------------------------------------------
# the oracle


class Oracle:
    """Deterministic forward map (f, g, h) -> trajectory + measurement record.

    The truth parameters live in private attributes; recovery code only calls
    :meth:`query` and reads the public protocol (grid, solver config, declared
    expansion equilibrium).  Queries are cached, so repeated probing with
    identical data costs one solve.
    """

    def __init__(self, domain: Domain, params: ParameterSet, kinetics: KineticsSpec,
                 cfg: SolverConfig):
        self.domain = domain
        self.cfg = cfg
        self._params = params.validate(domain)
        self._kinetics = kinetics.validate(domain)
        self._cache = {}
        self.query_count = 0
        self.run_count = 0

    @property
    def equilibrium(self) -> EquilibriumState:
        """Known constant solution around which probing data is expanded."""
        return self._kinetics.expansion_point

    @property
    def tau(self) -> int:
        return self.cfg.tau

    def query(self, f, gg, h):
        self.query_count += 1
        key = (np.asarray(f).tobytes(), np.asarray(gg).tobytes(), np.asarray(h).tobytes())
        hit = self._cache.get(key)
        if hit is None:
            traj = solve_forward(self.domain, (f, gg, h), self._params, self._kinetics, self.cfg)
            hit = (traj, measure(traj))
            self._cache[key] = hit
            self.run_count += 1
        return hit

    def handle(self) -> ForwardHandle:
        def _run(f, gg, h):
            return self.query(f, gg, h)[0]
        return ForwardHandle(domain=self.domain, equilibrium=self.equilibrium,
                             run=_run, cfg=self.cfg)


# ---------------------------------------------------------------------------
# options and experiments


@dataclass
class PipelineOptions:
    epsilons: tuple = (1e-2, 5e-3, 2.5e-3)
    mode_indices: tuple = (1, 2)          # nonzero probing modes along the last axis
    mode_weight: float = 0.45
    probe_amplitude: float = 1.0
    chi_mode_patterns: tuple = ((1,), (2,), (1, 2))
    probe_zeta_multipliers: tuple = (0.0, 1.0, 2.0, 3.0)
    u_floor_rel: float = 1e-4
    cond_limit: float = 1e6
    cgo_check_tol: float = 0.1
    dispersion: str = "discrete"          # or "continuum" for synthetic data
    moment_J: int = 6
    lambda_reg: float = 1e-8
    moment_cap: float = 0.4
    n_moment_samples: int = 24
    second_order_entries: tuple = ("a11", "a20", "a02", "b11", "b20", "b02")
    declared_separable: dict = field(default_factory=dict)   # entry -> declared Gamma_0
    recover_fields: bool | None = None    # None: fields in 2D, constants in 1D
    assume_zero_advection: bool = False
    pattern_iterations: int = 2
    rate_fit_tol: float = 1e-2
    mode_sigma_factor: float = 3.0


@dataclass(frozen=True)
class Experiment:
    name: str
    fam: PerturbationFamily


def axial_mode_profile(domain: Domain, offset: float, pairs) -> np.ndarray:
    """offset + sum_k amp_k cos(k pi x_n / L_n), constant transversally."""
    ax, L = domain.axes[-1], domain.lengths[-1]
    prof = np.full(domain.cells[-1], float(offset))
    for k, amp in pairs:
        prof = prof + amp * np.cos(k * math.pi * ax / L)
    if domain.dim == 1:
        return prof
    return np.broadcast_to(prof[None, :], domain.shape).copy()


def _axial_mode(domain: Domain, k: int) -> pr.EigenMode:
    index = (0,) * (domain.dim - 1) + (int(k),)
    return pr.neumann_eigenmode(domain, index)


class ExperimentBank:
    """Caches finite-difference variation stacks per probing experiment."""

    def __init__(self, oracle: Oracle, options: PipelineOptions):
        self.oracle = oracle
        self.options = options
        self._stacks = {}
        self.used = []

    def stack(self, exp: Experiment, order: int = 1):
        key = (exp.name, order)
        if key not in self._stacks:
            stack = extract_variation_fd(self.oracle.handle(), exp.fam, order=order)
            self._stacks[key] = stack
            if exp.name not in self.used:
                self.used.append(exp.name)
        return self._stacks[key]


def _default_lin_experiment(domain, options, tau) -> dict:
    amp, wgt = options.probe_amplitude, options.mode_weight
    pairs = [(k, wgt) for k in options.mode_indices]
    prof = amp * axial_mode_profile(domain, 1.0, pairs)
    eps = options.epsilons
    exps = {"lin": Experiment("lin", PerturbationFamily(f1=prof, epsilons=eps))}
    if tau == 1:
        # chemical decay rates need a source-free probe (no density variation)
        exps["chem"] = Experiment("chem", PerturbationFamily(g1=prof, h1=prof, epsilons=eps))
    return exps


def _default_chi_experiments(domain, options, tau=0) -> list:
    amp = options.probe_amplitude
    exps = []
    for i, pattern in enumerate(options.chi_mode_patterns):
        weight = 0.9 / len(pattern)
        prof = amp * axial_mode_profile(domain, 1.0, [(k, weight) for k in pattern])
        g1 = h1 = None
        if tau == 1:
            # independent chemical initial data decouples the attractant from the
            # repellent channel even when their balance laws coincide; without it
            # only chi - xi would be identifiable
            kg = pattern[0]
            chem = amp * axial_mode_profile(domain, 1.0, [(kg, 0.9)])
            if i % 2 == 0:
                g1 = chem
            else:
                h1 = chem
        exps.append(Experiment(f"second-{i}",
                               PerturbationFamily(f1=prof, g1=g1, h1=h1,
                                                  epsilons=options.epsilons)))
    return exps


# ---------------------------------------------------------------------------
# shared estimator pieces


def fit_exponential_rate(times, amps, fit_tol=1e-2, rel_floor=1e-6):
    """Slope of log |amplitude| against time; returns (theta, sigma, rms_residual).

    Samples are trimmed to the initial window where the amplitude stays above
    rel_floor times its maximum; below that the extraction noise dominates
    and the history is no longer informative about the rate.
    """
    times = np.asarray(times, dtype=float)
    amps = np.asarray(amps, dtype=float)
    floor = rel_floor * float(np.max(np.abs(amps)))
    keep = len(amps)
    for i, a in enumerate(np.abs(amps) < floor):
        if a:
            keep = i
            break
    if keep < 5:
        raise RecoveryError("modal amplitude decays below the noise floor almost immediately")
    times, amps = times[:keep], amps[:keep]
    if np.any(amps == 0) or (np.min(amps) < 0 < np.max(amps)):
        raise RecoveryError("modal amplitude changes sign or vanishes; decay is not exponential")
    y = np.log(np.abs(amps))
    A = np.vstack([times, np.ones_like(times)]).T
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    fitted = A @ coef
    resid = y - fitted
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if rms > fit_tol:
        raise RecoveryError(
            f"modal history is not exponential (log-fit rms {rms:.3e} > {fit_tol:.1e}); "
            "model mismatch")
    n = len(times)
    denom = float(np.sum((times - times.mean()) ** 2))
    sigma = math.sqrt(max(np.sum(resid ** 2), 1e-300) / max(n - 2, 1) / denom) if denom > 0 else 0.0
    return float(coef[0]), sigma, rms


def rate_to_growth(theta_hat, lam, lam_h, dt, dispersion):
    """Invert a fitted modal rate for r, matching the data's time discretization.

    discrete:  growth factor per step (1 + dt r)/(1 + dt lam_h)
    continuum: theta = r - lam
    """
    if dispersion == "continuum":
        return theta_hat + lam
    growth = math.exp(theta_hat * dt)
    return (growth * (1.0 + dt * lam_h) - 1.0) / dt


def _chem_rate_to_decay(theta_hat, lam_h, dt, s, dispersion, lam):
    """Decay rate of a source-free chemical mode, per the tau=1 stepping."""
    if dispersion == "continuum":
        return -(theta_hat + lam)
    growth = math.exp(theta_hat * dt)
    return (1.0 - growth * (1.0 + s * dt * lam_h)) / (s * dt)


def linear_pair_from_ratios(rhos, lams):
    """Solve abar - rho_k * beta = rho_k * lam_k in the least-squares sense."""
    rhos = np.asarray(rhos, dtype=float)
    lams = np.asarray(lams, dtype=float)
    A = np.vstack([np.ones_like(rhos), -rhos]).T
    b = rhos * lams
    sol, _, _, sv = np.linalg.lstsq(A, b, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    abar, beta = float(sol[0]), float(sol[1])
    resid = float(np.max(np.abs(A @ sol - b)))
    return abar, beta, cond, resid


def _time_weights(times):
    times = np.asarray(times, dtype=float)
    wt = np.empty(len(times))
    if len(times) == 1:
        wt[0] = 1.0
        return wt
    dt = np.diff(times)
    wt[0] = dt[0] / 2
    wt[-1] = dt[-1] / 2
    wt[1:-1] = (dt[:-1] + dt[1:]) / 2
    return wt


def _modal_ratio(domain, numer_traj, denom_traj, mode, wt):
    vn = pr.modal_amplitude(domain, numer_traj, mode)
    un = pr.modal_amplitude(domain, denom_traj, mode)
    denom = float(np.sum(wt * un * un))
    if denom <= 0:
        raise RecoveryError("probe too weak: modal content absent from the first variation")
    return float(np.sum(wt * vn * un)) / denom


def _time_regressed_field(domain, numer, denom, wt, floor):
    """Pointwise least-squares ratio sum wt*numer*denom / sum wt*denom^2 with masking."""
    mask = np.abs(denom) >= floor
    if not np.any(mask):
        raise RecoveryError("probe too weak: first variation below the masking floor everywhere")
    wts = wt.reshape((-1,) + (1,) * (denom.ndim - 1)) * mask
    den = np.sum(wts * denom * denom, axis=0)
    num = np.sum(wts * numer * denom, axis=0)
    ok = den > 0
    if not np.all(ok):
        raise RecoveryError("probe too weak: some nodes receive no usable samples")
    return num / den


def _project_axial_independent(domain, fld):
    """Average along the last axis (the declared independent coordinate)."""
    if domain.dim == 1:
        return fld
    w = np.full(domain.cells[-1], domain.spacing[-1])
    w[0] = w[-1] = 0.5 * domain.spacing[-1]
    w = w / w.sum()
    proj = fld @ w
    return np.broadcast_to(proj[:, None], domain.shape).copy()


# ---------------------------------------------------------------------------
# stage 1: growth rate


@dataclass
class StageRecord:
    name: str
    status: str = "ok"
    reason: str = ""
    estimates: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    conditioning: dict = field(default_factory=dict)
    experiments: list = field(default_factory=list)
    details: dict = field(default_factory=dict)


def recover_r(oracle: Oracle, modes=None, options: PipelineOptions | None = None,
              bank: ExperimentBank | None = None) -> StageRecord:
    """Growth rate from modal decay of the first variation, plus a probe check."""
    options = options or PipelineOptions()
    modes = tuple(modes) if modes is not None else options.mode_indices
    lam_values = {_axial_mode(oracle.domain, k).lam for k in modes}
    if len(lam_values) < min(len(modes), 2):
        raise RecoveryError("probing modes must have distinct eigenvalues")
    bank = bank or ExperimentBank(oracle, options)
    exps = _default_lin_experiment(oracle.domain, options, oracle.tau)
    stack = bank.stack(exps["lin"], order=1)
    domain, dt = oracle.domain, oracle.cfg.dt
    u1 = stack.order1.u
    times = stack.order1.times

    fd_floor = max(stack.diagnostics.get("order1_corrections", [0.0])[-1], 1e-14)
    scale = float(np.max(np.abs(u1))) or 1.0
    estimates, sigmas, details = [], [], {}
    for k in (0,) + modes:
        mode = _axial_mode(domain, k)
        amps = pr.modal_amplitude(domain, u1, mode)
        theta, sigma, rms = fit_exponential_rate(times, amps, options.rate_fit_tol)
        r_k = rate_to_growth(theta, mode.lam, mode.lam_h, dt, options.dispersion)
        estimates.append(r_k)
        sigmas.append(max(sigma, fd_floor / scale, 1e-10))
        details[f"theta_{k}"] = theta
        details[f"r_from_mode_{k}"] = r_k
    r_hat = float(np.mean(estimates))
    for r_k, sig in zip(estimates, sigmas):
        if abs(r_k - r_hat) > options.mode_sigma_factor * max(sig, 1e-8) + 1e-9:
            raise RecoveryError(
                f"r estimates disagree across modes beyond {options.mode_sigma_factor} sigma: "
                f"{estimates}")

    cgo_rel = _cgo_rate_check(domain, times, u1, r_hat)
    if cgo_rel > options.cgo_check_tol:
        raise RecoveryError(
            f"probe-integral cross-check failed: relative residual {cgo_rel:.3e} "
            f"with the estimated growth rate")
    return StageRecord(
        name="r",
        estimates={"r": r_hat},
        residuals={"mode_spread": float(np.max(estimates) - np.min(estimates)),
                   "cgo_residual": cgo_rel},
        conditioning={},
        experiments=[exps["lin"].name],
        details=details,
    )


def _cgo_rate_check(domain, times, u1, r_hat, zeta_amp=None):
    """Relative residual of the probe-weighted balance at the estimated rate."""
    if zeta_amp is None:
        zeta_amp = math.pi / domain.lengths[-1]
    zeta = np.zeros(domain.dim)
    zeta[-1] = zeta_amp
    probe = pr.cgo_parabolic(zeta, r_hat)
    omega = probe.sample(domain, times)
    wt = _time_weights(times)
    endpoint = (np.sum(domain.weights * u1[-1] * omega[-1])
                - np.sum(domain.weights * u1[0] * omega[0]))
    dnu_w = probe.weighted_normal_derivative(domain)
    tfac = np.exp(probe.time_exponent * times)
    per_time = (u1 * dnu_w).reshape(len(times), -1).sum(axis=1) * tfac
    boundary = np.sum(wt * per_time)
    residual = endpoint + boundary
    scale = abs(pr.weighted_integral(domain, times, np.abs(u1), probe)) + 1e-300
    return abs(residual) / scale


# ---------------------------------------------------------------------------
# stage 2: linear kinetics


def recover_linear_kinetics(oracle: Oracle, r: float, options: PipelineOptions | None = None,
                            bank: ExperimentBank | None = None,
                            experiments: dict | None = None) -> StageRecord:
    """(alpha, beta) and (gamma, delta) from chemical balances of the first variation."""
    options = options or PipelineOptions()
    bank = bank or ExperimentBank(oracle, options)
    exps = experiments or _default_lin_experiment(oracle.domain, options, oracle.tau)
    domain = oracle.domain
    want_fields = options.recover_fields if options.recover_fields is not None else domain.dim > 1

    if oracle.tau == 0:
        rec = _linear_kinetics_tau0(oracle, bank, exps, options, want_fields)
    else:
        rec = _linear_kinetics_tau1(oracle, bank, exps, options, want_fields)
    rec.experiments = [e.name for e in exps.values()]
    return rec


def _mask_floor(options, u1):
    return options.u_floor_rel * (float(np.max(np.abs(u1))) or 1.0)


def _linear_kinetics_tau0(oracle, bank, exps, options, want_fields):
    domain = oracle.domain
    stack = bank.stack(exps["lin"], order=1)
    o1 = stack.order1
    wt = _time_weights(o1.times)
    use_disc = options.dispersion == "discrete"

    estimates, residuals, conditioning, details = {}, {}, {}, {}
    for comp, names in (("v", ("alpha", "beta")), ("w", ("gamma", "delta"))):
        chem = o1.component(comp)
        rhos, lams = [], []
        for k in (0,) + tuple(options.mode_indices):
            mode = _axial_mode(domain, k)
            rhos.append(_modal_ratio(domain, chem, o1.u, mode, wt))
            lams.append(mode.lam_h if use_disc else mode.lam)
        abar, decay, cond, resid = linear_pair_from_ratios(rhos, lams)
        if decay <= 0:
            raise RecoveryError(
                f"recovered decay for {names[1]} is {decay:.3e}; violates the positivity convention")
        conditioning[names[0]] = cond
        residuals[names[0]] = resid
        details[f"rhos_{comp}"] = rhos
        if want_fields:
            lap_stack = np.stack([g.laplacian_neumann(domain, chem[n]) for n in range(len(o1.times))])
            numer = -lap_stack + decay * chem
            fld = _time_regressed_field(domain, numer, o1.u, wt, _mask_floor(options, o1.u))
            proj = _project_axial_independent(domain, fld)
            misfit = g.norm_l2(domain, fld - proj) / (g.norm_l2(domain, fld) or 1.0)
            residuals[f"{names[0]}_projection_misfit"] = misfit
            estimates[names[0]] = proj
        else:
            estimates[names[0]] = abar
        estimates[names[1]] = decay
    return StageRecord(name="linear_kinetics", estimates=estimates, residuals=residuals,
                       conditioning=conditioning, details=details)


def _linear_kinetics_tau1(oracle, bank, exps, options, want_fields):
    domain, cfg = oracle.domain, oracle.cfg
    dt, s = cfg.dt, cfg.relaxation_speedup
    _require_stride_one(oracle, "tau=1 linear-kinetics recovery")
    use_cont = options.dispersion == "continuum"

    # decay rates from the source-free chemical probe (f1 = 0)
    chem_stack = bank.stack(exps["chem"], order=1).order1
    estimates, residuals, conditioning, details = {}, {}, {}, {}
    for comp, name in (("v", "beta"), ("w", "delta")):
        fieldstack = chem_stack.component(comp)
        vals = []
        for k in (0,) + tuple(options.mode_indices):
            mode = _axial_mode(domain, k)
            amps = pr.modal_amplitude(domain, fieldstack, mode)
            theta, _, _ = fit_exponential_rate(chem_stack.times, amps, options.rate_fit_tol)
            vals.append(_chem_rate_to_decay(theta, mode.lam_h, dt, s,
                                            "continuum" if use_cont else "discrete", mode.lam))
        decay = float(np.mean(vals))
        if decay <= 0:
            raise RecoveryError(f"recovered decay {name} is {decay:.3e}; violates positivity")
        estimates[name] = decay
        residuals[name] = float(np.max(vals) - np.min(vals))
        details[f"decay_modes_{comp}"] = vals

    # sources from the density probe (g1 = h1 = 0)
    lin = bank.stack(exps["lin"], order=1).order1
    wt = _time_weights(lin.times[:-1])
    for comp, src_name, decay_name in (("v", "alpha", "beta"), ("w", "gamma", "delta")):
        chem = lin.component(comp)
        decay = estimates[decay_name]
        # invert the stepping relation: a*u1[n] = ((I - s dt Lap) chem[n+1] - chem[n])/(s dt) + decay*chem[n]
        lap_next = np.stack([g.laplacian_neumann(domain, chem[n + 1])
                             for n in range(len(lin.times) - 1)])
        numer = (chem[1:] - s * dt * lap_next - chem[:-1]) / (s * dt) + decay * chem[:-1]
        fld = _time_regressed_field(domain, numer, lin.u[:-1], wt, _mask_floor(options, lin.u))
        if want_fields:
            proj = _project_axial_independent(domain, fld)
            misfit = g.norm_l2(domain, fld - proj) / (g.norm_l2(domain, fld) or 1.0)
            residuals[f"{src_name}_projection_misfit"] = misfit
            estimates[src_name] = proj
        else:
            w = domain.weights / domain.weights.sum()
            estimates[src_name] = float(np.sum(w * fld))
            residuals[f"{src_name}_spatial_spread"] = float(np.max(fld) - np.min(fld))
    return StageRecord(name="linear_kinetics", estimates=estimates, residuals=residuals,
                       conditioning=conditioning, details=details)


# ---------------------------------------------------------------------------
# stage 3: chi, xi, mu


def _require_stride_one(oracle, what):
    """Inversions of the stepping relation need consecutive stored slices."""
    if oracle.cfg.store_every != 1:
        raise RecoveryError(
            f"{what} inverts per-step relations and requires stride-1 trajectory "
            f"storage (solver.store_every = 1), got {oracle.cfg.store_every}")


def _second_variation_residual(domain, dt, r_hat, u2):
    """Source series S[n] recovered from the density second-variation steps."""
    lap_next = np.stack([g.laplacian_neumann(domain, u2[n + 1]) for n in range(u2.shape[0] - 1)])
    return (u2[1:] - dt * lap_next - u2[:-1]) / dt - r_hat * u2[:-1]


def recover_chi_xi_mu(oracle: Oracle, r: float, linear: StageRecord,
                      options: PipelineOptions | None = None,
                      bank: ExperimentBank | None = None,
                      experiments: list | None = None) -> StageRecord:
    """Least-squares identification of (chi, xi, mu) from the density residual.

    The second-variation residual of the density equation is affine in the
    three unknowns with regressors built from the first variation.  The fit
    is a pointwise space-time weighted least squares (every node is a row);
    the parabolic probe-weighted identities are evaluated afterwards as a
    cross-check and reported, since compressing the system onto probe rows
    alone destroys the chi/xi separation.  Near-collinear regressors (which
    occur when the truth makes v and w indistinguishable) are reported
    through the condition number and resolved by a minimum-norm solve; the
    identifiable combination chi - xi is always reported alongside.
    """
    options = options or PipelineOptions()
    bank = bank or ExperimentBank(oracle, options)
    exps = experiments or _default_chi_experiments(oracle.domain, options, oracle.tau)
    domain, cfg = oracle.domain, oracle.cfg
    dt = cfg.dt
    _require_stride_one(oracle, "chi/xi/mu recovery")

    data = []
    for exp in exps:
        stack = bank.stack(exp, order=2)
        o1, o2 = stack.order1, stack.order2
        resid = _second_variation_residual(domain, dt, r, o2.u)
        data.append((exp, o1, resid))

    def regressor_slices(o1, n, chi_xi_guess):
        if chi_xi_guess is None:
            s_chi = -2.0 * g.advective_flux_div(domain, o1.u[n], o1.v[n])
            s_xi = 2.0 * g.advective_flux_div(domain, o1.u[n], o1.w[n])
        else:
            chi_g, xi_g = chi_xi_guess
            pat = g.upwind_patterns(domain, chi_g * o1.v[n] - xi_g * o1.w[n])
            s_chi = -2.0 * g.advective_flux_div_patterned(domain, o1.u[n], o1.v[n], pat)
            s_xi = 2.0 * g.advective_flux_div_patterned(domain, o1.u[n], o1.w[n], pat)
        s_mu = -2.0 * o1.u[n] ** 2
        return s_chi, s_xi, s_mu

    zetas = []
    for mult in options.probe_zeta_multipliers:
        z = np.zeros(domain.dim)
        z[-1] = mult * math.pi / domain.lengths[-1]
        zetas.append(z)

    def probe_identity_residuals(sol, chi_xi_guess):
        # relative size of the probe-weighted identity after the fit, per probe;
        # the constructive analogue of the vanishing integrals certified by uniqueness
        worst = 0.0
        for exp, o1, resid in data:
            n_res = resid.shape[0]
            times = o1.times[:n_res]
            for zeta in zetas:
                probe = pr.cgo_parabolic(zeta, r)
                omega = probe.sample(domain, times)
                num = 0.0 + 0.0j
                den = 0.0
                for n in range(n_res):
                    s_chi, s_xi, s_mu = regressor_slices(o1, n, chi_xi_guess)
                    gap = resid[n] - sol[0] * s_chi - sol[1] * s_xi - sol[2] * s_mu
                    num += np.sum(domain.weights * gap * omega[n]) * dt
                    den += float(np.sum(domain.weights * np.abs(resid[n]) * np.abs(omega[n]))) * dt
                worst = max(worst, abs(num) / (den or 1.0))
        return worst

    if options.assume_zero_advection:
        # single-unknown reduction: mu from the probe-weighted identity alone
        num, den = 0.0, 0.0
        for exp, o1, resid in data:
            n_res = resid.shape[0]
            times = o1.times[:n_res]
            for zeta in zetas:
                probe = pr.cgo_parabolic(zeta, r)
                omega = probe.sample(domain, times)
                s_mu = -2.0 * o1.u[:n_res] ** 2
                a = complex(np.sum((s_mu * omega * domain.weights).reshape(n_res, -1).sum(axis=1)) * dt)
                b = complex(np.sum((resid * omega * domain.weights).reshape(n_res, -1).sum(axis=1)) * dt)
                num += (a.conjugate() * b).real
                den += abs(a) ** 2
        mu_hat = num / den
        return StageRecord(name="chi_xi_mu",
                           estimates={"chi": 0.0, "xi": 0.0, "mu": mu_hat, "chi_minus_xi": 0.0},
                           residuals={"fit": 0.0},
                           conditioning={"system": 1.0},
                           experiments=[e.name for e in exps])

    # pointwise space-time least squares: every node contributes a weighted row.
    # Probe-compressed rows provably lose the chi/xi separation (the probe time
    # profiles drown the brief window where the mode mixture distinguishes the
    # two advective channels), so the probes serve as an identity check instead.
    guess = None
    sol = np.zeros(3)
    cond_lsq = np.inf
    resid_rel = np.inf
    degenerate = False
    for _ in range(max(options.pattern_iterations, 1)):
        degenerate = False
        N = np.zeros((3, 3))
        rv = np.zeros(3)
        btb = 0.0
        for exp, o1, resid in data:
            n_res = resid.shape[0]
            for n in range(n_res):
                s_chi, s_xi, s_mu = regressor_slices(o1, n, guess)
                R = np.stack([s_chi.ravel(), s_xi.ravel(), s_mu.ravel()])
                Rw = R * (domain.weights.ravel() * dt)
                N += Rw @ R.T
                rv += Rw @ resid[n].ravel()
                btb += float(np.sum(domain.weights * resid[n] ** 2)) * dt
        scale = np.sqrt(np.diag(N))
        scale[scale == 0] = 1.0
        Ns = N / scale[:, None] / scale[None, :]
        eigvals = np.linalg.eigvalsh(Ns)
        cond_lsq = math.sqrt(abs(eigvals[-1] / eigvals[0])) if eigvals[0] > 0 else np.inf
        if cond_lsq > options.cond_limit:
            degenerate = True
            sol = (np.linalg.pinv(Ns, rcond=1e-12) @ (rv / scale)) / scale
        else:
            sol = np.linalg.solve(Ns, rv / scale) / scale
        fit_ss = max(btb - 2 * sol @ rv + sol @ N @ sol, 0.0)
        resid_rel = math.sqrt(fit_ss / btb) if btb > 0 else 0.0
        guess = (float(sol[0]), float(sol[1]))
    chi_hat, xi_hat, mu_hat = map(float, sol)
    probe_resid = probe_identity_residuals(sol, guess)

    status, reason = "ok", ""
    if degenerate:
        status = "degenerate"
        reason = ("regressors for chi and xi are (nearly) linearly dependent; only the "
                  "combination chi - xi is identifiable from this oracle. Reported point "
                  "is the minimum-norm solution.")
    return StageRecord(
        name="chi_xi_mu",
        status=status,
        reason=reason,
        estimates={"chi": chi_hat, "xi": xi_hat, "mu": mu_hat,
                   "chi_minus_xi": chi_hat - xi_hat},
        residuals={"fit": resid_rel, "probe_identity": probe_resid},
        conditioning={"system": cond_lsq},
        experiments=[e.name for e in exps],
    )


# ---------------------------------------------------------------------------
# stage 4: second-order kinetic coefficients


@dataclass
class SeparableEstimate:
    transverse: np.ndarray
    axial: np.ndarray
    misfit: float
    gamma0: float

    def on_grid(self, domain):
        return np.multiply.outer(self.transverse, self.axial)


def _normal_contribution(domain, regs, rhs, wt):
    """Normal-equation pieces (N, r, btb, n_samples) for one experiment."""
    shape = domain.shape
    N = np.zeros((3, 3) + shape)
    rvec = np.zeros((3,) + shape)
    wts = wt.reshape((-1,) + (1,) * len(shape))
    for i in range(3):
        rvec[i] = np.sum(wts * regs[i] * rhs, axis=0)
        for j in range(i, 3):
            N[i, j] = np.sum(wts * regs[i] * regs[j], axis=0)
    for i in range(3):
        for j in range(i):
            N[i, j] = N[j, i]
    btb = np.sum(wts * rhs * rhs, axis=0)
    return N, rvec, btb, rhs.shape[0]


def _solve_normal(domain, N, rvec):
    shape = domain.shape
    Nn = np.moveaxis(N.reshape(3, 3, -1), -1, 0)
    rn = np.moveaxis(rvec.reshape(3, -1), -1, 0)
    ridge = 1e-12 * np.trace(Nn, axis1=1, axis2=2)[:, None, None] + 1e-300
    Nreg = Nn + ridge * np.eye(3)[None]
    sol = np.linalg.solve(Nreg, rn[..., None])[..., 0]
    return sol, Nreg, rn


def _batched_lsq_3(domain, rows_reg, rows_rhs, wt_list):
    """Per-node normal-equation solve for three coefficients, pooled and jackknifed.

    rows_reg: list of (3, n_t, *shape) regressor stacks per experiment;
    rows_rhs: matching (n_t, *shape) residual stacks.  Returns pooled
    coefficients (3, *shape), per-node sigma (3, *shape), the relative fit
    residual, and the leave-one-experiment-out coefficient fields used for
    jackknife bias floors.
    """
    shape = domain.shape
    pieces = [_normal_contribution(domain, regs, rhs, wt)
              for regs, rhs, wt in zip(rows_reg, rows_rhs, wt_list)]
    N = sum(p[0] for p in pieces)
    rvec = sum(p[1] for p in pieces)
    btb = sum(p[2] for p in pieces)
    n_samples = sum(p[3] for p in pieces)
    sol, Nreg, rn = _solve_normal(domain, N, rvec)
    fit_ss = np.einsum("ni,nij,nj->n", sol, Nreg, sol) - 2 * np.einsum("ni,ni->n", sol, rn) + btb.ravel()
    dof = max(n_samples - 3, 1)
    sigma2 = np.maximum(fit_ss, 0.0) / dof
    inv_diag = np.diagonal(np.linalg.inv(Nreg), axis1=1, axis2=2)
    sig = np.sqrt(np.maximum(sigma2[:, None] * inv_diag, 0.0))
    coeffs = np.moveaxis(sol, 0, -1).reshape((3,) + shape)
    sigmas = np.moveaxis(sig, 0, -1).reshape((3,) + shape)
    rel_resid = float(np.sqrt(np.sum(np.maximum(fit_ss, 0)) / (np.sum(btb) + 1e-300)))
    loo = []
    if len(pieces) > 1:
        for k in range(len(pieces)):
            Nk = N - pieces[k][0]
            rk = rvec - pieces[k][1]
            sol_k, _, _ = _solve_normal(domain, Nk, rk)
            loo.append(np.moveaxis(sol_k, 0, -1).reshape((3,) + shape))
    return coeffs, sigmas, rel_resid, loo


def recover_second_kinetics(oracle: Oracle, r: float, linear: StageRecord,
                            options: PipelineOptions | None = None,
                            bank: ExperimentBank | None = None,
                            experiments: list | None = None) -> StageRecord:
    """Second-order kinetic coefficients from the chemical second-variation residual.

    The residual of the v (resp. w) equation, after removing the known linear
    part, is a pointwise linear combination of u1*v1, 2*u1^2 and 2*v1^2 with
    the sought coefficients; pooling experiments with distinct modal content
    makes the per-node time regression well posed.  Declared-separable
    entries are factorized by the moment machinery afterwards.
    """
    options = options or PipelineOptions()
    bank = bank or ExperimentBank(oracle, options)
    exps = experiments or _default_chi_experiments(oracle.domain, options, oracle.tau)
    domain, cfg = oracle.domain, oracle.cfg
    dt, s = cfg.dt, cfg.relaxation_speedup
    if oracle.tau == 1:
        _require_stride_one(oracle, "tau=1 second-order kinetics recovery")
        chem_exps = _default_lin_experiment(domain, options, oracle.tau)
        exps = list(exps) + [chem_exps["chem"]]

    alpha_grid = coefficient_on_grid(linear.estimates["alpha"], domain)
    gamma_grid = coefficient_on_grid(linear.estimates["gamma"], domain)
    beta, delta = linear.estimates["beta"], linear.estimates["delta"]

    estimates, residuals, conditioning = {}, {}, {}
    details = {}
    for comp, a10_grid, decay, labels in (
        ("v", alpha_grid, beta, ("a11", "a20", "a02")),
        ("w", gamma_grid, delta, ("b11", "b20", "b02")),
    ):
        regs_all, rhs_all, wt_all = [], [], []
        for exp in exps:
            stack = bank.stack(exp, order=2)
            o1, o2 = stack.order1, stack.order2
            chem1 = o1.component(comp)
            chem2 = o2.component(comp)
            if oracle.tau == 0:
                n_t = chem2.shape[0]
                lap2 = np.stack([g.laplacian_neumann(domain, chem2[n]) for n in range(n_t)])
                rhs = -lap2 + decay * chem2 - a10_grid * o2.u
                regs = np.stack([o1.u * chem1, 2.0 * o1.u ** 2, 2.0 * chem1 ** 2])
                wt = _time_weights(o2.times)
            else:
                n_t = chem2.shape[0] - 1
                lap_next = np.stack([g.laplacian_neumann(domain, chem2[n + 1]) for n in range(n_t)])
                rhs = ((chem2[1:] - s * dt * lap_next - chem2[:-1]) / (s * dt)
                       + decay * chem2[:-1] - a10_grid * o2.u[:-1])
                regs = np.stack([o1.u[:-1] * chem1[:-1], 2.0 * o1.u[:-1] ** 2,
                                 2.0 * chem1[:-1] ** 2])
                wt = _time_weights(o2.times[:-1])
            regs_all.append(regs)
            rhs_all.append(rhs)
            wt_all.append(wt)
        coeffs, sigmas, rel_resid, loo = _batched_lsq_3(domain, regs_all, rhs_all, wt_all)
        residuals[f"{comp}_equation_fit"] = rel_resid
        wq = domain.weights / domain.weights.sum()
        for i, label in enumerate(labels):
            fld = coeffs[i]
            # statistical floor from the fit covariance plus a jackknife bias
            # bound: systematic extraction error shows up as disagreement
            # between leave-one-experiment-out estimates
            floor = 3.0 * float(np.median(sigmas[i]))
            if loo:
                pooled_mean = float(np.sum(wq * fld))
                jack = max(abs(float(np.sum(wq * lk[i])) - pooled_mean) for lk in loo)
                floor = max(floor, (len(loo) - 1) * jack)
            residuals[f"{label}_noise_floor"] = floor
            if label in options.declared_separable:
                gamma0 = options.declared_separable[label]
                descriptors = pr.separable_probe_set(domain, options.n_moment_samples,
                                                     options.moment_cap)
                samples = pr.transform_samples(domain, fld, descriptors)
                rec = pr.moment_recover(domain, samples, J=options.moment_J, gamma0=gamma0,
                                        lambda_reg=options.lambda_reg,
                                        moment_cap=options.moment_cap)
                misfit = pr.separability_misfit(domain, fld, rec)
                if misfit > 0.10 and g.norm_l2(domain, fld) > 10 * floor:
                    raise RecoveryError(
                        f"coefficient {label} declared separable but factorization misfit "
                        f"is {misfit:.1%}")
                estimates[label] = SeparableEstimate(transverse=rec.transverse, axial=rec.axial,
                                                     misfit=misfit, gamma0=gamma0)
                conditioning[label] = rec.diagnostics["moment_fit_condition"]
            else:
                estimates[label] = float(np.sum(wq * fld))
                details[f"{label}_spatial_spread"] = float(np.max(fld) - np.min(fld))
    return StageRecord(name="second_kinetics", estimates=estimates, residuals=residuals,
                       conditioning=conditioning, experiments=[e.name for e in exps],
                       details=details)


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class RecoveryReport:
    stages: list
    estimates: dict
    residuals: dict
    conditioning: dict
    experiments_used: list
    oracle_runs: int
    notes: list = field(default_factory=list)

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def complete(self):
        return all(s.status != "failed" for s in self.stages)

    def parameter_set(self) -> ParameterSet:
        e = self.estimates
        return ParameterSet(chi=max(e.get("chi", 0.0), 0.0), xi=max(e.get("xi", 0.0), 0.0),
                            r=e["r"], mu=e["mu"], alpha=e["alpha"], beta=e["beta"],
                            gamma=e["gamma"], delta=e["delta"])


def run_full_pipeline(oracle: Oracle, options: PipelineOptions | None = None) -> RecoveryReport:
    """Execute the recovery stages in dependency order, assembling a report.

    A hard stage failure aborts the remaining stages and yields a partial
    report (the failed stage carries the reason); a degenerate stage records
    its diagnosis and the pipeline continues, since later stages do not
    depend on the degenerate directions.
    """
    options = options or PipelineOptions()
    bank = ExperimentBank(oracle, options)
    stages, estimates, residuals, conditioning, notes = [], {}, {}, {}, []

    def merge(rec):
        stages.append(rec)
        estimates.update(rec.estimates)
        residuals.update({f"{rec.name}.{k}": v for k, v in rec.residuals.items()})
        conditioning.update({f"{rec.name}.{k}": v for k, v in rec.conditioning.items()})
        if rec.status != "ok":
            notes.append(f"stage {rec.name}: {rec.status}: {rec.reason}")

    stride1 = oracle.cfg.store_every == 1
    stride_note = ("needs stride-1 trajectory storage (solver.store_every = 1); "
                   "stored slices are coarser, stage skipped")
    plan = [
        ("r", lambda: recover_r(oracle, options=options, bank=bank), True),
        ("linear_kinetics", lambda: recover_linear_kinetics(
            oracle, estimates["r"], options=options, bank=bank), True),
        ("chi_xi_mu", lambda: recover_chi_xi_mu(
            oracle, estimates["r"], stages[-1], options=options, bank=bank), stride1),
        ("second_kinetics", lambda: recover_second_kinetics(
            oracle, estimates["r"], stages[1], options=options, bank=bank),
         stride1 or oracle.tau == 0),
    ]
    for name, runner, runnable in plan:
        if not runnable:
            rec = StageRecord(name=name, status="skipped", reason=stride_note)
            stages.append(rec)
            notes.append(f"stage {name} skipped: {stride_note}")
            continue
        try:
            merge(runner())
        except RecoveryError as err:
            stages.append(StageRecord(name=name, status="failed", reason=str(err)))
            notes.append(f"stage {name} failed: {err}")
            break
    return RecoveryReport(stages=stages, estimates=estimates, residuals=residuals,
                          conditioning=conditioning, experiments_used=list(bank.used),
                          oracle_runs=oracle.run_count, notes=notes)
