import math

import numpy as np
import pytest

from archemo.errors import CFLViolation, NumericsError
from archemo.forward import (
    KineticsSpec,
    ParameterSet,
    SeparableField,
    SolverConfig,
    elliptic_solve,
    measure,
    solve_forward,
    steady_state,
    step,
)
from archemo.grid import Domain, laplacian_neumann, quadrature
from archemo.variation import PerturbationFamily, solve_first_variation

from conftest import make_kinetics


# -- steady states -----------------------------------------------------------

def test_steady_state_algebra():
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1.0, alpha=1.0, beta=1.0, gamma=1.0, delta=1.0)
    assert steady_state(p) == (0.5, 0.5, 0.5)
    p0 = ParameterSet(chi=0.0, xi=0.0, r=0.0, mu=1.0)
    assert steady_state(p0) == (0.0, 0.0, 0.0)
    p2 = ParameterSet(chi=0.0, xi=0.0, r=1.0, mu=2.0, alpha=3.0, beta=1.5, gamma=1.0, delta=4.0)
    u0, v0, w0 = steady_state(p2)
    assert (u0, v0, w0) == pytest.approx((0.5, 1.0, 0.125))


def test_steady_state_rejects_spatial_alpha():
    d = Domain(1.0, 33)
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1.0,
                     alpha=1.0 + 0.3 * np.cos(np.pi * d.axes[0]))
    with pytest.raises(ValueError):
        steady_state(p, domain=d)
    assert steady_state(p, trivial=True, domain=d) == (0.0, 0.0, 0.0)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ParameterSet(chi=0.1, xi=0.0, r=0.5, mu=0.0).validate()
    with pytest.raises(ValueError):
        ParameterSet(chi=0.1, xi=0.0, r=0.5, mu=1.0, beta=-1.0).validate()
    with pytest.raises(ValueError):
        ParameterSet(chi=-0.1, xi=0.0, r=0.5, mu=1.0).validate()


def test_kinetics_validation(square33):
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1.0)
    kin = make_kinetics(p)
    kin.validate(square33)
    # (0,1) must be a negative constant
    bad = KineticsSpec(g_coeffs={(1, 0): 1.0, (0, 1): 0.5},
                       h_coeffs={(1, 0): 1.0, (0, 1): -1.0})
    with pytest.raises(ValueError):
        bad.validate()
    # (1,0) must not vary along the last coordinate
    X, Y = square33.meshgrid()
    bad2 = KineticsSpec(g_coeffs={(1, 0): 1.0 + 0.1 * Y, (0, 1): -1.0},
                        h_coeffs={(1, 0): 1.0, (0, 1): -1.0})
    with pytest.raises(ValueError):
        bad2.validate(square33)
    # order-2 entries must be constants or separable
    bad3 = KineticsSpec(g_coeffs={(1, 0): 1.0, (0, 1): -1.0, (2, 0): X},
                        h_coeffs={(1, 0): 1.0, (0, 1): -1.0})
    with pytest.raises(ValueError):
        bad3.validate(square33)


def test_separable_field_requires_nonzero_axial(square33):
    axial = np.cos(math.pi * square33.axes[1])       # integrates to zero
    sf = SeparableField(transverse=np.ones(33), axial=axial)
    with pytest.raises(ValueError):
        sf.validate(square33)


# -- elliptic solve -----------------------------------------------------------

def test_elliptic_solve_examples(line65, rng):
    c = elliptic_solve(line65, line65.constant(1.5 * 4.0), decay=1.5)
    assert np.max(np.abs(c - 4.0)) < 1e-9
    beta = 1.5
    f = np.cos(math.pi * line65.axes[0])
    sol = elliptic_solve(line65, (math.pi ** 2 + beta) * f, decay=beta)
    assert np.max(np.abs(sol - f)) < 5 * line65.spacing[0] ** 2 * math.pi ** 2
    src = rng.standard_normal(line65.shape)
    v = elliptic_solve(line65, src, decay=1.0)
    resid = -laplacian_neumann(line65, v) + v - src
    assert np.linalg.norm(resid) <= 1e-9 * np.linalg.norm(src)


def test_elliptic_solve_rejects_nonpositive_decay(line65):
    with pytest.raises(NumericsError):
        elliptic_solve(line65, line65.constant(1.0), decay=-0.5)


# -- stepping ------------------------------------------------------------------

def test_step_fixed_point(line65, applied_params):
    eq = steady_state(applied_params)
    kin = make_kinetics(applied_params, expansion_point=eq)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=1.0)
    state = (line65.constant(eq.u0), line65.constant(eq.v0), line65.constant(eq.w0))
    for _ in range(100):
        new = step(line65, state, applied_params, kin, cfg)
        drift = max(float(np.max(np.abs(a - b))) for a, b in zip(new, state))
        assert drift <= 1e-12
        state = new


def test_heat_mode_decay(line129):
    p = ParameterSet(chi=0.0, xi=0.0, r=0.0, mu=1e-12)
    kin = make_kinetics(p)
    dt, T = 1e-3, 0.3
    cfg = SolverConfig(tau=0, dt=dt, t_final=T, require_nonnegative=False)
    f = np.cos(math.pi * line129.axes[0])
    traj = solve_forward(line129, (f, line129.zeros(), line129.zeros()), p, kin, cfg)
    exact = math.exp(-math.pi ** 2 * T) * f
    err = np.max(np.abs(traj.u[-1] - exact))
    bound = (dt * math.pi ** 4 * T + line129.spacing[0] ** 2 * math.pi ** 4 * T) * math.exp(-math.pi ** 2 * T)
    assert err <= 2 * bound
    # halving dt roughly halves the error (first order in time)
    cfg2 = SolverConfig(tau=0, dt=dt / 2, t_final=T, require_nonnegative=False)
    traj2 = solve_forward(line129, (f, line129.zeros(), line129.zeros()), p, kin, cfg2)
    err2 = np.max(np.abs(traj2.u[-1] - exact))
    assert 1.5 <= err / err2 <= 2.5


def test_mass_identity_per_step(line65, applied_params):
    # d/dt int u equals int(r u - mu u^2) exactly for this discretization:
    # advective and diffusive fluxes telescope, the implicit solve preserves mass
    p = applied_params
    kin = make_kinetics(p)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.05)
    f = 0.5 + 0.2 * np.cos(math.pi * line65.axes[0])
    traj = solve_forward(line65, (f, f, f), p, kin, cfg)
    for n in range(len(traj.times) - 1):
        du = (quadrature(line65, traj.u[n + 1]) - quadrature(line65, traj.u[n])) / cfg.dt
        reaction = quadrature(line65, p.r * traj.u[n] - p.mu * traj.u[n] ** 2)
        assert abs(du - reaction) <= 1e-10 * max(1.0, abs(reaction))


def test_nonnegativity_under_cfl(line65, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=1.0)
    f = 1.0 + 0.9 * np.cos(2 * math.pi * line65.axes[0])
    traj = solve_forward(line65, (f, f, f), applied_params, kin, cfg)
    assert float(np.min(traj.u)) >= -1e-9


def test_cfl_violation_detected(line65):
    p = ParameterSet(chi=50.0, xi=0.0, r=0.5, mu=1.0)
    kin = make_kinetics(p)
    cfg = SolverConfig(tau=0, dt=5e-2, t_final=0.5)
    f = 1.0 + 0.9 * np.cos(math.pi * line65.axes[0])
    with pytest.raises(CFLViolation):
        solve_forward(line65, (f, line65.zeros(), line65.zeros()), p, kin, cfg)


def test_negative_initial_data_rejected(line65, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.01)
    f = np.cos(math.pi * line65.axes[0])      # signed
    with pytest.raises(ValueError):
        solve_forward(line65, (f, line65.zeros(), line65.zeros()), applied_params, kin, cfg)


def test_perturbation_decay_matches_linearization(line129):
    # f = u0 + 0.01 cos(pi x): the gap to u0 decays at the linearized rate
    # around the carrying-capacity state, here r_eff = r - 2 mu u0 = -r
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1.0)
    eq = steady_state(p)
    kin = make_kinetics(p, expansion_point=eq)
    cfg = SolverConfig(tau=0, dt=5e-4, t_final=0.2)
    x = line129.axes[0]
    f = eq.u0 + 0.01 * np.cos(math.pi * x)
    traj = solve_forward(line129, (f, line129.constant(eq.v0), line129.constant(eq.w0)), p, kin, cfg)
    fam = PerturbationFamily(f1=np.cos(math.pi * x), enforce_nonnegative=False)
    direct = solve_first_variation(line129, p, kin, fam, cfg)
    gap = (traj.u - eq.u0) / 0.01
    rel = np.max(np.abs(gap - direct.order1.u)) / np.max(np.abs(direct.order1.u))
    assert rel < 5e-2       # agreement up to the quadratic remainder O(eps)
    # and the observed modal rate matches (r - pi^2) - 2 mu u0
    amp_T = float(np.sum(line129.weights * gap[-1] * np.cos(math.pi * x))) / \
        float(np.sum(line129.weights * np.cos(math.pi * x) ** 2))
    rate = math.log(amp_T) / cfg.t_final
    assert rate == pytest.approx(p.r - math.pi ** 2 - 2 * p.mu * eq.u0, rel=2e-2)


def test_richardson_self_convergence(line65, applied_params):
    kin = make_kinetics(applied_params)
    f = 0.5 + 0.2 * np.cos(math.pi * line65.axes[0])
    results = []
    for dt, stride in ((2e-3, 1), (1e-3, 2), (5e-4, 4)):
        cfg = SolverConfig(tau=0, dt=dt, t_final=0.4, store_every=stride)
        traj = solve_forward(line65, (f, f, f), applied_params, kin, cfg)
        results.append(traj.u[-1])
    e1 = np.linalg.norm(results[0] - results[1])
    e2 = np.linalg.norm(results[1] - results[2])
    assert 1.8 <= e1 / e2 <= 2.2


def test_tau_consistency_speedup(line65, applied_params):
    # faster chemical relaxation drives tau=1 measurements toward tau=0
    kin = make_kinetics(applied_params)
    f = 0.5 + 0.2 * np.cos(math.pi * line65.axes[0])
    g0 = line65.constant(0.4)
    cfg0 = SolverConfig(tau=0, dt=5e-4, t_final=0.3, store_every=30)
    ref = solve_forward(line65, (f, g0, g0), applied_params, kin, cfg0)
    gaps = []
    for s in (1.0, 4.0, 16.0):
        cfg1 = SolverConfig(tau=1, dt=5e-4, t_final=0.3, store_every=30,
                            relaxation_speedup=s)
        traj = solve_forward(line65, (f, g0, g0), applied_params, kin, cfg1)
        gaps.append(float(np.max(np.abs(traj.v[-1] - ref.v[-1]))
                          + np.max(np.abs(traj.w[-1] - ref.w[-1]))))
    assert gaps[0] > gaps[1] > gaps[2]


def test_determinism(line65, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.1)
    f = 0.5 + 0.2 * np.cos(math.pi * line65.axes[0])
    t1 = solve_forward(line65, (f, f, f), applied_params, kin, cfg)
    t2 = solve_forward(line65, (f, f, f), applied_params, kin, cfg)
    assert np.array_equal(t1.u, t2.u) and np.array_equal(t1.v, t2.v) and np.array_equal(t1.w, t2.w)


# -- measurement ---------------------------------------------------------------

def test_measure_constant_trajectory(line65, applied_params):
    eq = steady_state(applied_params)
    kin = make_kinetics(applied_params, expansion_point=eq)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.02)
    init = tuple(line65.constant(v) for v in eq)
    rec = measure(solve_forward(line65, init, applied_params, kin, cfg))
    assert np.max(np.abs(rec.boundary_u - eq.u0)) < 1e-12
    assert np.max(np.abs(rec.boundary_v - eq.v0)) < 1e-12


def test_measure_record_sizes(applied_params):
    # counting oracle: 1D N=65 has 2 boundary nodes; finals carry all nodes
    d = Domain(1.0, 65)
    kin = make_kinetics(applied_params)
    n_steps = 20
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=n_steps * 1e-3)
    f = 0.5 + 0.2 * np.cos(math.pi * d.axes[0])
    rec = measure(solve_forward(d, (f, f, f), applied_params, kin, cfg))
    assert rec.boundary_u.shape == (n_steps + 1, 2)
    assert rec.boundary_v.shape == (n_steps + 1, 2)
    assert rec.boundary_w.shape == (n_steps + 1, 2)
    trace_values = 3 * rec.boundary_u.size
    assert trace_values == 2 * (n_steps + 1) * 3
    assert rec.final_u.shape == (65,)


def test_measure_determinism_bitwise(line65, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.05)
    f = 0.5 + 0.1 * np.cos(math.pi * line65.axes[0])
    r1 = measure(solve_forward(line65, (f, f, f), applied_params, kin, cfg))
    r2 = measure(solve_forward(line65, (f, f, f), applied_params, kin, cfg))
    assert np.array_equal(r1.boundary_u, r2.boundary_u)
    assert np.array_equal(r1.final_w, r2.final_w)


def test_2d_boundary_measurement(square33, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=0, dt=2e-3, t_final=0.02)
    X, Y = square33.meshgrid()
    f = 0.5 + 0.1 * np.cos(math.pi * X) * np.cos(math.pi * Y)
    rec = measure(solve_forward(square33, (f, f, f), applied_params, kin, cfg))
    n_boundary = 4 * 33 - 4
    assert rec.boundary_u.shape[1] == n_boundary
