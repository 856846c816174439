import math

import numpy as np
import pytest

from archemo.forward import ParameterSet, SolverConfig, elliptic_solve
from archemo.grid import Domain, laplacian_neumann, norm_l2
from archemo.variation import (
    ForwardHandle,
    PerturbationFamily,
    VariationStack,
    consistency_report,
    extract_variation_fd,
    solve_first_variation,
    solve_second_variation,
    space_time_norm,
)

from conftest import make_kinetics


def _fd_setup(domain, params, tau=0, dt=1e-3, t_final=0.3, **fam_kw):
    kin = make_kinetics(params)
    cfg = SolverConfig(tau=tau, dt=dt, t_final=t_final)
    fam = PerturbationFamily(**fam_kw)
    handle = ForwardHandle.from_model(domain, params, kin, cfg)
    return kin, cfg, fam, handle


def test_zero_perturbation_gives_zero_variations(line65, applied_params):
    kin, cfg, fam, handle = _fd_setup(line65, applied_params)
    direct = solve_first_variation(line65, applied_params, kin, fam, cfg)
    assert np.max(np.abs(direct.order1.u)) == 0.0
    assert np.max(np.abs(direct.order1.v)) == 0.0
    fd = extract_variation_fd(handle, fam, order=1)
    assert np.max(np.abs(fd.order1.u)) < 1e-14


def test_first_variation_single_mode(line129):
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1.0, beta=1.5, delta=1.5)
    kin = make_kinetics(p)
    dt, T = 1e-3, 0.3
    cfg = SolverConfig(tau=0, dt=dt, t_final=T)
    x = line129.axes[0]
    fam = PerturbationFamily(f1=np.cos(math.pi * x), enforce_nonnegative=False)
    stack = solve_first_variation(line129, p, kin, fam, cfg)
    t = stack.order1.times.reshape(-1, 1)
    exact = np.exp((p.r - math.pi ** 2) * t) * np.cos(math.pi * x)
    err = np.max(np.abs(stack.order1.u - exact))
    assert err <= 5 * (dt + line129.spacing[0] ** 2) * math.pi ** 4 * T

    # forced-mode algebra for the slaved attractant: v1 = [alpha/(pi^2+beta)] u1
    expected_v = exact / (math.pi ** 2 + p.beta)
    err_v = np.max(np.abs(stack.order1.v - expected_v))
    assert err_v <= 5 * (dt + line129.spacing[0] ** 2) * math.pi ** 4 * T


def test_first_variation_linearity(line65, applied_params, rng):
    kin, cfg, _, _ = _fd_setup(line65, applied_params)
    f1a = rng.random(line65.shape)
    f1b = rng.random(line65.shape)
    sa = solve_first_variation(line65, applied_params, kin, PerturbationFamily(f1=f1a), cfg)
    sb = solve_first_variation(line65, applied_params, kin, PerturbationFamily(f1=f1b), cfg)
    sab = solve_first_variation(line65, applied_params, kin,
                                PerturbationFamily(f1=f1a + f1b), cfg)
    gap = np.max(np.abs(sab.order1.u - sa.order1.u - sb.order1.u))
    assert gap <= 1e-10


def test_second_variation_initial_condition_only(line129):
    # sources vanish when f1 = 0; order2.u evolves 2*f2 by the heat semigroup
    p = ParameterSet(chi=0.1, xi=0.05, r=0.5, mu=1.0)
    kin = make_kinetics(p)
    dt, T = 1e-3, 0.2
    cfg = SolverConfig(tau=0, dt=dt, t_final=T)
    x = line129.axes[0]
    fam = PerturbationFamily(f2=np.cos(math.pi * x), enforce_nonnegative=False)
    first = solve_first_variation(line129, p, kin, fam, cfg)
    second = solve_second_variation(line129, p, kin, fam, first, cfg)
    t = second.order2.times.reshape(-1, 1)
    exact = 2.0 * np.exp((p.r - math.pi ** 2) * t) * np.cos(math.pi * x)
    assert np.max(np.abs(second.order2.u - exact)) <= 5 * (dt + line129.spacing[0] ** 2) * math.pi ** 4


def test_second_variation_undetermined_coefficients(line129):
    # chi = xi = 0: u2 solves a heat equation forced by -2 mu e^{2 theta t} cos^2(pi x);
    # modal split gives closed-form amplitudes (independent oracle)
    r, mu = 0.5, 1.0
    p = ParameterSet(chi=0.0, xi=0.0, r=r, mu=mu, beta=1.5, delta=1.5)
    kin = make_kinetics(p)
    dt, T = 1e-3, 0.3
    cfg = SolverConfig(tau=0, dt=dt, t_final=T)
    x = line129.axes[0]
    fam = PerturbationFamily(f1=np.cos(math.pi * x), enforce_nonnegative=False)
    first = solve_first_variation(line129, p, kin, fam, cfg)
    second = solve_second_variation(line129, p, kin, fam, first, cfg)
    theta = r - math.pi ** 2
    lam2 = (2 * math.pi) ** 2
    t = second.order2.times.reshape(-1, 1)
    a_t = mu * (np.exp(r * t) - np.exp(2 * theta * t)) / (2 * theta - r)
    b_t = mu * (np.exp((r - lam2) * t) - np.exp(2 * theta * t)) / (2 * theta - (r - lam2))
    exact = a_t + b_t * np.cos(2 * math.pi * x)
    rel = space_time_norm(line129, second.order2.times, second.order2.u - exact) / \
        space_time_norm(line129, second.order2.times, exact)
    assert rel <= 0.05
    cfg2 = SolverConfig(tau=0, dt=dt / 2, t_final=T)
    first2 = solve_first_variation(line129, p, kin, fam, cfg2)
    second2 = solve_second_variation(line129, p, kin, fam, first2, cfg2)
    t2 = second2.order2.times.reshape(-1, 1)
    exact2 = (mu * (np.exp(r * t2) - np.exp(2 * theta * t2)) / (2 * theta - r)
              + mu * (np.exp((r - lam2) * t2) - np.exp(2 * theta * t2))
              / (2 * theta - (r - lam2)) * np.cos(2 * math.pi * x))
    rel2 = space_time_norm(line129, second2.order2.times, second2.order2.u - exact2) / \
        space_time_norm(line129, second2.order2.times, exact2)
    assert rel / rel2 >= 1.5      # first order in dt


def test_second_variation_superposition(line65):
    # all second-order kinetic coefficients zero and chi = xi = mu ~ 0:
    # v2 is the linear elliptic response to u2 alone
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1e-12)
    kin = make_kinetics(p)
    cfg = SolverConfig(tau=0, dt=1e-3, t_final=0.1)
    x = line65.axes[0]
    fam = PerturbationFamily(f1=1.0 + 0.5 * np.cos(math.pi * x),
                             f2=0.5 + 0.5 * np.cos(2 * math.pi * x))
    first = solve_first_variation(line65, p, kin, fam, cfg)
    second = solve_second_variation(line65, p, kin, fam, first, cfg)
    for n in (0, len(second.order2.times) // 2, -1):
        expected = elliptic_solve(line65, 1.0 * second.order2.u[n], p.beta)
        assert np.max(np.abs(second.order2.v[n] - expected)) < 1e-9


def test_second_variation_requires_first(line65, applied_params):
    kin, cfg, fam, _ = _fd_setup(line65, applied_params, f1=np.ones(65))
    with pytest.raises(ValueError):
        solve_second_variation(line65, applied_params, kin, fam, None, cfg)


def test_fd_matches_direct_for_affine_map(line65):
    # with mu ~ 0 and chi = xi = 0 the solution map is affine in eps
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1e-12)
    kin, cfg, fam, handle = _fd_setup(line65, p, f1=1.0 + 0.9 * np.cos(math.pi * line65.axes[0]))
    direct = solve_first_variation(line65, p, kin, fam, cfg)
    fd = extract_variation_fd(handle, fam, order=1)
    assert np.max(np.abs(fd.order1.u - direct.order1.u)) <= 1e-8


def test_fd_slope_full_nonlinear(line65, nondegenerate_params):
    kin, cfg, fam, handle = _fd_setup(
        line65, nondegenerate_params,
        f1=1.0 + 0.9 * np.cos(math.pi * line65.axes[0]))
    direct1 = solve_first_variation(line65, nondegenerate_params, kin, fam, cfg)
    direct2 = solve_second_variation(line65, nondegenerate_params, kin, fam, direct1, cfg)
    _, ladder = extract_variation_fd(handle, fam, order=2,
                                     first_direct=direct1.order1, return_ladder=True)
    rep = consistency_report(
        line65, VariationStack(order1=direct1.order1, order2=direct2.order2), ladder)
    assert rep.slopes[1] >= 0.8
    assert rep.slopes[2] >= 0.8
    assert "slope" in rep.to_text()


def test_fd_rejects_zero_epsilon(line65, applied_params):
    kin, cfg, _, handle = _fd_setup(line65, applied_params)
    fam = PerturbationFamily(f1=np.ones(65), epsilons=(1e-2, 0.0))
    with pytest.raises(ValueError):
        extract_variation_fd(handle, fam, order=1)


def test_family_validation(line65):
    with pytest.raises(ValueError):
        PerturbationFamily(f1=-np.ones(65)).validate(line65)
    with pytest.raises(ValueError):
        PerturbationFamily(epsilons=(1e-3, 1e-2)).validate(line65)
    fam = PerturbationFamily(f1=np.ones(65), epsilons=(1e-2, 5e-3))
    fam.validate(line65)
    f, g, h = fam.initial_data(line65, (0.0, 0.0, 0.0), 1e-2)
    assert np.allclose(f, 1e-2)


def test_slope_nan_at_floor(line65):
    # affine map: discrepancies at solver floor, slope flagged as NaN
    p = ParameterSet(chi=0.0, xi=0.0, r=0.5, mu=1e-12)
    kin, cfg, fam, handle = _fd_setup(line65, p, f1=np.ones(65))
    direct = solve_first_variation(line65, p, kin, fam, cfg)
    _, ladder = extract_variation_fd(handle, fam, order=1, return_ladder=True)
    rep = consistency_report(line65, direct, ladder, floor=1e-10)
    assert math.isnan(rep.slopes[1])
    assert "not meaningful" in rep.to_text()


def test_elliptic_residual_invariant(line65, nondegenerate_params):
    # tau=0 slaved first variation satisfies the discrete chemical balance
    kin, cfg, fam, _ = _fd_setup(line65, nondegenerate_params,
                                 f1=1.0 + 0.5 * np.cos(math.pi * line65.axes[0]))
    stack = solve_first_variation(line65, nondegenerate_params, kin, fam, cfg)
    for n in (0, len(stack.order1.times) // 2, -1):
        resid = (laplacian_neumann(line65, stack.order1.v[n])
                 + 1.0 * stack.order1.u[n] - nondegenerate_params.beta * stack.order1.v[n])
        assert norm_l2(line65, resid) <= 10 * cfg.elliptic_tol * max(1.0, norm_l2(line65, stack.order1.u[n]))


def test_tau1_first_variation_uses_initial_chemicals(line65, applied_params):
    kin = make_kinetics(applied_params)
    cfg = SolverConfig(tau=1, dt=1e-3, t_final=0.1)
    g1 = 1.0 + 0.5 * np.cos(math.pi * line65.axes[0])
    fam = PerturbationFamily(g1=g1)
    stack = solve_first_variation(line65, applied_params, kin, fam, cfg)
    assert np.max(np.abs(stack.order1.v[0] - g1)) == 0.0
    assert np.max(np.abs(stack.order1.u)) == 0.0
    # pure decay of the attractant modes
    end = stack.order1.v[-1]
    assert 0 < np.max(end) < np.max(g1)
