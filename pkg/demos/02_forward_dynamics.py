"""Forward dynamics of the coupled system: steady states, mass balance, tau switch.

Run:  python demos/02_forward_dynamics.py
"""

import math

import numpy as np

from archemo.forward import (
    KineticsSpec,
    ParameterSet,
    SolverConfig,
    measure,
    solve_forward,
    steady_state,
)
from archemo.grid import Domain, quadrature

d = Domain(1.0, 129)
p = ParameterSet(chi=0.4, xi=0.2, r=0.5, mu=1.0, alpha=1.0, beta=1.0, gamma=1.0, delta=1.0)
eq = steady_state(p)
print(f"carrying-capacity equilibrium: u0={eq.u0}, v0={eq.v0}, w0={eq.w0}")

kin = KineticsSpec.from_parameters(p, expansion_point=eq)
cfg = SolverConfig(tau=0, dt=1e-3, t_final=2.0, store_every=100)
f = eq.u0 * (1.0 + 0.8 * np.cos(math.pi * d.axes[0]))
traj = solve_forward(d, (f, d.constant(eq.v0), d.constant(eq.w0)), p, kin, cfg)

print("\nrelaxation toward the logistic plateau (tau = 0):")
for i in (0, 2, 5, 10, len(traj) - 1):
    mass = quadrature(d, traj.u[i])
    spread = float(np.max(traj.u[i]) - np.min(traj.u[i]))
    print(f"  t={traj.times[i]:5.2f}  total mass {mass:.6f}  spread {spread:.3e}")

print("\nper-step mass identity  d/dt int u = int (r u - mu u^2):")
cfg2 = SolverConfig(tau=0, dt=1e-3, t_final=0.01)
short = solve_forward(d, (f, d.constant(eq.v0), d.constant(eq.w0)), p, kin, cfg2)
for n in range(3):
    lhs = (quadrature(d, short.u[n + 1]) - quadrature(d, short.u[n])) / cfg2.dt
    rhs = quadrature(d, p.r * short.u[n] - p.mu * short.u[n] ** 2)
    print(f"  step {n}: gap {abs(lhs - rhs):.3e}")

print("\nchemical relaxation speed bridges tau = 1 toward tau = 0:")
cfg0 = SolverConfig(tau=0, dt=5e-4, t_final=0.3, store_every=50)
ref = solve_forward(d, (f, f, f), p, kin, cfg0)
for s in (1.0, 4.0, 16.0):
    cfg1 = SolverConfig(tau=1, dt=5e-4, t_final=0.3, store_every=50, relaxation_speedup=s)
    t1 = solve_forward(d, (f, f, f), p, kin, cfg1)
    gap = float(np.max(np.abs(t1.v[-1] - ref.v[-1])))
    print(f"  speedup {s:5.1f}: |v_tau1 - v_tau0| at T = {gap:.3e}")

rec = measure(traj)
print(f"\nmeasurement record: {rec.boundary_u.shape[0]} trace times x "
      f"{rec.boundary_u.shape[1]} boundary nodes + 3 final fields")
