"""Solve the bundled double-integrator problem with every formulation and compare values.

The steady-state target (P0 cascade) ignores the position bound when picking
its target, so its value is higher. The reduced, oracle and centralized
formulations coincide.
"""
import numpy as np

from bilevel_mpc import solve_p0_cascade, solve_p1_oracle, solve_p2, solve_p3, toy_config

cfg = toy_config()
inst, x0 = cfg.build(), cfg.x0

p0 = solve_p0_cascade(inst, x0)
p1 = solve_p1_oracle(inst, x0)
p2 = solve_p2(inst, x0)
p3 = solve_p3(inst, x0)

print(f"{'formulation':<28}{'value':>14}{'time [ms]':>12}")
for name, rep in [("steady-state cascade (P0)", p0), ("oracle bilevel (P1)", p1),
                  ("reduced bilevel (P2)", p2), ("centralized (P3)", p3)]:
    print(f"{name:<28}{rep.value:>14.9f}{1e3 * rep.wall_time:>12.2f}")

print("\nfirst five inputs")
print("  P0:", np.round(p0.U[:5], 4))
print("  P2:", np.round(p2.U[:5], 4))
print("max |U_P2 - U_P3| =", float(np.max(np.abs(p2.U - p3.U))))
print("reduced reference coordinates Theta* =", np.round(p2.Theta, 6))
