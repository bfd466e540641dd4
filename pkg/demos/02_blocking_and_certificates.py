"""Walk the leading-free blocking family and bound each suboptimality gap.

With M_i only the first i moves are free and the rest share one value.
Enlarging i can only lower the reduced value. Each gap to the unblocked
problem is covered by a certificate computed from the blocked solution
alone, and loosening the active-set threshold eps tightens it.
"""
from bilevel_mpc import blocked_gap_certificate, hmpc_gap_certificate, leading_free, solve_p2, toy_config

cfg = toy_config()
inst, x0 = cfg.build(), cfg.x0
N, m = inst.model.N, inst.model.m
full = leading_free(N, N, m)
v_full = solve_p2(inst, x0).value

print(f"{'i':>3}{'V2(M_i)':>14}{'gap':>12}{'Delta':>12}{'Delta_0.5':>12}")
for i in range(1, N + 1):
    M = leading_free(i, N, m)
    v = solve_p2(inst, x0, M).value
    c0 = blocked_gap_certificate(inst, M, full, x0, 0.0)
    c5 = blocked_gap_certificate(inst, M, full, x0, 0.5)
    print(f"{i:>3}{v:>14.6f}{v - v_full:>12.6f}{c0.delta:>12.6f}{c5.delta:>12.6f}")

print("\nhierarchical (steady-state) controller vs reduced bilevel")
for eps in (0.0, 0.5, 1.0):
    c = hmpc_gap_certificate(inst, x0, eps)
    print(f"  eps={eps:<4} issued={c.issued} Delta={c.delta:.6f}")

print("\nstarting close to the bound, the steady-state plan violates it and no bound is issued:")
c = hmpc_gap_certificate(inst, [-0.05, 0.5], 0.0)
print("  issued:", c.issued, "|", c.reason)
