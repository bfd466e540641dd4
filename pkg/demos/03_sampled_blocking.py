"""Build a blocking matrix from sampled steady-state plans.

The reduced problem restricted to the span of the sampled P0 input plans is
never worse than P0 at those samples. For the toy plant this span has rank 2,
against 10 free moves in the unblocked problem.
"""
import numpy as np

from bilevel_mpc import construct_from_p0, sample_initial_states, solve_p0_cascade, solve_p2, toy_config

cfg = toy_config()
inst, x0 = cfg.build(), cfg.x0
samples = sample_initial_states(x0, cfg.tolerances["sample_half_width"], 50, seed=0)
M = construct_from_p0(inst, samples, tol=cfg.tolerances["algorithm1"])
print("blocking matrix rank:", M.p, "of", inst.model.nU)

diffs = [solve_p2(inst, x, M).value - solve_p0_cascade(inst, x).value for x in samples]
print(f"V2(M*) - V0 over samples: max {max(diffs):.3e}, min {min(diffs):.3e}")
print(f"V2(M*) at x0 = {solve_p2(inst, x0, M).value:.6f}, unblocked V2 = {solve_p2(inst, x0).value:.6f}")
print("columns of M* (first 5 rows):\n", np.round(M.M[:5], 4))
