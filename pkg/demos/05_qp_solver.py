"""Use the bundled active-set QP solver directly and inspect its KKT residuals."""
import numpy as np

from bilevel_mpc import QuadraticProgram, solve_qp
from bilevel_mpc.qp import kkt_residuals

# minimize 1/2 |z - (2, 1)|^2  subject to  z1 + z2 <= 1,  z >= 0
qp = QuadraticProgram(
    H=np.eye(2), c=-np.array([2.0, 1.0]),
    Aineq=np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]), bineq=np.array([1.0, 0.0, 0.0]),
)
sol = solve_qp(qp)
print("status:", sol.status)
print("z* =", sol.z, " multipliers =", np.round(sol.mu_ineq, 6))
print("KKT residuals:", kkt_residuals(qp, sol.z, sol.mu_ineq, sol.nu_eq))
