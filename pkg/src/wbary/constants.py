"""Numerical tolerances shared across the package."""

#: Total mass of a discrete measure must equal one within this slack.
MASS_TOL = 1e-12
#: Total mass of a grid density (sum of values times cell volume).
GRID_MASS_TOL = 1e-10
#: Marginal residuals of a transport plan.
PLAN_MARGINAL_TOL = 1e-9
#: Allowed violation of phi[i] + psi[j] <= |x_i - y_j|^2.
DUAL_FEASIBILITY_TOL = 1e-9
#: Allowed primal-dual gap of a transport certificate.
DUALITY_GAP_TOL = 1e-7
#: Support containment slack for points sitting on the box boundary.
SUPPORT_TOL = 1e-12
#: Default entropy / Sobolev floor, relative to the uniform density value.
DEFAULT_FLOOR_RATIO = 1e-6
#: Maximum number of step halvings in the barycenter line search.
MAX_HALVINGS = 30
