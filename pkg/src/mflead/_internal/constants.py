# Simplex tolerances
# Boundary rejection tolerance for constructed simplex points.
SIMPLEX_TOLERANCE = 1e-9
# Largest overshoot outside the simplex that a particle step may clamp away. Larger overshoots
# mean dt is too large for the rate magnitudes and are reported as errors.
SIMPLEX_CLAMP_TOLERANCE = 1e-9

# Gates
# Activation values below this are treated as exactly zero so that the control-support
# property holds without roundoff leaks (1 - l(1) at C=1e3 is far below this).
ACTIVATION_FLOOR = 1e-14

# Measures
# Follower mass below which the barycenter term of the Lagrangian is undefined.
FOLLOWER_MASS_FLOOR = 1e-12
# Relative tolerance for grid normalization and probability-weight sums.
MASS_TOLERANCE = 1e-12

# Finite volumes
# Relative tolerance when comparing dt against the positivity bound.
CFL_TOLERANCE = 1e-12
# Negative cell values below -NEGATIVE_CELL_TOLERANCE * peak are scheme bugs; values above are roundoff.
NEGATIVE_CELL_TOLERANCE = 1e-13
DEFAULT_CFL_SAFETY = 0.5
DEFAULT_DT_MAX = 0.01

# Interaction sums
# Rows of the target x source interaction matrix evaluated per block; bounds memory for large N.
INTERACTION_CHUNK = 1024
# Entries kept in the LRU cache of grid interaction matrices.
INTERACTION_CACHE_SIZE = 64

# MPC
ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX_HALVINGS = 40

# Transport
# Largest support handled by the exact min-cost flow solver.
W1_EXACT_MAX_SUPPORT = 4000
W1_EMD_MAX_ITER = 10_000_000

# Audit
# A Lipschitz quotient that grows by more than this factor between the two finest perturbation
# scales is flagged as unbounded.
AUDIT_GROWTH_THRESHOLD = 3.0

# Experiments
# Local maxima below this fraction of the peak are ignored when counting opinion clusters.
CLUSTER_PEAK_FRACTION = 0.1
