"""Fitted constants and fixtures recorded from first runs (seed 0)."""

# contraction bound constant; largest fitted value over alpha in {0.34, 0.5, 0.75, 0.9} is 1.431
C5 = 1.5

# Margulis inequality: the fitted constant came out 0 for ell = 1, 2, 3
C13_FIXTURE = 1.0
MARGULIS_BETA = 1e-9

# regularization certificate on the synthetic sets (all three gave 1.3195)
C_PRIME_FIXTURE = 1.3195

# projection multiplicity constant on the Cantor cube, kappa = 0.05
C_KAPPA_FIXTURE = 0.7832

# pipeline on the Cantor cube from the generic point
PIPELINE_MEMBERSHIP_FIXTURE = 3.44
PIPELINE_REGULARITY_FIXTURE = 1.0

# periodic-orbit count constant: max #I(y) over the volume proxy, depth-4 cache
C16_FIXTURE = 7.64

# standard generic base point: exp of this algebra vector, reduced
GENERIC_POINT = (0.3, 0.2, -0.1, 0.17, -0.05, 0.11)

TEST_GRID_ETA = 0.005
HAAR_TIME = 10.0
HAAR_SAMPLES = 60_000

# relative drop of the covering radius still counted as stagnation
STAGNATION = 0.05
