"""Large-learning-rate training dynamics: solvable warmup and linear models,
finite-width MLPs with matrix-free NTK curvature, tangent models, and the
experiment drivers built on them.
"""

__version__ = "0.1.0"
