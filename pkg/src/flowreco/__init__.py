"""Flow-based event reconstruction toolkit.

Trains normalizing-flow posteriors on a toy photon-detector Monte Carlo
and equips them with exact coverage tests (including for directions on
spheres), systematics marginalization and posterior-predictive
goodness-of-fit p-values.
"""

__version__ = "0.1.0"
