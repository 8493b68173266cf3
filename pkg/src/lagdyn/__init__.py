"""lagdyn: learn Lagrangian dynamics from trajectories.

A scalar Lagrangian (analytic, neural, or a lattice density) is turned into
accelerations through the Euler-Lagrange solve; training matches those
accelerations against ground truth, and conservation diagnostics (energy,
gauge/scale invariance, Euler-Lagrange residuals) verify the result.
"""

__version__ = "0.1.0"
