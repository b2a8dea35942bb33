"""spdelab: simulate dissipative stochastic dynamics on finite-dimensional
Hilbert spaces, certify generalized dissipativity constants, and verify
Wasserstein-2 convergence toward initial-state-dependent limiting laws."""

__version__ = "0.1.0"
