"""Invariant measures and homogenization of non-divergence operators across a flat periodic interface.

Modules
-------
fields     coefficient fields, presets and validation
grid       structured grids, finite-difference assembly, slice integrals, I/O
solver     sparse Krylov solves with logged reports
cell       invariant measure on the torus, flux correctors, effective tensor
interface  invariant measure on the slab, decay fits, interface flux corrector
homogen    oscillating and homogenized problems, convergence study
cli        command-line driver
"""

__version__ = "0.1.0"
