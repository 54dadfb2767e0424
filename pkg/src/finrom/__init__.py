"""Component-based model reduction for nonlinear thermal fin systems.

The package trains a reusable library of archetype components offline
(reduced bases plus empirical quadrature rules) and assembles hyperreduced
models of port-connected systems online, with a computable bound relating
the hyperreduction error to the quadrature tolerances.
"""

__version__ = "0.1.0"
