"""Numerical laboratory for the soft-potential Boltzmann collision operator.

Modules: field (grids and phase-space fields), collision (Q+ and Q-),
norms (weighted norms and the inequality suite), deflation (the norm-deflation
construction), solver (transport, Duhamel, Picard) and cli.
"""
__version__ = "0.1.0"
