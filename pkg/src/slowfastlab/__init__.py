"""Simulation laboratory for slow-fast systems over infinite-measure flows.

Modules
-------
geometry   event-driven Z-periodic Lorentz gas (discs on a cylinder)
dynsys     suspension flows over Z-extensions; toy doubling-map model
slowfast   perturbed/averaged slow dynamics and Birkhoff-type integrals
limitproc  limit processes: Brownian paths, local time, time-changed integrals
stats      estimators (variance, Green-Kubo curves) and statistical comparison
cli        experiment configs, pipelines, and the command-line entry point
"""

__version__ = "0.1.0"

__all__ = ["geometry", "dynsys", "slowfast", "limitproc", "stats", "cli", "rng"]
