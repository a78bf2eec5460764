"""Microgrid design and operation planning toolkit.

Builds mixed-integer quadratically constrained programs for joint siting,
sizing, and dispatch of batteries and diesel units on a distribution
network, and solves them monolithically, by receding horizon, or by an
iterative dual-communicating horizon decomposition.
"""

__version__ = "0.1.0"
