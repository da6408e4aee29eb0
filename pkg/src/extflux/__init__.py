"""Numerical laboratory for exterior diffusion problems driven by boundary flux.

Subpackages cover obstacle geometry, closed-form kernels and envelope
constants, deterministic truncated-domain solves, reflected-path Monte
Carlo, and a verification harness with a command line front end.
"""

__version__ = "0.1.0"
