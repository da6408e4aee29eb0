"""Closed-form kernels, hitting probabilities, and envelope constants.

Everything in this module is dimension-generic for d >= 3 and reduces to
elementary expressions in d = 3.  All lengths are plain Euclidean units;
the envelope constants are dimensionless and scale-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "sphere_area",
    "free_green",
    "dirichlet_green_exterior_ball",
    "hit_prob_ball",
    "annulus_hit_prob",
    "upper_envelope_constant",
    "lower_envelope_constant",
    "optimal_circuit_ratio",
    "green_ratio_lower_bound",
    "envelope_threshold",
    "BoundConstants",
    "bound_constants",
]


def _check_dim(d: int) -> None:
    if not isinstance(d, (int, np.integer)) or d < 3:
        raise ValueError(f"dimension must be an integer >= 3, got {d!r}")


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    _check_dim(d)
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _pair_norms(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = np.linalg.norm(x - y, axis=-1)
    return x, y, diff


def free_green(x: np.ndarray, y: np.ndarray, d: int) -> np.ndarray | float:
    """Whole-space kernel |x-y|^(2-d) / ((d-2) * sphere_area(d)).

    Accepts single points or broadcastable stacks of points in the last axis.
    """
    _check_dim(d)
    x, y, diff = _pair_norms(x, y)
    if np.any(diff == 0):
        raise ValueError("free_green is singular at coincident points")
    out = diff ** (2 - d) / ((d - 2) * sphere_area(d))
    return float(out) if out.ndim == 0 else out


def dirichlet_green_exterior_ball(
    x: np.ndarray, y: np.ndarray, R: float, d: int
) -> np.ndarray | float:
    """Kernel of Brownian motion killed on the ball of radius R, outside it.

    Image form: the free kernel minus the reflected-pole term
    |x' - y'|^(2-d) with x' = (|y|/R) x and y' = (R/|y|) y.  Symmetric in
    (x, y), vanishes as either argument approaches the sphere, and is
    positive strictly outside.
    """
    _check_dim(d)
    if R <= 0:
        raise ValueError(f"ball radius must be positive, got {R}")
    x, y, diff = _pair_norms(x, y)
    rx = np.linalg.norm(x, axis=-1)
    ry = np.linalg.norm(y, axis=-1)
    if np.any(rx < R * (1 - 1e-12)) or np.any(ry < R * (1 - 1e-12)):
        raise ValueError("both arguments must lie outside the ball of radius R")
    if np.any(diff == 0):
        raise ValueError("kernel is singular at coincident points")
    # |y|/R * x - R/|y| * y, computed through the symmetric norm expansion
    # to avoid building the image points explicitly.
    image_sq = (rx * ry / R) ** 2 - 2.0 * np.sum(
        np.asarray(x, float) * np.asarray(y, float), axis=-1
    ) + R ** 2
    image = np.sqrt(np.maximum(image_sq, 0.0))
    out = (diff ** (2 - d) - image ** (2 - d)) / ((d - 2) * sphere_area(d))
    return float(out) if out.ndim == 0 else out


def hit_prob_ball(r: np.ndarray | float, R: float, d: int) -> np.ndarray | float:
    """Probability that Brownian motion started at radius r ever reaches radius R <= r."""
    _check_dim(d)
    if R <= 0:
        raise ValueError(f"target radius must be positive, got {R}")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < R * (1 - 1e-12)):
        raise ValueError("start radius must satisfy r >= R")
    out = (R / r_arr) ** (d - 2)
    return float(out) if out.ndim == 0 else out


def annulus_hit_prob(
    r: np.ndarray | float, R: float, outer: float, d: int
) -> np.ndarray | float:
    """Probability of reaching radius R before radius `outer`, starting at r in between."""
    _check_dim(d)
    if not (0 < R < outer):
        raise ValueError(f"need 0 < R < outer, got R={R}, outer={outer}")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < R * (1 - 1e-12)) or np.any(r_arr > outer * (1 + 1e-12)):
        raise ValueError("start radius must lie in [R, outer]")
    p = 2 - d
    out = (r_arr ** p - outer ** p) / (R ** p - outer ** p)
    return float(out) if out.ndim == 0 else out


def optimal_circuit_ratio(gamma: float, d: int) -> float:
    """Intermediate-sphere ratio maximizing (1 - rho^(2-d)) * (gamma - rho)^(d-2)."""
    _check_dim(d)
    if gamma <= 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    return gamma ** (1.0 / (d - 1))


def upper_envelope_constant(gamma: float, d: int) -> float:
    """Geometry-independent upper constant for the exterior kernel at radii >= gamma * R.

    Dimensionless, decreasing in gamma, tends to 1 from above.  In d = 3 it
    reduces to gamma / (sqrt(gamma) - 1)^2.
    """
    _check_dim(d)
    if gamma <= 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    rho = optimal_circuit_ratio(gamma, d)
    return (
        gamma ** ((d - 2) / (d - 1))
        * gamma ** (d - 2)
        / ((gamma ** ((d - 2) / (d - 1)) - 1.0) * (gamma - rho) ** (d - 2))
    )


def green_ratio_lower_bound(gamma: float, rho: float, d: int) -> float:
    """Closed-form lower bound on the normalized killed kernel at radius gamma * R.

    Normalization: the kernel times (d-2) * sphere_area(d) * |y|^(d-2),
    minimized over the sphere of radius rho * R.  May be non-positive for
    small gamma; increasing in gamma for fixed rho.
    """
    _check_dim(d)
    if not 1.0 < rho < gamma:
        raise ValueError(f"need 1 < rho < gamma, got rho={rho}, gamma={gamma}")
    if gamma * rho <= 1.0:
        raise ValueError("gamma * rho must exceed 1")
    return (gamma / (gamma + rho)) ** (d - 2) - (gamma / (gamma * rho - 1.0)) ** (d - 2)


@lru_cache(maxsize=None)
def envelope_threshold(d: int) -> float:
    """Smallest gamma at which the closed-form lower constant turns positive.

    Positivity of the closed form at rho = gamma^(1/(d-1)) is equivalent to
    gamma * rho - 1 > gamma + rho; the threshold is located by bisection.
    """
    _check_dim(d)

    def margin(g: float) -> float:
        rho = g ** (1.0 / (d - 1))
        return g * rho - 1.0 - g - rho

    lo, hi = 1.0 + math.sqrt(2.0), 16.0
    if margin(hi) <= 0:
        raise RuntimeError("bisection bracket failed for envelope threshold")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if margin(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi


def _lower_constant_fallback(gamma: float, d: int) -> float:
    """Positive lower constant below the closed-form threshold.

    Numerically minimizes the normalized killed kernel over the sphere of
    radius rho = (1 + gamma)/2 and all source radii >= gamma (unit R), then
    divides by 1 - rho^(2-d).  The minimum over the sphere sits at the
    antipodal configuration, but the scan keeps the full angular sweep as a
    guard.
    """
    rho = 0.5 * (1.0 + gamma)
    norm = (d - 2) * sphere_area(d)
    # Radial sweep from gamma outward; the normalized kernel tends to
    # 1 - rho^(2-d) at infinity, folded in below as the asymptote.
    radii = np.geomspace(gamma, max(100.0, 20.0 * gamma), 400)
    angles = np.linspace(0.0, math.pi, 181)
    z = np.zeros((angles.size, d))
    z[:, 0] = rho * np.sin(angles)
    z[:, -1] = rho * np.cos(angles)
    best = 1.0 - rho ** (2 - d)
    y = np.zeros((radii.size, d))
    y[:, -1] = radii
    vals = dirichlet_green_exterior_ball(z[:, None, :], y[None, :, :], 1.0, d)
    ratio = norm * vals * radii[None, :] ** (d - 2)
    best = min(best, float(ratio.min()))
    return best / (1.0 - rho ** (2 - d))


def lower_envelope_constant(gamma: float, d: int) -> float:
    """Geometry-independent lower constant for the exterior kernel at radii >= gamma * R.

    Uses the closed form at the optimal circuit ratio once gamma clears
    envelope_threshold(d); below the threshold a slower numeric minimization
    still produces a positive constant.  Always in (0, 1].
    """
    _check_dim(d)
    if gamma <= 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    if gamma >= envelope_threshold(d):
        rho = optimal_circuit_ratio(gamma, d)
        return green_ratio_lower_bound(gamma, rho, d) / (1.0 - rho ** (2 - d))
    return _lower_constant_fallback(gamma, d)


@dataclass(frozen=True)
class BoundConstants:
    """Envelope constants for one (gamma, dimension) pair.

    threshold_gamma records where the closed-form lower branch starts;
    fallback is True when gamma sits below it.
    """

    gamma: float
    dim: int
    circuit_ratio: float
    upper: float
    lower: float
    threshold_gamma: float
    fallback: bool

    def __post_init__(self) -> None:
        if not (0.0 < self.lower <= 1.0 <= self.upper):
            raise ValueError(
                f"envelope constants must straddle 1, got lower={self.lower}, upper={self.upper}"
            )


def bound_constants(gamma: float, d: int) -> BoundConstants:
    """Bundle the circuit ratio and both envelope constants for gamma, d."""
    threshold = envelope_threshold(d)
    return BoundConstants(
        gamma=float(gamma),
        dim=int(d),
        circuit_ratio=optimal_circuit_ratio(gamma, d),
        upper=upper_envelope_constant(gamma, d),
        lower=lower_envelope_constant(gamma, d),
        threshold_gamma=threshold,
        fallback=gamma < threshold,
    )
