"""Obstacle geometry: signed distances, boundary quadrature, flux data.

Domains are compact obstacles D sitting inside a reference ball; the
computational domain is always the exterior R^d - closure(D).  Signed
distances are positive in the exterior, negative inside the obstacle.
Normals returned anywhere in this module point from the obstacle into the
exterior (the direction the co-normal flux condition is written in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi

from .closedform import sphere_area

__all__ = [
    "Domain",
    "Ball",
    "Shell",
    "PuncturedShell",
    "BoundaryQuadrature",
    "FluxSpec",
    "FluxError",
    "make_ball",
    "make_shell",
    "make_punctured_shell",
    "boundary_quadrature",
    "surface_measure",
    "inward_normal",
    "unit_sphere_quadrature",
    "uniform_flux",
    "hemisphere_flux",
    "polyline_is_exterior",
    "dump_point_cloud",
]


class FluxError(ValueError):
    """Raised when boundary flux data violates admissibility."""


def _as_points(x: np.ndarray, dim: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if pts.shape[-1] != dim:
        raise ValueError(f"expected points in R^{dim}, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Domain:
    """Base obstacle; concrete shapes override the distance functions."""

    dim: int
    bounding_radius: float
    label: str = field(default="domain")

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def signed_distance_gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.signed_distance(x) < 0.0


@dataclass(frozen=True)
class Ball(Domain):
    radius: float = 1.0

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        return np.linalg.norm(pts, axis=-1) - self.radius

    def signed_distance_gradient(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1, keepdims=True)
        grad = np.zeros_like(pts)
        grad[..., -1] = 1.0  # deterministic direction at the center
        ok = r[..., 0] > 0
        grad[ok] = pts[ok] / r[ok]
        return grad


@dataclass(frozen=True)
class Shell(Domain):
    """Solid spherical annulus inner <= |x| <= outer."""

    inner: float = 0.5
    outer: float = 0.9

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1)
        return np.maximum(self.inner - r, r - self.outer)

    def signed_distance_gradient(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1)
        grad = np.zeros_like(pts)
        grad[..., -1] = -1.0
        ok = r > 0
        hat = np.zeros_like(pts)
        hat[ok] = pts[ok] / r[ok, None]
        # cavity branch wins ties so a point on the mid sphere reports the
        # inner surface
        inner_side = (self.inner - r) >= (r - self.outer)
        grad[ok & inner_side] = -hat[ok & inner_side]
        grad[ok & ~inner_side] = hat[ok & ~inner_side]
        return grad


def _channel_frame(axis: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = pts @ axis
    radial = pts - t[..., None] * axis
    rho = np.linalg.norm(radial, axis=-1)
    return t, rho, radial


@dataclass(frozen=True)
class PuncturedShell(Domain):
    """Shell with a straight channel of radius `channel_radius` bored along `axis`.

    The removed material is a half-infinite cylinder starting at the center,
    so both spheres lose a polar cap and the cavity communicates with the
    outside.  Signed distance is exact on the smooth faces and conservative
    (never overstates the distance) near the sharp rim circles.
    """

    inner: float = 0.5
    outer: float = 0.9
    channel_radius: float = 0.1
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def _cylinder_sdf(self, pts: np.ndarray) -> np.ndarray:
        t, rho, _ = _channel_frame(self.axis, pts)
        ahead = t >= 0
        out = np.empty_like(t)
        out[ahead] = rho[ahead] - self.channel_radius
        lag = ~ahead
        out[lag] = np.hypot(t[lag], np.maximum(rho[lag] - self.channel_radius, 0.0))
        return out

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1)
        shell = np.maximum(self.inner - r, r - self.outer)
        return np.maximum(shell, -self._cylinder_sdf(pts))

    def signed_distance_gradient(self, x: np.ndarray) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1)
        shell = np.maximum(self.inner - r, r - self.outer)
        cyl = self._cylinder_sdf(pts)
        grad = Shell(
            dim=self.dim, bounding_radius=self.bounding_radius,
            inner=self.inner, outer=self.outer,
        ).signed_distance_gradient(pts)
        # wall branch: gradient of -cyl sdf points toward the channel axis
        wall = -cyl > shell
        if np.any(wall):
            t, rho, radial = _channel_frame(self.axis, pts[wall])
            g = np.zeros_like(pts[wall])
            pos = rho > 0
            g[pos] = -radial[pos] / rho[pos, None]
            g[~pos] = _perp_direction(self.axis)
            grad[wall] = g
        return grad


def _perp_direction(axis: np.ndarray) -> np.ndarray:
    trial = np.zeros_like(axis)
    trial[np.argmin(np.abs(axis))] = 1.0
    v = trial - (trial @ axis) * axis
    return v / np.linalg.norm(v)


def make_ball(radius: float, dim: int = 3) -> Ball:
    if dim < 3:
        raise ValueError(f"dimension must be >= 3, got {dim}")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return Ball(dim=dim, bounding_radius=radius, label=f"ball[{radius:g}]", radius=radius)


def make_shell(inner: float, outer: float, dim: int = 3) -> Shell:
    if dim < 3:
        raise ValueError(f"dimension must be >= 3, got {dim}")
    if not 0 < inner < outer:
        raise ValueError(f"need 0 < inner < outer, got {inner}, {outer}")
    return Shell(
        dim=dim, bounding_radius=outer, label=f"shell[{inner:g},{outer:g}]",
        inner=inner, outer=outer,
    )


def make_punctured_shell(
    inner: float,
    outer: float,
    channel_radius: float,
    axis: np.ndarray | None = None,
    dim: int = 3,
) -> PuncturedShell:
    """Shell with a bored channel; validates that the cavity is reachable."""
    if dim != 3:
        raise ValueError("punctured shells are implemented in dimension 3 only")
    if not 0 < inner < outer:
        raise ValueError(f"need 0 < inner < outer, got {inner}, {outer}")
    if not 0 < channel_radius < inner:
        raise ValueError(
            f"channel radius must lie in (0, inner), got {channel_radius}"
        )
    a = np.array([0.0, 0.0, 1.0]) if axis is None else np.asarray(axis, dtype=float)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("channel axis must be a nonzero vector")
    a = a / norm
    dom = PuncturedShell(
        dim=3, bounding_radius=outer,
        label=f"punctured[{inner:g},{outer:g},{channel_radius:g}]",
        inner=inner, outer=outer, channel_radius=channel_radius, axis=a,
    )
    # the straight ray along the axis must run from the cavity to infinity
    # through exterior points only
    ray = np.linspace(0.0, 2.0 * outer + 1.0, 512)[:, None] * a[None, :]
    if not np.all(dom.signed_distance(ray) > 0):
        raise ValueError("channel does not connect the cavity to the outside")
    return dom


@dataclass(frozen=True)
class BoundaryQuadrature:
    """Nodes, exterior-pointing unit normals, and weights on the obstacle boundary."""

    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.nodes) == len(self.normals) == len(self.weights)):
            raise ValueError("nodes, normals and weights must have equal length")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def area(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * np.asarray(values, dtype=float)))


def unit_sphere_quadrature(d: int, n_polar: int) -> tuple[np.ndarray, np.ndarray]:
    """Product quadrature on the unit sphere in R^d.

    Gauss-Jacobi nodes in each polar angle (weight sin^(k) theta integrated
    exactly) and a uniform azimuth, applied recursively; weights sum to the
    exact sphere area for every d >= 3.
    """
    if d < 2:
        raise ValueError("sphere quadrature needs d >= 2")
    if d == 2:
        m = max(4, 2 * n_polar)
        ang = (np.arange(m) + 0.5) * (2 * math.pi / m)
        pts = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        return pts, np.full(m, 2 * math.pi / m)
    alpha = (d - 3) / 2.0
    u, w = roots_jacobi(n_polar, alpha, alpha)
    sub_pts, sub_w = unit_sphere_quadrature(d - 1, n_polar)
    sin_t = np.sqrt(np.maximum(1.0 - u**2, 0.0))
    pts = np.concatenate(
        [
            sin_t[:, None, None] * sub_pts[None, :, :],
            np.broadcast_to(u[:, None, None], (n_polar, len(sub_pts), 1)),
        ],
        axis=-1,
    ).reshape(-1, d)
    weights = (w[:, None] * sub_w[None, :]).reshape(-1)
    return pts, weights


def _sphere_facet(radius: float, d: int, n_polar: int, outward: bool) -> BoundaryQuadrature:
    pts, w = unit_sphere_quadrature(d, n_polar)
    sign = 1.0 if outward else -1.0
    return BoundaryQuadrature(
        nodes=radius * pts, normals=sign * pts, weights=radius ** (d - 1) * w
    )


def _merge(parts: list[BoundaryQuadrature]) -> BoundaryQuadrature:
    return BoundaryQuadrature(
        nodes=np.concatenate([p.nodes for p in parts]),
        normals=np.concatenate([p.normals for p in parts]),
        weights=np.concatenate([p.weights for p in parts]),
    )


def _rotation_to(axis: np.ndarray) -> np.ndarray:
    """Orthogonal matrix mapping e_z to the given unit axis."""
    ez = np.array([0.0, 0.0, 1.0])
    v = np.cross(ez, axis)
    s = np.linalg.norm(v)
    c = float(ez @ axis)
    if s < 1e-14:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


def _punctured_sphere_part(
    dom: PuncturedShell, radius: float, outward: bool, n_polar: int
) -> BoundaryQuadrature:
    # latitude bands with exact band areas; nodes whose band center falls in
    # the channel are dropped, which resolves the rim to O(band width)
    n_theta = n_polar
    n_phi = 2 * n_polar
    edges = np.linspace(0.0, math.pi, n_theta + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    phi = (np.arange(n_phi) + 0.5) * (2 * math.pi / n_phi)
    theta_g, phi_g = np.meshgrid(centers, phi, indexing="ij")
    w_g = np.broadcast_to(band[:, None], theta_g.shape) * (
        radius**2 * 2 * math.pi / n_phi
    )
    local = np.stack(
        [
            np.sin(theta_g) * np.cos(phi_g),
            np.sin(theta_g) * np.sin(phi_g),
            np.cos(theta_g),
        ],
        axis=-1,
    ).reshape(-1, 3)
    rot = _rotation_to(dom.axis)
    dirs = local @ rot.T
    nodes = radius * dirs
    t, rho, _ = _channel_frame(dom.axis, nodes)
    keep = ~((t > 0) & (rho < dom.channel_radius))
    sign = 1.0 if outward else -1.0
    return BoundaryQuadrature(
        nodes=nodes[keep], normals=sign * dirs[keep], weights=w_g.reshape(-1)[keep]
    )


def _channel_wall_part(dom: PuncturedShell, n_polar: int) -> BoundaryQuadrature:
    eps = dom.channel_radius
    t_lo = math.sqrt(dom.inner**2 - eps**2)
    t_hi = math.sqrt(dom.outer**2 - eps**2)
    n_t = max(4, n_polar // 2)
    n_phi = 2 * n_polar
    t = t_lo + (np.arange(n_t) + 0.5) * (t_hi - t_lo) / n_t
    phi = (np.arange(n_phi) + 0.5) * (2 * math.pi / n_phi)
    t_g, phi_g = np.meshgrid(t, phi, indexing="ij")
    local = np.stack(
        [eps * np.cos(phi_g), eps * np.sin(phi_g), t_g], axis=-1
    ).reshape(-1, 3)
    radial = np.stack(
        [np.cos(phi_g), np.sin(phi_g), np.zeros_like(phi_g)], axis=-1
    ).reshape(-1, 3)
    rot = _rotation_to(dom.axis)
    w = np.full(len(local), eps * (t_hi - t_lo) / n_t * 2 * math.pi / n_phi)
    return BoundaryQuadrature(
        nodes=local @ rot.T, normals=-(radial @ rot.T), weights=w
    )


def boundary_quadrature(dom: Domain, n_polar: int = 64) -> BoundaryQuadrature:
    """Quadrature over the obstacle boundary with exterior-pointing normals."""
    if isinstance(dom, PuncturedShell):
        return _merge(
            [
                _punctured_sphere_part(dom, dom.inner, False, n_polar),
                _punctured_sphere_part(dom, dom.outer, True, n_polar),
                _channel_wall_part(dom, n_polar),
            ]
        )
    if isinstance(dom, Shell):
        return _merge(
            [
                _sphere_facet(dom.inner, dom.dim, n_polar, outward=False),
                _sphere_facet(dom.outer, dom.dim, n_polar, outward=True),
            ]
        )
    if isinstance(dom, Ball):
        return _sphere_facet(dom.radius, dom.dim, n_polar, outward=True)
    raise TypeError(f"no quadrature rule for {type(dom).__name__}")


def surface_measure(dom: Domain, n_polar: int = 64) -> float:
    """Total boundary area of the obstacle."""
    return boundary_quadrature(dom, n_polar).area()


def inward_normal(dom: Domain, y: np.ndarray) -> np.ndarray:
    """Unit normal at boundary point(s) y pointing from D into the exterior."""
    pts = _as_points(y, dom.dim)
    grad = dom.signed_distance_gradient(pts)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    out = grad / np.where(norms > 0, norms, 1.0)
    return out[0] if np.asarray(y).ndim == 1 else out


@dataclass(frozen=True)
class FluxSpec:
    """Boundary flux density h for the co-normal condition a grad(u) . n = -h."""

    fn: Callable[[np.ndarray], np.ndarray]
    label: str = "flux"

    def values(self, nodes: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.fn(np.atleast_2d(nodes)), dtype=float)
        return np.broadcast_to(vals, (len(np.atleast_2d(nodes)),)).copy()

    def check_admissible(self, quad: BoundaryQuadrature) -> None:
        vals = self.values(quad.nodes)
        if np.any(vals < -1e-12):
            raise FluxError(f"{self.label}: flux density must be nonnegative")
        if quad.integrate(vals) <= 0:
            raise FluxError(f"{self.label}: flux density must not vanish identically")


def uniform_flux(amplitude: float = 1.0) -> FluxSpec:
    return FluxSpec(
        fn=lambda pts: np.full(len(np.atleast_2d(pts)), float(amplitude)),
        label=f"uniform[{amplitude:g}]",
    )


def hemisphere_flux(amplitude: float = 2.0, axis: np.ndarray | None = None) -> FluxSpec:
    """Flux supported on the half boundary with positive axis component."""
    a = np.array([0.0, 0.0, 1.0]) if axis is None else np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)

    def fn(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.where(pts @ a > 0, float(amplitude), 0.0)

    return FluxSpec(fn=fn, label=f"hemisphere[{amplitude:g}]")


def polyline_is_exterior(dom: Domain, waypoints: np.ndarray, samples: int = 64) -> bool:
    """True when every densely sampled point along the polyline is exterior."""
    pts = _as_points(waypoints, dom.dim)
    for a, b in zip(pts[:-1], pts[1:]):
        s = np.linspace(0.0, 1.0, samples)[:, None]
        seg = (1 - s) * a[None, :] + s * b[None, :]
        if np.any(dom.signed_distance(seg) <= 0):
            return False
    return True


def dump_point_cloud(dom: Domain, path: str, n_polar: int = 64) -> None:
    """Write boundary nodes as plain text: coordinates, normal, weight."""
    quad = boundary_quadrature(dom, n_polar)
    cols = np.hstack([quad.nodes, quad.normals, quad.weights[:, None]])
    header = f"{dom.label}: x({dom.dim}) normal({dom.dim}) weight"
    np.savetxt(path, cols, header=header)
