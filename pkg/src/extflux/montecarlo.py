"""Sampling engine for exterior diffusions with co-normal reflection.

Paths advance by Euler steps whose Gaussian part has per-coordinate
variance 2*dt: the full second-order operator, not half of it, generates
the process.  The drift for the weighted operator is grad(a) + a grad(Q),
the unique choice making exp(Q) dx invariant.

Three sources of discretization error get explicit treatment:

* sphere crossings inside a step are detected with a Brownian-bridge
  test, removing the O(sqrt(dt)) hitting bias a pure endpoint check has;
* steps shrink near every surface that matters (obstacle, target
  spheres, region boundaries) through a quadratic distance controller,
  and grow far away, so escaping to the truncation radius stays cheap;
* paths that reach the truncation radius are closed out with exact
  harmonic bookkeeping: fractional hit weights, a Bernoulli teleport for
  circuit legs, or a mean-value kernel continuation for occupations.

Randomness is counter-based: every fixed-size batch of paths owns one
Philox stream keyed by (seed, batch index), so results are bitwise
reproducible and independent of the thread count used to run batches.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .closedform import dirichlet_green_exterior_ball, free_green, hit_prob_ball
from .geometry import Domain, unit_sphere_quadrature

__all__ = [
    "PathConfig",
    "PathRecord",
    "OccupationEstimate",
    "CircuitStats",
    "TwoSidedReport",
    "BallRegion",
    "ShellRegion",
    "simulate_reflected_path",
    "estimate_hit_prob",
    "estimate_occupation",
    "estimate_green_dirichlet",
    "circuit_decomposition",
    "verify_twosided_hitting",
    "diffusion_normalization_probe",
]


@dataclass(frozen=True)
class PathConfig:
    """Step control and budgets for one sampling run.

    `dt` is the near-boundary time step; the controller enlarges it
    quadratically with the distance to the nearest relevant surface
    (`dt * (dist / resolve_distance)**2`), so halving `dt` halves every
    step on the path.  `truncation_radius` is where paths are closed out
    analytically.
    """

    dt: float = 5e-5
    truncation_radius: float = 32.0
    max_steps: int = 200_000
    seed: int = 20260815
    samples: int = 10_000
    batch_size: int = 4096
    resolve_distance: float = 0.05
    threads: int = 1

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.truncation_radius <= 0:
            raise ValueError("truncation radius must be positive")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch size and step budget must be positive")
        if self.resolve_distance <= 0:
            raise ValueError("resolve distance must be positive")

    def step_for_distance(self, dist: np.ndarray) -> np.ndarray:
        scaled = np.maximum(dist, self.resolve_distance) / self.resolve_distance
        return self.dt * scaled**2


@dataclass
class OccupationEstimate:
    """Sample mean with its error bar and the truncation bookkeeping."""

    mean: float
    stderr: float
    samples: int
    truncation_corrected: bool
    bias_bound: float = 0.0
    budget_exhausted: int = 0

    def __post_init__(self) -> None:
        if self.stderr < 0:
            raise ValueError("standard error cannot be negative")

    def within(self, target: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - target) <= n_se * self.stderr + slack + self.bias_bound


# ---------------------------------------------------------------------------
# regions where occupation time is accumulated


@dataclass(frozen=True)
class BallRegion:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("region radius must be positive")

    @property
    def volume(self) -> float:
        return 4.0 * math.pi * self.radius**3 / 3.0

    def radial_span(self) -> tuple[float, float]:
        c = float(np.linalg.norm(self.center))
        return max(c - self.radius, 0.0), c + self.radius

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - self.center, axis=-1) <= self.radius

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(pts - self.center, axis=-1) - self.radius)

    def kernel_integral(
        self, kernel: Callable[[np.ndarray], np.ndarray], n_radial: int = 32, n_polar: int = 24
    ) -> float:
        """Product quadrature of a smooth kernel over the ball."""
        from scipy.special import roots_legendre

        s, w = roots_legendre(n_radial)
        s = 0.5 * self.radius * (s + 1.0)
        w = 0.5 * self.radius * w
        omega, w_sph = unit_sphere_quadrature(3, n_polar)
        pts = self.center[None, None, :] + s[:, None, None] * omega[None, :, :]
        vals = np.asarray(kernel(pts.reshape(-1, 3))).reshape(len(s), len(omega))
        return float(np.einsum("i,j,ij->", w * s**2, w_sph, vals))

    def tail_kernel_integral(self, kernel_at_center: Callable[[np.ndarray], np.ndarray], pts: np.ndarray) -> np.ndarray:
        # mean value: the kernels used here are harmonic across the ball
        # whenever the source points sit outside it
        return self.volume * np.asarray(kernel_at_center(pts))


@dataclass(frozen=True)
class ShellRegion:
    """Spherical shell around the origin."""

    inner: float
    outer: float

    def __post_init__(self) -> None:
        if not 0 < self.inner < self.outer:
            raise ValueError("need 0 < inner < outer")

    @property
    def volume(self) -> float:
        return 4.0 * math.pi * (self.outer**3 - self.inner**3) / 3.0

    def radial_span(self) -> tuple[float, float]:
        return self.inner, self.outer

    def contains(self, pts: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(pts, axis=-1)
        return (r >= self.inner) & (r <= self.outer)

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(pts, axis=-1)
        return np.minimum(np.abs(r - self.inner), np.abs(r - self.outer))

    def kernel_integral(
        self, kernel: Callable[[np.ndarray], np.ndarray], n_radial: int = 32, n_polar: int = 24
    ) -> float:
        from scipy.special import roots_legendre

        s, w = roots_legendre(n_radial)
        s = 0.5 * (self.outer - self.inner) * (s + 1.0) + self.inner
        w = 0.5 * (self.outer - self.inner) * w
        omega, w_sph = unit_sphere_quadrature(3, n_polar)
        pts = s[:, None, None] * omega[None, :, :]
        vals = np.asarray(kernel(pts.reshape(-1, 3))).reshape(len(s), len(omega))
        return float(np.einsum("i,j,ij->", w * s**2, w_sph, vals))


def _free_shell_tail(region: ShellRegion, pts: np.ndarray) -> np.ndarray:
    # exact radial integral of the free kernel over the shell, valid for
    # source radii beyond the outer shell radius
    r = np.linalg.norm(pts, axis=-1)
    return (region.outer**3 - region.inner**3) / (3.0 * r)


def _dirichlet_shell_tail(region: ShellRegion, pts: np.ndarray, radius: float) -> np.ndarray:
    r = np.linalg.norm(pts, axis=-1)
    cubic = (region.outer**3 - region.inner**3) / 3.0
    quad = radius * (region.outer**2 - region.inner**2) / 2.0
    return (cubic - quad) / r


def _occupation_tail(region, pts: np.ndarray, kill_radius: float | None) -> np.ndarray:
    """Expected future occupation of the region for paths closed out at `pts`."""
    if len(pts) == 0:
        return np.zeros(0)
    if kill_radius is None:
        if isinstance(region, BallRegion):
            return region.tail_kernel_integral(
                lambda z: free_green(z, region.center, 3), pts
            )
        return _free_shell_tail(region, pts)
    if isinstance(region, BallRegion):
        return region.tail_kernel_integral(
            lambda z: dirichlet_green_exterior_ball(z, region.center, kill_radius, 3), pts
        )
    return _dirichlet_shell_tail(region, pts, kill_radius)


# ---------------------------------------------------------------------------
# stepping primitives


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _drift(op, pts: np.ndarray) -> np.ndarray:
    # invariant-measure drift grad(a) + a grad(Q); OperatorSpec stores its
    # negative under the first-order-coefficient sign convention
    return -op.drift_coefficient(pts)


def _root_scale(op, pts: np.ndarray) -> np.ndarray:
    return np.sqrt(op.a_scalar(pts))


def _down_crossing(
    x0: np.ndarray,
    x1: np.ndarray,
    level: float,
    dt: np.ndarray,
    u: np.ndarray,
    diffusion: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Did the segment reach radius `level` from above, and where.

    Endpoint checks catch actual penetrations; the bridge factor
    exp(-d0*d1/(a*dt)) catches excursions that dipped below the level
    between samples.  Crossing points are snapped onto the sphere.
    """
    r0 = np.linalg.norm(x0, axis=-1)
    r1 = np.linalg.norm(x1, axis=-1)
    inside = r1 <= level
    d0 = np.maximum(r0 - level, 0.0)
    d1 = np.maximum(r1 - level, 0.0)
    with np.errstate(over="ignore", divide="ignore"):
        p = np.exp(-d0 * d1 / (diffusion * dt))
    crossed = inside | (u < p)
    dx = x1 - x0
    # first intersection of the segment with the sphere when the endpoint
    # penetrates; distance-weighted interpolation for bridge crossings
    a = np.sum(dx * dx, axis=-1)
    b = 2.0 * np.sum(x0 * dx, axis=-1)
    c = r0**2 - level**2
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_pen = (-b - np.sqrt(disc)) / (2.0 * np.where(a > 0, a, 1.0))
        s_bridge = d0 / np.where(d0 + d1 > 0, d0 + d1, 1.0)
    s = np.clip(np.where(inside, s_pen, s_bridge), 0.0, 1.0)
    xc = level * _unit_rows(x0 + s[:, None] * dx)
    return crossed, xc


def _up_crossing(
    x0: np.ndarray,
    x1: np.ndarray,
    level: float,
    dt: np.ndarray,
    u: np.ndarray,
    diffusion: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    r0 = np.linalg.norm(x0, axis=-1)
    r1 = np.linalg.norm(x1, axis=-1)
    outside = r1 >= level
    d0 = np.maximum(level - r0, 0.0)
    d1 = np.maximum(level - r1, 0.0)
    with np.errstate(over="ignore", divide="ignore"):
        p = np.exp(-d0 * d1 / (diffusion * dt))
    crossed = outside | (u < p)
    dx = x1 - x0
    a = np.sum(dx * dx, axis=-1)
    b = 2.0 * np.sum(x0 * dx, axis=-1)
    c = r0**2 - level**2
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_pen = (-b + np.sqrt(disc)) / (2.0 * np.where(a > 0, a, 1.0))
        s_bridge = d0 / np.where(d0 + d1 > 0, d0 + d1, 1.0)
    s = np.clip(np.where(outside, s_pen, s_bridge), 0.0, 1.0)
    xc = level * _unit_rows(x0 + s[:, None] * dx)
    return crossed, xc


def _resolve_reflection(dom: Domain, pts: np.ndarray, max_mirror: int = 6) -> tuple[np.ndarray, int]:
    """Mirror penetrating points across the boundary until they sit outside.

    Residual penetrations after the mirror budget are projected to the
    surface and counted; a noticeable count means dt is too large for the
    local feature size (thin channels).
    """
    hard = 0
    out = pts
    for _ in range(max_mirror):
        sd = dom.signed_distance(out)
        bad = sd < 0
        if not np.any(bad):
            return out, hard
        g = dom.signed_distance_gradient(out[bad])
        out = out.copy()
        out[bad] = out[bad] - 2.0 * sd[bad, None] * g
    sd = dom.signed_distance(out)
    bad = sd < 0
    if np.any(bad):
        hard = int(bad.sum())
        g = dom.signed_distance_gradient(out[bad])
        out = out.copy()
        out[bad] = out[bad] - (sd[bad, None] - 1e-9) * g
    return out, hard


def _batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    key = np.array([seed, batch_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _batch_sizes(samples: int, batch_size: int) -> list[int]:
    full, rest = divmod(samples, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def _run_batches(worker, cfg: PathConfig) -> list:
    sizes = _batch_sizes(cfg.samples, cfg.batch_size)
    if cfg.threads <= 1:
        return [worker(i, n) for i, n in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = [pool.submit(worker, i, n) for i, n in enumerate(sizes)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# absorption-style walks: hit probabilities and occupation functionals


@dataclass
class _AbsorptionResult:
    weights: np.ndarray
    occupation: np.ndarray
    hits: np.ndarray
    truncated: np.ndarray
    exhausted: np.ndarray
    exit_points: np.ndarray


def _absorption_batch(
    batch_index: int,
    n_paths: int,
    start: np.ndarray,
    op,
    cfg: PathConfig,
    dom: Domain | None,
    kill_radius: float | None,
    region,
    tail_prob: Callable[[np.ndarray], np.ndarray] | None,
) -> _AbsorptionResult:
    rng = _batch_rng(cfg.seed, batch_index)
    x = np.tile(np.asarray(start, dtype=float), (n_paths, 1))
    idx = np.arange(n_paths)
    occupation = np.zeros(n_paths)
    weights = np.zeros(n_paths)
    hits = np.zeros(n_paths, dtype=bool)
    truncated = np.zeros(n_paths, dtype=bool)
    exhausted = np.zeros(n_paths, dtype=bool)
    exit_points = np.zeros((n_paths, 3))
    steps = 0
    while len(idx) > 0:
        r = np.linalg.norm(x, axis=-1)
        dist = np.full(len(idx), np.inf)
        if kill_radius is not None:
            dist = np.minimum(dist, np.abs(r - kill_radius))
        if region is not None:
            dist = np.minimum(dist, region.boundary_distance(x))
        if dom is not None:
            dist = np.minimum(dist, np.abs(dom.signed_distance(x)))
        dist = np.where(np.isfinite(dist), dist, r)
        dt = cfg.step_for_distance(dist)
        a_here = op.a_scalar(x)
        xi = rng.standard_normal((len(idx), 3))
        u = rng.random(len(idx))
        prop = (
            x
            + _drift(op, x) * dt[:, None]
            + np.sqrt(2.0 * a_here * dt)[:, None] * xi
        )
        if dom is not None:
            prop, _ = _resolve_reflection(dom, prop)
        inA0 = region.contains(x) if region is not None else None
        killed = np.zeros(len(idx), dtype=bool)
        if kill_radius is not None:
            killed, xc = _down_crossing(x, prop, kill_radius, dt, u, a_here)
            prop = np.where(killed[:, None], xc, prop)
        if region is not None:
            # trapezoid in float; boolean + boolean would OR, not add
            inA1 = region.contains(prop)
            occupation[idx] += dt * 0.5 * (
                inA0.astype(float) + inA1.astype(float)
            )
        r1 = np.linalg.norm(prop, axis=-1)
        out = (~killed) & (r1 >= cfg.truncation_radius)
        x = prop
        if np.any(killed):
            k = idx[killed]
            hits[k] = True
            weights[k] = 1.0
            exit_points[k] = x[killed]
        if np.any(out):
            k = idx[out]
            truncated[k] = True
            exit_points[k] = x[out]
            if tail_prob is not None:
                weights[k] = tail_prob(x[out])
        done = killed | out
        steps += 1
        if steps >= cfg.max_steps:
            k = idx[~done]
            exhausted[k] = True
            exit_points[k] = x[~done]
            if tail_prob is not None:
                weights[k] = tail_prob(x[~done])
            break
        if np.any(done):
            keep = ~done
            x = x[keep]
            idx = idx[keep]
    return _AbsorptionResult(weights, occupation, hits, truncated, exhausted, exit_points)


def _combine_absorption(results: list[_AbsorptionResult]) -> _AbsorptionResult:
    return _AbsorptionResult(
        weights=np.concatenate([r.weights for r in results]),
        occupation=np.concatenate([r.occupation for r in results]),
        hits=np.concatenate([r.hits for r in results]),
        truncated=np.concatenate([r.truncated for r in results]),
        exhausted=np.concatenate([r.exhausted for r in results]),
        exit_points=np.concatenate([r.exit_points for r in results]),
    )


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def estimate_hit_prob(
    dom: Domain | None,
    op,
    start: np.ndarray,
    target_radius: float,
    cfg: PathConfig,
    tail_prob: Callable[[np.ndarray], np.ndarray] | None = None,
) -> OccupationEstimate:
    """Probability of ever reaching the closed ball of `target_radius`.

    Paths that reach the truncation radius first contribute their exact
    return probability as a fractional weight instead of a hard zero,
    which removes the truncation bias entirely in the pure-diffusion case.
    The default tail assumes the operator has decayed to the plain
    Laplacian out at the truncation radius; pass `tail_prob` when it has
    not.
    """
    start = np.asarray(start, dtype=float)
    if np.linalg.norm(start) <= target_radius:
        raise ValueError("start must lie outside the target ball")
    if dom is not None and dom.bounding_radius > target_radius + 1e-12:
        raise ValueError("obstacle must fit inside the target sphere")
    if cfg.truncation_radius <= np.linalg.norm(start):
        raise ValueError("truncation radius must exceed the start radius")
    if tail_prob is None:
        def tail_prob(pts: np.ndarray) -> np.ndarray:
            return hit_prob_ball(np.linalg.norm(pts, axis=-1), target_radius, 3)

    res = _combine_absorption(
        _run_batches(
            lambda i, n: _absorption_batch(
                i, n, start, op, cfg, None, target_radius, None, tail_prob
            ),
            cfg,
        )
    )
    mean, se = _mean_se(res.weights)
    return OccupationEstimate(
        mean=mean,
        stderr=se,
        samples=cfg.samples,
        truncation_corrected=True,
        budget_exhausted=int(res.exhausted.sum()),
    )


def estimate_occupation(
    dom: Domain | None,
    op,
    start: np.ndarray,
    region,
    cfg: PathConfig,
) -> OccupationEstimate:
    """Expected total time spent in `region` by the (reflected) diffusion.

    Truncated paths receive the exact mean-value continuation of the free
    kernel over the region; with an obstacle present the continuation
    omits reflected returns, and that remainder is reported as a bias
    bound (escape probability from the truncation sphere times the peak
    kernel mass of the region).
    """
    start = np.asarray(start, dtype=float)
    lo, hi = region.radial_span()
    if cfg.truncation_radius <= hi:
        raise ValueError("truncation radius must clear the region")
    if dom is not None:
        probe = region.kernel_integral(lambda y: (dom.signed_distance(y) < 0).astype(float))
        if probe > 1e-9 * region.volume:
            raise ValueError("region overlaps the obstacle")

    res = _combine_absorption(
        _run_batches(
            lambda i, n: _absorption_batch(
                i, n, start, op, cfg, dom, None, region, None
            ),
            cfg,
        )
    )
    occ = res.occupation
    closed = res.truncated | res.exhausted
    if np.any(closed):
        occ = occ.copy()
        occ[closed] += _occupation_tail(region, res.exit_points[closed], None)
    mean, se = _mean_se(occ)
    bias = 0.0
    if dom is not None and np.any(closed):
        # escape-sphere returns the free continuation cannot see
        back = hit_prob_ball(
            float(np.linalg.norm(res.exit_points[closed], axis=-1).min()),
            dom.bounding_radius,
            3,
        )
        gap = max(lo - dom.bounding_radius, 1e-6)
        bias = float(back * region.volume * free_green(np.zeros(3), np.array([gap, 0, 0]), 3))
    return OccupationEstimate(
        mean=mean,
        stderr=se,
        samples=cfg.samples,
        truncation_corrected=bool(np.any(closed)),
        bias_bound=bias,
        budget_exhausted=int(res.exhausted.sum()),
    )


def estimate_green_dirichlet(
    start: np.ndarray,
    region,
    radius: float,
    op,
    cfg: PathConfig,
) -> OccupationEstimate:
    """Occupation of `region` before the path first meets the ball of `radius`.

    Truncated paths are continued with the mean value of the killed
    kernel, which is exact for the plain Laplacian and accurate to the
    operator's far-field decay otherwise.
    """
    start = np.asarray(start, dtype=float)
    if np.linalg.norm(start) <= radius:
        raise ValueError("start must lie outside the killing ball")
    lo, hi = region.radial_span()
    if lo < radius:
        raise ValueError("region must avoid the killing ball")
    if cfg.truncation_radius <= hi:
        raise ValueError("truncation radius must clear the region")

    res = _combine_absorption(
        _run_batches(
            lambda i, n: _absorption_batch(
                i, n, start, op, cfg, None, radius, region, None
            ),
            cfg,
        )
    )
    occ = res.occupation
    closed = res.truncated | res.exhausted
    if np.any(closed):
        occ = occ.copy()
        occ[closed] += _occupation_tail(region, res.exit_points[closed], radius)
    mean, se = _mean_se(occ)
    return OccupationEstimate(
        mean=mean,
        stderr=se,
        samples=cfg.samples,
        truncation_corrected=bool(np.any(closed)),
        budget_exhausted=int(res.exhausted.sum()),
    )


# ---------------------------------------------------------------------------
# circuits between two spheres


@dataclass
class CircuitStats:
    """Alternating sphere-crossing bookkeeping over a batch of paths.

    `survival_counts[k]` is the number of paths whose (k+1)-th outward
    crossing happened; the even-indexed return legs live inside the outer
    sphere by construction, so `contained_occupation` stays exactly zero
    whenever the region sits beyond it.
    """

    samples: int
    outer_level: float
    survival_counts: np.ndarray
    occupation_by_circuit: np.ndarray
    contained_occupation: float
    entry_points: np.ndarray
    escapes: int
    budget_exhausted: int

    @property
    def total_occupation(self) -> float:
        return float(self.occupation_by_circuit.sum())

    def survival_freq(self, n: int) -> float:
        return float(self.survival_counts[n - 1]) / self.samples

    def survival_se(self, n: int) -> float:
        p = self.survival_freq(n)
        return math.sqrt(max(p * (1.0 - p), 0.0) / self.samples)


def _circuit_batch(
    batch_index: int,
    n_paths: int,
    start: np.ndarray,
    op,
    cfg: PathConfig,
    dom: Domain | None,
    base_radius: float,
    outer_level: float,
    region,
    tail_prob: Callable[[np.ndarray], np.ndarray],
    n_record: int,
    max_circuits: int,
):
    rng = _batch_rng(cfg.seed, batch_index)
    x = np.tile(np.asarray(start, dtype=float), (n_paths, 1))
    idx = np.arange(n_paths)
    # phase 0: heading out to the outer sphere (contained leg);
    # phase 1: wandering until the base sphere or escape
    phase = np.zeros(n_paths, dtype=np.int8)
    circuit = np.zeros(n_paths, dtype=np.int64)  # outward crossings so far
    survival = np.zeros(max_circuits, dtype=np.int64)
    occupation = np.zeros((n_paths, max_circuits))
    contained_occ = 0.0
    entries: list[np.ndarray] = []
    escapes = 0
    exhausted = 0
    steps = 0
    while len(idx) > 0:
        ph = phase[idx]
        r = np.linalg.norm(x, axis=-1)
        dist = np.where(ph == 0, np.abs(outer_level - r), np.abs(r - base_radius))
        if region is not None:
            dist = np.minimum(dist, region.boundary_distance(x))
        if dom is not None:
            dist = np.minimum(dist, np.abs(dom.signed_distance(x)))
        dt = cfg.step_for_distance(dist)
        a_here = op.a_scalar(x)
        xi = rng.standard_normal((len(idx), 3))
        u = rng.random(len(idx))
        prop = (
            x
            + _drift(op, x) * dt[:, None]
            + np.sqrt(2.0 * a_here * dt)[:, None] * xi
        )
        if dom is not None and np.any(ph == 0):
            fixed, _ = _resolve_reflection(dom, prop[ph == 0])
            prop[ph == 0] = fixed

        out_mask = ph == 0
        if np.any(out_mask):
            crossed, xc = _up_crossing(
                x[out_mask], prop[out_mask], outer_level,
                dt[out_mask], u[out_mask], a_here[out_mask],
            )
            if np.any(crossed):
                rows = np.flatnonzero(out_mask)[crossed]
                prop[rows] = xc[crossed]
                k = idx[rows]
                # several lanes can cross in one step; plain fancy-index
                # increment would collapse the duplicates
                np.add.at(survival, np.minimum(circuit[k], max_circuits - 1), 1)
                circuit[k] += 1
                phase[k] = 1
                if len(entries) < n_record:
                    entries.extend(xc[crossed][: n_record - len(entries)])

        back_mask = (phase[idx] == 1) & ~out_mask
        killed = np.zeros(len(idx), dtype=bool)
        if np.any(back_mask):
            crossed, xc = _down_crossing(
                x[back_mask], prop[back_mask], base_radius,
                dt[back_mask], u[back_mask], a_here[back_mask],
            )
            rows = np.flatnonzero(back_mask)[crossed]
            prop[rows] = xc[crossed]
            phase[idx[rows]] = 0
            if region is not None:
                inA0 = region.contains(x[back_mask]).astype(float)
                inA1 = region.contains(prop[back_mask]).astype(float)
                contrib = dt[back_mask] * 0.5 * (inA0 + inA1)
                k = idx[back_mask]
                col = np.minimum(circuit[k] - 1, max_circuits - 1)
                occupation[k, col] += contrib
        if region is not None and np.any(out_mask):
            # containment audit: these legs never leave the outer sphere,
            # so a region beyond it cannot collect time here
            contained_occ += float(
                np.sum(dt[out_mask] * region.contains(prop[out_mask]))
            )

        r1 = np.linalg.norm(prop, axis=-1)
        trunc = (phase[idx] == 1) & (r1 >= cfg.truncation_radius)
        dead = np.zeros(len(idx), dtype=bool)
        if np.any(trunc):
            rows = np.flatnonzero(trunc)
            p_back = tail_prob(prop[rows])
            comeback = rng.random(len(rows)) < p_back
            if np.any(comeback):
                # exact-in-law closure for radial setups: returning paths
                # re-enter uniformly on the base sphere
                back_rows = rows[comeback]
                direction = _unit_rows(rng.standard_normal((len(back_rows), 3)))
                prop[back_rows] = base_radius * direction
                phase[idx[back_rows]] = 0
            dead[rows[~comeback]] = True
            escapes += int((~comeback).sum())
        x = prop
        steps += 1
        if steps >= cfg.max_steps:
            exhausted += len(idx) - int(dead.sum())
            break
        if np.any(dead) or circuit[idx].max(initial=0) >= max_circuits:
            full = circuit[idx] >= max_circuits
            drop = dead | full
            keep = ~drop
            x = x[keep]
            idx = idx[keep]
    entry_arr = np.array(entries) if entries else np.zeros((0, 3))
    return survival, occupation, contained_occ, entry_arr, escapes, exhausted


def circuit_decomposition(
    dom: Domain | None,
    op,
    start: np.ndarray,
    rho: float,
    base_radius: float,
    region,
    cfg: PathConfig,
    *,
    tail_prob: Callable[[np.ndarray], np.ndarray] | None = None,
    max_circuits: int = 8,
    n_record: int = 512,
) -> CircuitStats:
    """Split each path into excursions between the spheres r=R and r=rho*R.

    Odd legs run from the base sphere out (counted on arrival at the
    outer sphere); even legs wander until they touch the base sphere
    again or escape.  Occupation of `region` is credited to the excursion
    in progress, and the region must sit beyond the outer sphere so the
    contained legs provably contribute nothing.
    """
    start = np.asarray(start, dtype=float)
    if rho <= 1.0:
        raise ValueError("outer sphere factor must exceed 1")
    if dom is not None:
        if abs(dom.signed_distance(start[None, :])[0]) > 1e-6:
            raise ValueError("circuit starts must sit on the obstacle boundary")
        if dom.bounding_radius > base_radius + 1e-9:
            raise ValueError("obstacle must fit inside the base sphere")
    outer_level = rho * base_radius
    if region is not None and region.radial_span()[0] <= outer_level:
        raise ValueError("region must lie beyond the outer sphere")
    if cfg.truncation_radius <= outer_level:
        raise ValueError("truncation radius must clear the outer sphere")
    if tail_prob is None:
        def tail_prob(pts: np.ndarray) -> np.ndarray:
            return hit_prob_ball(np.linalg.norm(pts, axis=-1), base_radius, 3)

    parts = _run_batches(
        lambda i, n: _circuit_batch(
            i, n, start, op, cfg, dom, base_radius, outer_level,
            region, tail_prob, n_record, max_circuits,
        ),
        cfg,
    )
    survival = sum(p[0] for p in parts)
    occupation = np.concatenate([p[1] for p in parts])
    contained = float(sum(p[2] for p in parts))
    entries = np.concatenate([p[3] for p in parts])[:n_record]
    escapes = int(sum(p[4] for p in parts))
    exhausted = int(sum(p[5] for p in parts))
    # nested events: surviving to circuit k implies surviving to k-1
    survival = np.minimum.accumulate(np.maximum(survival, 0))
    return CircuitStats(
        samples=cfg.samples,
        outer_level=outer_level,
        survival_counts=survival,
        occupation_by_circuit=occupation.sum(axis=0),
        contained_occupation=contained,
        entry_points=entries,
        escapes=escapes,
        budget_exhausted=exhausted,
    )


@dataclass
class TwoSidedReport:
    """Survival frequencies against powers of the sphere-wise return range."""

    indices: list[int]
    frequencies: list[float]
    stderrs: list[float]
    lower: list[float]
    upper: list[float]
    skipped: list[int]

    @property
    def passed(self) -> bool:
        ok = True
        for f, se, lo, hi in zip(self.frequencies, self.stderrs, self.lower, self.upper):
            ok &= (f >= lo - 3.0 * se) and (f <= hi + 3.0 * se)
        return ok


def verify_twosided_hitting(
    dom: Domain | None,
    op,
    start: np.ndarray,
    probe_radius: float,
    base_radius: float,
    cfg: PathConfig,
    *,
    v_min: float | None = None,
    v_max: float | None = None,
    tail_prob: Callable[[np.ndarray], np.ndarray] | None = None,
    n_max: int = 4,
    min_survivors: int = 50,
) -> TwoSidedReport:
    """Bracket sampled survival frequencies by powers of min/max return odds.

    The bounds default to the exact radial return probability; callers
    with a weighted operator supply `v_min`/`v_max` from a deterministic
    solve of the return potential on the probe sphere.
    """
    if probe_radius <= base_radius:
        raise ValueError("probe sphere must lie outside the base sphere")
    if v_min is None or v_max is None:
        v = hit_prob_ball(probe_radius, base_radius, 3)
        v_min = v if v_min is None else v_min
        v_max = v if v_max is None else v_max
    if not 0.0 < v_min <= v_max < 1.0:
        raise ValueError("return-range bounds must satisfy 0 < min <= max < 1")
    stats = circuit_decomposition(
        dom, op, start, probe_radius / base_radius, base_radius, None, cfg,
        tail_prob=tail_prob, max_circuits=n_max,
    )
    indices, freqs, ses, lower, upper, skipped = [], [], [], [], [], []
    for n in range(1, n_max + 1):
        if stats.survival_counts[n - 1] < min_survivors and n > 1:
            skipped.append(n)
            continue
        indices.append(n)
        freqs.append(stats.survival_freq(n))
        ses.append(stats.survival_se(n))
        lower.append(v_min ** (n - 1))
        upper.append(v_max ** (n - 1))
    return TwoSidedReport(indices, freqs, ses, lower, upper, skipped)


# ---------------------------------------------------------------------------
# single-path reference walker and the normalization probe


@dataclass
class PathRecord:
    positions: np.ndarray
    times: np.ndarray
    exit_reason: str  # "truncated" or "budget"
    reflections: int
    hard_projections: int

    def dump(self, path: str) -> None:
        cols = np.column_stack([self.times, self.positions])
        np.savetxt(path, cols, header=f"t x y z exit={self.exit_reason}")


def simulate_reflected_path(
    dom: Domain | None,
    op,
    start: np.ndarray,
    cfg: PathConfig,
    *,
    record_every: int = 1,
) -> PathRecord:
    """One trajectory, kept simple enough to audit the stepping rules."""
    start = np.asarray(start, dtype=float)
    if dom is not None and dom.signed_distance(start[None, :])[0] < -1e-9:
        raise ValueError("start lies inside the obstacle")
    rng = _batch_rng(cfg.seed, 0)
    x = start.copy()
    t = 0.0
    positions = [x.copy()]
    times = [0.0]
    reflections = 0
    hard = 0
    reason = "budget"
    for step in range(cfg.max_steps):
        dist = np.linalg.norm(x)
        if dom is not None:
            dist = min(dist, abs(float(dom.signed_distance(x[None, :])[0])))
        dt = float(cfg.step_for_distance(np.array([dist]))[0])
        a_here = float(op.a_scalar(x[None, :])[0])
        xi = rng.standard_normal(3)
        x = x + _drift(op, x[None, :])[0] * dt + math.sqrt(2.0 * a_here * dt) * xi
        if dom is not None and dom.signed_distance(x[None, :])[0] < 0:
            fixed, h = _resolve_reflection(dom, x[None, :])
            x = fixed[0]
            reflections += 1
            hard += h
        t += dt
        if step % record_every == 0:
            positions.append(x.copy())
            times.append(t)
        if np.linalg.norm(x) >= cfg.truncation_radius:
            reason = "truncated"
            break
    return PathRecord(
        positions=np.array(positions),
        times=np.array(times),
        exit_reason=reason,
        reflections=reflections,
        hard_projections=hard,
    )


def diffusion_normalization_probe(op, cfg: PathConfig, horizon: float) -> OccupationEstimate:
    """Mean squared displacement over a fixed horizon, scaled by 2*d*t.

    For the drift-free unit-diffusion operator the scaled value is 1
    exactly in expectation, step size independent; this is the release
    guard for the variance convention.
    """
    steps = max(1, int(round(horizon / cfg.dt)))
    t_end = steps * cfg.dt

    def worker(batch_index: int, n: int) -> np.ndarray:
        rng = _batch_rng(cfg.seed, batch_index)
        x = np.zeros((n, 3))
        for _ in range(steps):
            x = (
                x
                + _drift(op, x) * cfg.dt
                + np.sqrt(2.0 * op.a_scalar(x) * cfg.dt)[:, None] * rng.standard_normal((n, 3))
            )
        return np.sum(x * x, axis=-1) / (2.0 * 3.0 * t_end)

    values = np.concatenate(_run_batches(worker, cfg))
    mean, se = _mean_se(values)
    return OccupationEstimate(
        mean=mean, stderr=se, samples=cfg.samples, truncation_corrected=False
    )
