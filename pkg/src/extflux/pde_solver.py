"""Deterministic truncated-domain solves on axisymmetric spherical meshes.

All supported obstacle families (balls, shells, bored shells with the
channel on the polar axis) are rotationally symmetric about e_z, as are the
operator weights, so the three-dimensional exterior problem reduces to a
finite-volume scheme on an (r, theta) mesh.  The radial mesh is built from
breakpoints with geometric fill, which keeps outer-radius doublings
prefix-stable: enlarging the truncation radius appends cells and leaves
every existing node untouched.

The scheme integrates div(e^Q a grad u) over cells, so the assembled matrix
is symmetric by construction and the weighted self-adjointness of the
operator is inherited exactly rather than approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.ndimage as ndimage
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Ball, Domain, FluxSpec, PuncturedShell, Shell

__all__ = [
    "OperatorSpec",
    "laplacian_operator",
    "gaussian_weight_operator",
    "MeshSpec",
    "AxiMesh",
    "TruncatedProblem",
    "LinearSystem",
    "GridField",
    "MinimalSolution",
    "HittingProbResult",
    "GreenResult",
    "CompatibilityReport",
    "SolverError",
    "IterationBudgetError",
    "TruncationDivergenceError",
    "assemble",
    "solve_truncated",
    "solve_minimal",
    "solve_hitting_prob",
    "discrete_green",
    "boundary_representation",
    "neumann_compatibility_check",
]


class SolverError(RuntimeError):
    """Base class for deterministic-solver failures."""


class IterationBudgetError(SolverError):
    """Linear solver did not reach the requested residual."""


class TruncationDivergenceError(SolverError):
    """Outer-radius doubling did not produce shrinking increments."""


# ---------------------------------------------------------------------------
# operator coefficients


@dataclass(frozen=True)
class OperatorSpec:
    """Divergence-form coefficients: L u = e^{-Q} div(e^Q a grad u).

    `a_fn` is the (isotropic) diffusion coefficient; the deterministic
    solver requires isotropy while the sampling code also accepts a full
    matrix through `a_matrix_fn`.  `grad_a_fn` defaults to zero, which is
    exact for the constant-coefficient operators used throughout.
    """

    label: str
    q_fn: Callable[[np.ndarray], np.ndarray]
    grad_q_fn: Callable[[np.ndarray], np.ndarray]
    a_fn: Callable[[np.ndarray], np.ndarray]
    grad_a_fn: Callable[[np.ndarray], np.ndarray] | None = None
    a_matrix_fn: Callable[[np.ndarray], np.ndarray] | None = None
    is_laplacian: bool = False

    def q(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.q_fn(np.atleast_2d(pts)), dtype=float)

    def grad_q(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.grad_q_fn(np.atleast_2d(pts)), dtype=float)

    def a_scalar(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.a_fn(np.atleast_2d(pts)), dtype=float)

    def grad_a(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.grad_a_fn is None:
            return np.zeros_like(pts)
        return np.asarray(self.grad_a_fn(pts), dtype=float)

    def a_matrix(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.a_matrix_fn is not None:
            return np.asarray(self.a_matrix_fn(pts), dtype=float)
        d = pts.shape[-1]
        return self.a_scalar(pts)[:, None, None] * np.eye(d)[None, :, :]

    def drift_coefficient(self, pts: np.ndarray) -> np.ndarray:
        """First-order coefficient b_i = -d_j a_ij - a_ij d_j Q (sign convention
        of the non-divergence form); the sampling drift is its negative."""
        pts = np.atleast_2d(pts)
        return -self.grad_a(pts) - self.a_scalar(pts)[:, None] * self.grad_q(pts)

    def conductance(self, pts: np.ndarray) -> np.ndarray:
        return self.a_scalar(pts) * np.exp(self.q(pts))


def laplacian_operator() -> OperatorSpec:
    return OperatorSpec(
        label="laplacian",
        q_fn=lambda p: np.zeros(len(p)),
        grad_q_fn=lambda p: np.zeros_like(p),
        a_fn=lambda p: np.ones(len(p)),
        is_laplacian=True,
    )


def gaussian_weight_operator(kappa: float = 0.5, width: float = 1.0) -> OperatorSpec:
    """Radial weight Q(x) = kappa * exp(-|x|^2 / width^2) with unit diffusion."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    w2 = float(width) ** 2
    k = float(kappa)

    def q_fn(p: np.ndarray) -> np.ndarray:
        return k * np.exp(-np.sum(p**2, axis=-1) / w2)

    def grad_q_fn(p: np.ndarray) -> np.ndarray:
        return (-2.0 * k / w2) * p * np.exp(-np.sum(p**2, axis=-1) / w2)[..., None]

    return OperatorSpec(
        label=f"gaussian_weight[{kappa:g},{width:g}]",
        q_fn=q_fn,
        grad_q_fn=grad_q_fn,
        a_fn=lambda p: np.ones(len(p)),
        is_laplacian=(kappa == 0.0),
    )


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class MeshSpec:
    """Resolution knobs; `refine` scales every count for convergence studies."""

    cells_per_decade: int = 48
    n_theta: int = 48
    theta_power: float = 1.0
    core_cells: int = 16
    layer_cells: int = 10
    refine: float = 1.0

    def _n(self, base: int) -> int:
        return max(2, int(round(base * self.refine)))

    def log_count(self, a: float, b: float) -> int:
        return max(2, int(round(self._n(self.cells_per_decade) * math.log10(b / a))))


def _theta_faces(spec: MeshSpec) -> np.ndarray:
    n = spec._n(spec.n_theta)
    s = np.linspace(0.0, 1.0, n + 1)
    return math.pi * s**spec.theta_power


def _fill_segment(a: float, b: float, kind: str, spec: MeshSpec) -> np.ndarray:
    if kind == "uniform_core":
        count = spec._n(spec.core_cells)
        return np.linspace(a, b, count + 1)[1:]
    if kind == "uniform_layer":
        count = spec._n(spec.layer_cells)
        return np.linspace(a, b, count + 1)[1:]
    if kind == "log":
        count = spec.log_count(a, b)
        return a * (b / a) ** (np.arange(1, count + 1) / count)
    raise ValueError(f"unknown segment kind {kind!r}")


def _radial_faces(segments: list[tuple[float, str]], start: float, spec: MeshSpec) -> np.ndarray:
    faces = [np.array([start])]
    lo = start
    for hi, kind in segments:
        if hi <= lo:
            raise ValueError("segment breakpoints must increase")
        faces.append(_fill_segment(lo, hi, kind, spec))
        lo = hi
    return np.concatenate(faces)


def _extend_faces(faces: np.ndarray, new_outer: float, spec: MeshSpec) -> np.ndarray:
    return np.concatenate([faces, _fill_segment(faces[-1], new_outer, "log", spec)])


@dataclass(frozen=True)
class AxiMesh:
    """Tensor mesh in (r, polar angle); cells are face-bounded boxes."""

    r_faces: np.ndarray
    t_faces: np.ndarray

    @property
    def nr(self) -> int:
        return len(self.r_faces) - 1

    @property
    def nt(self) -> int:
        return len(self.t_faces) - 1

    @property
    def rc(self) -> np.ndarray:
        return 0.5 * (self.r_faces[:-1] + self.r_faces[1:])

    @property
    def tc(self) -> np.ndarray:
        return 0.5 * (self.t_faces[:-1] + self.t_faces[1:])

    def band(self) -> np.ndarray:
        return np.cos(self.t_faces[:-1]) - np.cos(self.t_faces[1:])

    def volumes(self) -> np.ndarray:
        dr3 = self.r_faces[1:] ** 3 - self.r_faces[:-1] ** 3
        return (2.0 * math.pi / 3.0) * dr3[:, None] * self.band()[None, :]

    def area_radial(self) -> np.ndarray:
        # face i separates cells i-1 and i; indexed by interior face 1..nr-1
        return 2.0 * math.pi * self.r_faces[:, None] ** 2 * self.band()[None, :]

    def area_polar(self) -> np.ndarray:
        dr2 = self.r_faces[1:] ** 2 - self.r_faces[:-1] ** 2
        return math.pi * np.sin(self.t_faces)[None, :] * dr2[:, None]

    def cell_points(self) -> np.ndarray:
        return _rt_to_xyz(self.rc[:, None], self.tc[None, :])

    def prefix_of(self, other: AxiMesh) -> bool:
        n = self.nr
        return (
            other.nr >= n
            and np.array_equal(self.r_faces, other.r_faces[: n + 1])
            and np.array_equal(self.t_faces, other.t_faces)
        )


def _rt_to_xyz(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    r, t = np.broadcast_arrays(r, t)
    return np.stack([r * np.sin(t), np.zeros_like(r), r * np.cos(t)], axis=-1)


def _xyz_to_rt(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.atleast_2d(pts)
    r = np.linalg.norm(pts, axis=-1)
    with np.errstate(invalid="ignore"):
        ct = np.where(r > 0, pts[:, 2] / np.where(r > 0, r, 1.0), 1.0)
    return r, np.arccos(np.clip(ct, -1.0, 1.0))


# ---------------------------------------------------------------------------
# linear system assembly


@dataclass
class LinearSystem:
    """Assembled SPD system A u = b for the active cells of a mesh.

    A is the negated flux-divergence matrix, symmetric bit-for-bit; the cell
    weight diag (volume times e^Q) realizes the weighted inner product in
    which the continuous operator is self-adjoint.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: AxiMesh
    active: np.ndarray
    index: np.ndarray
    classification: np.ndarray
    vol_weights: np.ndarray
    q_cells: np.ndarray
    flux_face_cells: np.ndarray
    flux_face_points: np.ndarray
    flux_face_areas: np.ndarray
    flux_face_q: np.ndarray

    def matrix_asymmetry(self) -> float:
        gap = (self.matrix - self.matrix.T).tocsr()
        denom = spla.norm(self.matrix)
        return float(spla.norm(gap) / denom) if denom > 0 else 0.0

    def weighted_identity_gap(self, rng: np.random.Generator, trials: int = 10) -> float:
        """Max relative gap of <e^Q L f, g> - <f, e^Q L g> over random vectors."""
        m = self.matrix.shape[0]
        worst = 0.0
        for _ in range(trials):
            f = rng.standard_normal(m)
            g = rng.standard_normal(m)
            lhs = float((self.matrix @ f) @ g)
            rhs = float(f @ (self.matrix @ g))
            scale = max(abs(lhs), abs(rhs), 1e-300)
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst


def _eval_conductance(op: OperatorSpec, pts: np.ndarray) -> np.ndarray:
    flat = pts.reshape(-1, 3)
    return op.conductance(flat).reshape(pts.shape[:-1])


def _assemble_core(
    mesh: AxiMesh,
    active: np.ndarray,
    obstacle: np.ndarray,
    op: OperatorSpec,
    flux: FluxSpec | None,
    inner_bc,
    outer_bc,
) -> LinearSystem:
    nr, nt = mesh.nr, mesh.nt
    rc, tc = mesh.rc, mesh.tc
    index = -np.ones((nr, nt), dtype=np.int64)
    index[active] = np.arange(int(active.sum()))
    m = int(active.sum())
    if m == 0:
        raise SolverError("no active cells: obstacle fills the mesh")

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    rhs = np.zeros(m)
    classification = np.where(active, 0, -1).astype(np.int8)

    flux_cells: list[np.ndarray] = []
    flux_pts: list[np.ndarray] = []
    flux_areas: list[np.ndarray] = []

    def add_conductance(ia: np.ndarray, ib: np.ndarray, t: np.ndarray) -> None:
        rows.append(ia)
        cols.append(ib)
        vals.append(-t)
        rows.append(ib)
        cols.append(ia)
        vals.append(-t)
        rows.append(ia)
        cols.append(ia)
        vals.append(t)
        rows.append(ib)
        cols.append(ib)
        vals.append(t)

    area_r = mesh.area_radial()
    area_t = mesh.area_polar()

    # radial interior faces
    if nr > 1:
        fi, fj = np.meshgrid(np.arange(1, nr), np.arange(nt), indexing="ij")
        lo_act = active[fi - 1, fj]
        hi_act = active[fi, fj]
        pts = _rt_to_xyz(mesh.r_faces[fi], tc[fj])
        w = _eval_conductance(op, pts)
        both = lo_act & hi_act
        if np.any(both):
            t_val = w[both] * area_r[fi[both], fj[both]] / (
                rc[fi[both]] - rc[fi[both] - 1]
            )
            add_conductance(
                index[fi[both] - 1, fj[both]], index[fi[both], fj[both]], t_val
            )
        if flux is not None:
            for act_cell, obs_cell in (((fi - 1, fj), (fi, fj)), ((fi, fj), (fi - 1, fj))):
                side = active[act_cell] & obstacle[obs_cell]
                if np.any(side):
                    cell = index[act_cell[0][side], act_cell[1][side]]
                    p = pts[side]
                    area = area_r[fi[side], fj[side]]
                    hv = flux.values(p)
                    eq = np.exp(op.q(p))
                    rhs[cell] += eq * hv * area
                    classification[act_cell[0][side], act_cell[1][side]] = 1
                    flux_cells.append(cell)
                    flux_pts.append(p)
                    flux_areas.append(area)

    # polar interior faces
    if nt > 1:
        fi, fj = np.meshgrid(np.arange(nr), np.arange(1, nt), indexing="ij")
        lo_act = active[fi, fj - 1]
        hi_act = active[fi, fj]
        pts = _rt_to_xyz(rc[fi], mesh.t_faces[fj])
        w = _eval_conductance(op, pts)
        both = lo_act & hi_act
        if np.any(both):
            t_val = w[both] * area_t[fi[both], fj[both]] / (
                rc[fi[both]] * (tc[fj[both]] - tc[fj[both] - 1])
            )
            add_conductance(
                index[fi[both], fj[both] - 1], index[fi[both], fj[both]], t_val
            )
        if flux is not None:
            for act_cell, obs_cell in (((fi, fj - 1), (fi, fj)), ((fi, fj), (fi, fj - 1))):
                side = active[act_cell] & obstacle[obs_cell]
                if np.any(side):
                    cell = index[act_cell[0][side], act_cell[1][side]]
                    p = pts[side]
                    area = area_t[fi[side], fj[side]]
                    hv = flux.values(p)
                    eq = np.exp(op.q(p))
                    rhs[cell] += eq * hv * area
                    classification[act_cell[0][side], act_cell[1][side]] = 1
                    flux_cells.append(cell)
                    flux_pts.append(p)
                    flux_areas.append(area)

    # domain-edge faces: bottom (only when the mesh starts off zero radius)
    def apply_edge(i_cell: int, face_r: float, bc) -> None:
        if bc is None:
            return
        js = np.flatnonzero(active[i_cell, :])
        if len(js) == 0:
            return
        pts = _rt_to_xyz(np.full(len(js), face_r), tc[js])
        area = 2.0 * math.pi * face_r**2 * mesh.band()[js]
        w = op.conductance(pts)
        cells = index[i_cell, js]
        dist = abs(rc[i_cell] - face_r)
        kind = bc[0]
        if kind == "dirichlet":
            t_val = w * area / dist
            rows.append(cells)
            cols.append(cells)
            vals.append(t_val)
            rhs[cells] += t_val * float(bc[1])
            classification[i_cell, js] = np.where(
                classification[i_cell, js] == 1, 1, 2
            )
        elif kind == "flux":
            hv = bc[1].values(pts)
            eq = np.exp(op.q(pts))
            rhs[cells] += eq * hv * area
            classification[i_cell, js] = 1
            flux_cells.append(cells)
            flux_pts.append(pts)
            flux_areas.append(area)
        elif kind == "mixed":
            is_dir, dir_val, flux_val = bc[1](pts, tc[js])
            if np.any(is_dir):
                t_val = w[is_dir] * area[is_dir] / dist
                rows.append(cells[is_dir])
                cols.append(cells[is_dir])
                vals.append(t_val)
                rhs[cells[is_dir]] += t_val * dir_val[is_dir]
                classification[i_cell, js[is_dir]] = 2
            neu = ~is_dir
            if np.any(neu):
                eq = np.exp(op.q(pts[neu]))
                rhs[cells[neu]] += eq * flux_val[neu] * area[neu]
                classification[i_cell, js[neu]] = 1
                flux_cells.append(cells[neu])
                flux_pts.append(pts[neu])
                flux_areas.append(area[neu])
        else:
            raise ValueError(f"unknown edge condition {kind!r}")

    if mesh.r_faces[0] > 0:
        apply_edge(0, mesh.r_faces[0], inner_bc)
    apply_edge(nr - 1, mesh.r_faces[-1], outer_bc)

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m),
    ).tocsr()

    cell_pts = mesh.cell_points()[active]
    q_cells = op.q(cell_pts)
    vol = mesh.volumes()[active]
    if flux_cells:
        ff_cells = np.concatenate(flux_cells)
        ff_pts = np.concatenate(flux_pts)
        ff_areas = np.concatenate(flux_areas)
        ff_q = op.q(ff_pts)
    else:
        ff_cells = np.zeros(0, dtype=np.int64)
        ff_pts = np.zeros((0, 3))
        ff_areas = np.zeros(0)
        ff_q = np.zeros(0)
    return LinearSystem(
        matrix=matrix,
        rhs=rhs,
        mesh=mesh,
        active=active,
        index=index,
        classification=classification,
        vol_weights=vol * np.exp(q_cells),
        q_cells=q_cells,
        flux_face_cells=ff_cells,
        flux_face_points=ff_pts,
        flux_face_areas=ff_areas,
        flux_face_q=ff_q,
    )


# ---------------------------------------------------------------------------
# SPD solve: sparse LU with iterative refinement.  The axisymmetric systems
# stay small (two-dimensional fill-in), and the kernel routines reuse one
# factorization across many right-hand sides, so a direct factorization
# beats an iterative method here.  Jacobi pre-scaling keeps the factors
# well-conditioned despite cell volumes spanning several orders of magnitude.


class _SPDSolver:
    # fail_rtol is the stall threshold: refinement on the Jacobi-scaled
    # factorization reaches ~cond * eps, so demanding rtol exactly would
    # reject legitimately ill-conditioned systems (pinched channels)
    def __init__(
        self,
        matrix: sp.csr_matrix,
        *,
        rtol: float = 1e-13,
        max_refine: int = 5,
        fail_rtol: float = 1e-8,
    ):
        self.matrix = matrix
        self.rtol = rtol
        self.max_refine = max_refine
        self.fail_rtol = fail_rtol
        d = matrix.diagonal()
        if np.any(d <= 0):
            raise SolverError("assembled matrix has non-positive diagonal")
        self.scale = 1.0 / np.sqrt(d)
        s = sp.diags(self.scale)
        self.scaled = (s @ matrix @ s).tocsc()
        try:
            self.factor = spla.splu(self.scaled)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        self.iterations = 0

    def solve(self, b: np.ndarray) -> np.ndarray:
        if not np.any(b):
            return np.zeros_like(b)
        bs = self.scale * b
        bn = np.linalg.norm(bs)
        y = self.factor.solve(bs)
        for _ in range(self.max_refine):
            self.iterations += 1
            r = bs - self.scaled @ y
            if np.linalg.norm(r) <= self.rtol * bn:
                break
            y = y + self.factor.solve(r)
        else:
            r = bs - self.scaled @ y
            if np.linalg.norm(r) > self.fail_rtol * bn:
                raise IterationBudgetError(
                    f"refinement stalled at relative residual {np.linalg.norm(r)/bn:.2e}"
                )
        return self.scale * y


# ---------------------------------------------------------------------------
# fields


@dataclass
class GridField:
    """Cell-centered values on an axisymmetric mesh; NaN outside the active set."""

    mesh: AxiMesh
    values: np.ndarray
    classification: np.ndarray
    operator: OperatorSpec
    outer_radius: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def active(self) -> np.ndarray:
        return self.classification >= 0

    def at_radius(self, r: float) -> np.ndarray:
        """Values on the sphere of radius r, one entry per polar cell."""
        rc = self.mesh.rc
        if not rc[0] <= r <= rc[-1]:
            raise ValueError(f"radius {r} outside the mesh [{rc[0]}, {rc[-1]}]")
        i = int(np.searchsorted(rc, r))
        i = min(max(i, 1), len(rc) - 1)
        w = (r - rc[i - 1]) / (rc[i] - rc[i - 1])
        vals = (1 - w) * self.values[i - 1, :] + w * self.values[i, :]
        if np.any(~np.isfinite(vals)):
            raise ValueError(f"sphere r={r} touches inactive cells")
        return vals

    def sphere_minmax(self, r: float) -> tuple[float, float]:
        vals = self.at_radius(r)
        return float(vals.min()), float(vals.max())

    def probe(self, pts: np.ndarray) -> np.ndarray:
        """Bilinear interpolation at arbitrary exterior points."""
        r, t = _xyz_to_rt(pts)
        rc, tc = self.mesh.rc, self.mesh.tc
        out = np.empty(len(r))
        for k in range(len(r)):
            i = min(max(int(np.searchsorted(rc, r[k])), 1), len(rc) - 1)
            j = min(max(int(np.searchsorted(tc, t[k])), 1), len(tc) - 1)
            wr = (r[k] - rc[i - 1]) / (rc[i] - rc[i - 1])
            wt = (t[k] - tc[j - 1]) / (tc[j] - tc[j - 1])
            wr, wt = np.clip(wr, 0, 1), np.clip(wt, 0, 1)
            patch = self.values[i - 1 : i + 1, j - 1 : j + 1]
            if np.any(~np.isfinite(patch)):
                raise ValueError(f"probe {pts[k]} touches inactive cells")
            out[k] = (
                (1 - wr) * (1 - wt) * patch[0, 0]
                + (1 - wr) * wt * patch[0, 1]
                + wr * (1 - wt) * patch[1, 0]
                + wr * wt * patch[1, 1]
            )
        return out

    def max_location(self) -> tuple[int, int]:
        masked = np.where(self.active, self.values, -np.inf)
        return tuple(np.unravel_index(int(np.argmax(masked)), masked.shape))

    def export_table(self, path: str) -> None:
        act = self.active
        rr, tt = np.meshgrid(self.mesh.rc, self.mesh.tc, indexing="ij")
        cols = np.column_stack(
            [
                rr[act],
                tt[act],
                rr[act] * np.sin(tt[act]),
                rr[act] * np.cos(tt[act]),
                self.values[act],
                self.classification[act],
            ]
        )
        np.savetxt(
            path,
            cols,
            header="r theta x_cyl z value class(0=interior,1=flux,2=dirichlet)",
        )


def _field_from_solution(
    system: LinearSystem, u: np.ndarray, op: OperatorSpec, diagnostics: dict
) -> GridField:
    vals = np.full((system.mesh.nr, system.mesh.nt), np.nan)
    vals[system.active] = u
    return GridField(
        mesh=system.mesh,
        values=vals,
        classification=system.classification,
        operator=op,
        outer_radius=float(system.mesh.r_faces[-1]),
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# problem drivers


@dataclass(frozen=True)
class TruncatedProblem:
    """Exterior flux problem cut off at a finite outer sphere (absorbing)."""

    domain: Domain
    operator: OperatorSpec
    flux: FluxSpec
    outer_radius: float
    mesh_spec: MeshSpec = field(default_factory=MeshSpec)

    def __post_init__(self) -> None:
        if self.domain.dim != 3:
            raise ValueError("deterministic solves are implemented for dimension 3")
        if self.outer_radius <= 2 * self.domain.bounding_radius:
            raise ValueError("outer radius must exceed twice the obstacle radius")
        if isinstance(self.domain, PuncturedShell) and abs(self.domain.axis[2] - 1.0) > 1e-12:
            raise ValueError("the solver expects the channel on the +z axis")


def _problem_faces(p: TruncatedProblem) -> np.ndarray:
    dom, spec = p.domain, p.mesh_spec
    if isinstance(dom, Ball):
        return _radial_faces([(p.outer_radius, "log")], dom.radius, spec)
    if isinstance(dom, (Shell, PuncturedShell)):
        return _radial_faces(
            [
                (dom.inner, "uniform_core"),
                (dom.outer, "uniform_layer"),
                (p.outer_radius, "log"),
            ],
            0.0,
            spec,
        )
    raise TypeError(f"no mesh rule for {type(dom).__name__}")


def _connected_to_outer(active: np.ndarray) -> np.ndarray:
    labels, _ = ndimage.label(active)
    outer_labels = np.unique(labels[-1, :][active[-1, :]])
    keep = np.isin(labels, outer_labels[outer_labels > 0]) & active
    return keep


def _problem_system(p: TruncatedProblem, faces: np.ndarray) -> LinearSystem:
    mesh = AxiMesh(r_faces=faces, t_faces=_theta_faces(p.mesh_spec))
    centers = mesh.cell_points().reshape(-1, 3)
    sdf = p.domain.signed_distance(centers).reshape(mesh.nr, mesh.nt)
    obstacle = sdf < 0
    active = ~obstacle
    reachable = _connected_to_outer(active)
    dropped = int(active.sum() - reachable.sum())
    inner_bc = ("flux", p.flux) if isinstance(p.domain, Ball) else None
    system = _assemble_core(
        mesh,
        reachable,
        obstacle,
        p.operator,
        p.flux,
        inner_bc=inner_bc,
        outer_bc=("dirichlet", 0.0),
    )
    system.dropped_cells = dropped  # sealed-off exterior pockets, if any
    return system


def assemble(p: TruncatedProblem) -> LinearSystem:
    """Build the SPD system for one truncated exterior problem."""
    return _problem_system(p, _problem_faces(p))


def solve_truncated(p: TruncatedProblem) -> GridField:
    system = assemble(p)
    solver = _SPDSolver(system.matrix)
    u = solver.solve(system.rhs)
    diag = {
        "outer_radius": p.outer_radius,
        "refinement_steps": solver.iterations,
        "unknowns": system.matrix.shape[0],
        "dropped_cells": system.dropped_cells,
    }
    return _field_from_solution(system, u, p.operator, diag)


@dataclass
class MinimalSolution:
    """Limit of truncated solves under outer-radius doubling."""

    field: GridField
    probe_radii: list[float]
    outer_radii: list[float]
    increments: list[float]
    tol: float

    @property
    def converged(self) -> bool:
        return bool(self.increments) and self.increments[-1] < self.tol


def solve_minimal(
    domain: Domain,
    operator: OperatorSpec,
    flux: FluxSpec,
    probe_radii: list[float],
    *,
    mesh_spec: MeshSpec | None = None,
    start_outer: float | None = None,
    tol: float = 1e-4,
    max_doublings: int = 18,
) -> MinimalSolution:
    """Run solve_truncated over doubling outer radii until probe increments settle.

    The increment is the sup over the probe spheres of |u_{2n} - u_n|,
    normalized by the largest probe value; truncated solutions increase
    monotonically toward the minimal one, so a non-shrinking increment
    signals trouble and raises.
    """
    spec = mesh_spec or MeshSpec()
    r_hi = max(probe_radii)
    outer = start_outer or max(4.0 * domain.bounding_radius, 2.0 * r_hi)
    p = TruncatedProblem(domain, operator, flux, outer, spec)
    faces = _problem_faces(p)
    fields: GridField | None = None
    prev_probe: np.ndarray | None = None
    outer_radii: list[float] = []
    increments: list[float] = []
    for step in range(max_doublings):
        system = _problem_system(replace(p, outer_radius=faces[-1]), faces)
        solver = _SPDSolver(system.matrix)
        u = solver.solve(system.rhs)
        fields = _field_from_solution(
            system,
            u,
            operator,
            {"outer_radius": float(faces[-1]), "refinement_steps": solver.iterations},
        )
        probe_vals = np.concatenate([fields.at_radius(r) for r in probe_radii])
        outer_radii.append(float(faces[-1]))
        if prev_probe is not None:
            inc = float(
                np.max(np.abs(probe_vals - prev_probe)) / max(np.max(np.abs(probe_vals)), 1e-300)
            )
            increments.append(inc)
            if inc < tol:
                break
            if len(increments) >= 3 and increments[-1] > 1.05 * increments[-2] > 1.05 * increments[-3]:
                raise TruncationDivergenceError(
                    f"probe increments grow under doubling: {increments[-3:]}"
                )
        prev_probe = probe_vals
        if step < max_doublings - 1:
            faces = _extend_faces(faces, 2.0 * faces[-1], spec)
    else:
        raise TruncationDivergenceError(
            f"increment {increments[-1]:.3e} above tol {tol:.3e} after {max_doublings} doublings"
        )
    assert fields is not None
    fields.diagnostics["increments"] = increments
    return MinimalSolution(
        field=fields,
        probe_radii=list(probe_radii),
        outer_radii=outer_radii,
        increments=increments,
        tol=tol,
    )


@dataclass
class HittingProbResult:
    """Probability of reaching the inner sphere before the outer one, and its limit."""

    field: GridField
    inner_radius: float
    outer_radii: list[float]
    increments: list[float]

    def sphere_minmax(self, r: float) -> tuple[float, float]:
        return self.field.sphere_minmax(r)


def solve_hitting_prob(
    R: float,
    operator: OperatorSpec,
    probe_radii: list[float],
    *,
    mesh_spec: MeshSpec | None = None,
    start_outer: float | None = None,
    tol: float = 1e-4,
    max_doublings: int = 16,
) -> HittingProbResult:
    """Potential of ever reaching the sphere of radius R, via outer doubling.

    Solves the two-sphere Dirichlet problem (1 inside, 0 at the truncation)
    on growing annuli; values decrease monotonically toward the escape-limit
    potential.  Raises if the limit fails to drop below 1, which would mean
    no escape to infinity.
    """
    spec = mesh_spec or MeshSpec()
    outer = start_outer or max(8.0 * R, 2.0 * max(probe_radii))
    faces = _radial_faces([(outer, "log")], R, spec)
    prev: np.ndarray | None = None
    increments: list[float] = []
    outer_radii: list[float] = []
    result_field: GridField | None = None
    for step in range(max_doublings):
        mesh = AxiMesh(r_faces=faces, t_faces=_theta_faces(spec))
        active = np.ones((mesh.nr, mesh.nt), dtype=bool)
        obstacle = np.zeros_like(active)
        system = _assemble_core(
            mesh, active, obstacle, operator, None,
            inner_bc=("dirichlet", 1.0), outer_bc=("dirichlet", 0.0),
        )
        solver = _SPDSolver(system.matrix)
        u = solver.solve(system.rhs)
        fld = _field_from_solution(system, u, operator, {"outer_radius": float(faces[-1])})
        vals = np.concatenate([fld.at_radius(r) for r in probe_radii])
        outer_radii.append(float(faces[-1]))
        result_field = fld
        if prev is not None:
            inc = float(np.max(np.abs(vals - prev)))
            increments.append(inc)
            if inc < tol:
                break
        prev = vals
        if step < max_doublings - 1:
            faces = _extend_faces(faces, 2.0 * faces[-1], spec)
    else:
        raise TruncationDivergenceError("hitting potential failed to converge in budget")
    assert result_field is not None
    if min(result_field.sphere_minmax(r)[0] for r in probe_radii) > 1.0 - 1e-6:
        raise SolverError(
            "hitting potential is 1 at the probes: no escape to infinity under this operator"
        )
    return HittingProbResult(
        field=result_field,
        inner_radius=R,
        outer_radii=outer_radii,
        increments=increments,
    )


@dataclass
class GreenResult:
    """Columns of the discrete kernel for sources at on-axis probe cells."""

    probes: np.ndarray
    values: np.ndarray
    q_at_probes: np.ndarray
    columns: list[GridField]
    system: LinearSystem

    def asymmetry(self) -> float:
        gap = np.linalg.norm(self.values - self.values.T)
        return float(gap / np.linalg.norm(self.values))

    def weighted_asymmetry(self) -> float:
        w = np.exp(self.q_at_probes)
        weighted = w[:, None] * self.values
        gap = np.linalg.norm(weighted - weighted.T)
        return float(gap / np.linalg.norm(weighted))


def _snap_to_axis_cell(mesh: AxiMesh, pt: np.ndarray) -> tuple[int, int]:
    x = np.asarray(pt, dtype=float)
    if np.hypot(x[0], x[1]) > 1e-9 * max(1.0, abs(x[2])):
        raise ValueError(f"kernel probes must sit on the symmetry axis, got {pt}")
    j = 0 if x[2] >= 0 else mesh.nt - 1
    i = int(np.argmin(np.abs(mesh.rc - abs(x[2]))))
    return i, j


def discrete_green(p: TruncatedProblem, probes: np.ndarray) -> GreenResult:
    """Kernel columns with unit sources at on-axis probes (co-normal walls).

    Each column solves the homogeneous-flux problem with a single point
    source, weighted by e^Q at the source so that the weighted symmetry of
    the continuous kernel carries over to the value matrix exactly (up to
    solver tolerance).
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    system = assemble(p)
    solver = _SPDSolver(system.matrix)
    mesh = system.mesh
    cells = [_snap_to_axis_cell(mesh, pt) for pt in probes]
    snapped = []
    for (i, j) in cells:
        if not system.active[i, j]:
            raise ValueError("kernel probe landed inside the obstacle")
        z = mesh.rc[i] * math.cos(mesh.tc[j])
        snapped.append([0.0, 0.0, z])
    snapped_arr = np.array(snapped)
    q_probes = p.operator.q(snapped_arr)
    cols: list[GridField] = []
    values = np.zeros((len(probes), len(probes)))
    for k, (i, j) in enumerate(cells):
        b = np.zeros(system.matrix.shape[0])
        b[system.index[i, j]] = math.exp(q_probes[k])
        g = solver.solve(b)
        fld = _field_from_solution(system, g, p.operator, {"source": snapped[k]})
        cols.append(fld)
        for l, (i2, j2) in enumerate(cells):
            values[l, k] = g[system.index[i2, j2]]
    return GreenResult(
        probes=snapped_arr,
        values=values,
        q_at_probes=q_probes,
        columns=cols,
        system=system,
    )


def boundary_representation(green: GreenResult, flux: FluxSpec) -> np.ndarray:
    """Surface-integral reconstruction of the solution at the kernel probes.

    Pairs each kernel column with the flux density over the obstacle faces;
    the weighted symmetry converts the column (source at the probe) into the
    kernel with the probe as field point.
    """
    system = green.system
    if len(system.flux_face_cells) == 0:
        raise SolverError("no flux faces recorded: representation needs an obstacle")
    h = flux.values(system.flux_face_points)
    out = np.zeros(len(green.probes))
    for k, fld in enumerate(green.columns):
        col = fld.values[system.active]
        contrib = (
            np.exp(system.flux_face_q - green.q_at_probes[k])
            * h
            * system.flux_face_areas
            * col[system.flux_face_cells]
        )
        out[k] = float(np.sum(contrib))
    return out


@dataclass
class CompatibilityReport:
    """Shrinking-patch study of the interior problem with prescribed flux."""

    cap_indices: list[int]
    center_values: list[float]
    flux_integral: float
    divergent: bool

    @property
    def increments(self) -> list[float]:
        v = self.center_values
        return [b - a for a, b in zip(v, v[1:])]


def neumann_compatibility_check(
    radius: float,
    flux_fn: Callable[[np.ndarray], np.ndarray],
    *,
    cap_indices: list[int] | None = None,
    mesh_spec: MeshSpec | None = None,
) -> CompatibilityReport:
    """Interior ball with flux everywhere except a shrinking pinned patch.

    For each k the polar cap of angular radius 1/k is held at zero while the
    rest of the sphere carries the prescribed flux.  Divergence of the
    center value as the patch shrinks is the numerical signature of an
    incompatible interior problem (nonzero total flux); compatible data
    plateaus.
    """
    ks = cap_indices or [4, 8, 16, 32]
    spec = mesh_spec or MeshSpec(core_cells=48, n_theta=96, theta_power=1.4)
    mesh = AxiMesh(
        r_faces=_radial_faces([(radius, "uniform_core")], 0.0, spec),
        t_faces=_theta_faces(spec),
    )
    quad_pts = _rt_to_xyz(
        np.full(mesh.nt, radius), mesh.tc
    )
    areas = 2.0 * math.pi * radius**2 * mesh.band()
    flux_integral = float(np.sum(np.asarray(flux_fn(quad_pts), dtype=float) * areas))
    op = laplacian_operator()
    center_values: list[float] = []
    for k in ks:
        alpha = 1.0 / k

        def mixed(pts: np.ndarray, thetas: np.ndarray):
            is_dir = thetas <= alpha
            dirv = np.zeros(len(thetas))
            fluxv = np.asarray(flux_fn(pts), dtype=float)
            return is_dir, dirv, fluxv

        active = np.ones((mesh.nr, mesh.nt), dtype=bool)
        obstacle = np.zeros_like(active)
        system = _assemble_core(
            mesh, active, obstacle, op, None, inner_bc=None, outer_bc=("mixed", mixed),
        )
        if not np.any(system.classification == 2):
            raise SolverError(f"cap 1/{k} is below the polar resolution of the mesh")
        solver = _SPDSolver(system.matrix)
        u = solver.solve(system.rhs)
        fld = _field_from_solution(system, u, op, {"cap_index": k})
        # volume-weighted average of the innermost radial layer stands in
        # for the center value
        w = mesh.volumes()[0, :]
        center_values.append(float(np.sum(fld.values[0, :] * w) / np.sum(w)))
    incs = np.abs(np.diff(center_values))
    scale = max(abs(v) for v in center_values) or 1.0
    if incs[-1] < 0.05 * scale or (len(incs) > 1 and incs[-1] < 0.5 * incs[0]):
        divergent = False
    else:
        divergent = bool(np.all(np.diff(center_values) > 0) or np.all(np.diff(center_values) < 0))
    return CompatibilityReport(
        cap_indices=list(ks),
        center_values=center_values,
        flux_integral=flux_integral,
        divergent=divergent,
    )
