# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Discrete optimal transport between cell-averaged densities.

Cells are treated as atoms sitting at their centers whenever a linear program
is involved: the exact engine solves the Kantorovich problem between the two
atomic measures with HiGHS, and the Wasserstein projection onto {rho <= 1} is
the same problem with a free second marginal capped at one cell of density
per cell. The projection LP is only ever built on a neighbourhood of the
support; arcs are added until the dual solution is feasible on every pair of
cells, which certifies optimality on the full problem.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import dataclasses
from typing import Any
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import ot
from scipy import sparse
from scipy.optimize import OptimizeResult
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from congested_crowd import common
from congested_crowd import core
from congested_crowd.common import log

LP_METHOD = "highs-ds"
LP_SOLVER_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}
CHUNK = 1024
TIE_BREAK = 1e-6
TIE_DIRECTION = np.array([1.0, 1.0 / np.pi])


class LPSizeError(ValueError):
    """The exact LP would exceed the configured number of arcs."""

    def __init__(self, arcs: int, cap: int) -> None:
        self.arcs = arcs
        self.cap = cap
        super().__init__(
            f"exact transport needs {arcs} arcs, over the cap of {cap}; "
            + "use sinkhorn_w2 for grids this large"
        )


class InfeasibleProjectionError(ValueError):
    """More mass than the domain can hold at density one."""


class TransportSolveError(RuntimeError):
    """HiGHS failed, or the projection could not be certified."""


class SinkhornConvergenceError(RuntimeError):
    """The entropic plan missed its marginals; `estimate` is its W2 all the same."""

    def __init__(
        self, residual: float, iterations: int, estimate: float = float("nan")
    ) -> None:
        self.residual = residual
        self.iterations = iterations
        self.estimate = estimate
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            + f"(marginal residual {residual!r})"
        )


@dataclasses.dataclass(frozen=True, eq=False)
class TransportPlan:
    """A sparse coupling: `masses[k]` moves from cell `sources[k]` to `targets[k]`.

    Cells are flat row-major indices; masses are absolute (density times cell
    volume).
    """

    source_grid: core.Grid
    target_grid: core.Grid
    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray

    def __len__(self) -> int:
        return int(self.masses.size)

    def displacements(self) -> np.ndarray:
        return (
            self.target_grid.centers()[self.targets]
            - self.source_grid.centers()[self.sources]
        )

    def cost(self) -> float:
        return float(np.sum(self.masses * np.sum(self.displacements() ** 2, axis=-1)))

    def row_sums(self) -> np.ndarray:
        grid = self.source_grid
        return np.bincount(self.sources, self.masses, grid.size).reshape(grid.shape)

    def column_sums(self) -> np.ndarray:
        grid = self.target_grid
        return np.bincount(self.targets, self.masses, grid.size).reshape(grid.shape)

    def first_marginal(self) -> core.DensityField:
        return core.DensityField(
            self.source_grid, self.row_sums() / self.source_grid.cell_volume
        )

    def second_marginal(self) -> core.DensityField:
        return core.DensityField(
            self.target_grid, self.column_sums() / self.target_grid.cell_volume
        )

    def triples(self) -> List[Tuple[int, int, float]]:
        return [
            (int(i), int(j), float(m))
            for i, j, m in zip(self.sources, self.targets, self.masses)
        ]


@dataclasses.dataclass(frozen=True, eq=False)
class PotentialPair:
    """Kantorovich potentials for the cost |x - y|^2 / 2, on every cell."""

    phi: np.ndarray
    psi: np.ndarray

    def max_violation(self, grid: core.Grid) -> float:
        """Largest phi(x) + psi(y) - |x - y|^2 / 2 over all cell pairs."""
        centers = grid.centers()
        phi = self.phi.ravel()
        psi = self.psi.ravel()
        worst = -np.inf
        for start in range(0, grid.size, CHUNK):
            block = cdist(centers[start : start + CHUNK], centers, "sqeuclidean")
            slack = phi[start : start + CHUNK, None] + psi[None, :] - 0.5 * block
            worst = max(worst, float(slack.max()))
        return worst


@dataclasses.dataclass(frozen=True, eq=False)
class TransportMap:
    """Barycentric map T(x_i), undefined (NaN) on cells without mass."""

    grid: core.Grid
    values: np.ndarray
    defined: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class ProjectionCertificate:
    density: core.DensityField
    plan: TransportPlan
    cost: float
    rounds: int
    radius: float
    dual_violation: float
    active: bool


def _solve_lp(cost: np.ndarray, **constraints: Any) -> OptimizeResult:
    res = linprog(
        cost,
        bounds=(0, None),
        method=LP_METHOD,
        options=LP_SOLVER_OPTIONS,
        **constraints,
    )
    if res.status not in (0, 2):
        raise TransportSolveError(f"HiGHS failed: {res.message}")
    return res


def _c_transform(
    points_out: np.ndarray, points_in: np.ndarray, values_in: np.ndarray
) -> np.ndarray:
    """min over inputs of |x - y|^2 / 2 - values_in, for every output point."""
    out = np.empty(len(points_out))
    for start in range(0, len(points_out), CHUNK):
        block = cdist(points_out[start : start + CHUNK], points_in, "sqeuclidean")
        out[start : start + CHUNK] = (0.5 * block - values_in[None, :]).min(axis=1)
    return out


def _matched_masses(
    a: core.DensityField, b: core.DensityField
) -> Tuple[np.ndarray, np.ndarray]:
    core.check_same_grid(a.grid, b.grid)
    ma = a.values.ravel()
    mb = b.values.ravel()
    total_a = float(ma.sum())
    total_b = float(mb.sum())
    if total_a <= 0.0 or total_b <= 0.0:
        raise core.DegenerateDensityError("degenerate density")
    if abs(total_a - total_b) > 1e-8 * max(total_a, total_b):
        raise ValueError(
            f"transport needs equal masses, got {total_a * a.grid.cell_volume!r} "
            + f"and {total_b * b.grid.cell_volume!r}"
        )
    return ma, mb * (total_a / total_b)


def w2_exact_1d(
    a: core.DensityField, b: core.DensityField, representation: str = "histogram"
) -> float:
    """W2 between two 1D fields through their quantile functions.

    "histogram" reads each cell as a uniform density, so quantiles are
    piecewise linear and the squared difference is integrated exactly on
    every interval between merged breakpoints. "atoms" reads each cell as a
    point mass at its center, the measure the LP engine sees.
    """
    if a.grid.dim != 1 or b.grid.dim != 1:
        raise ValueError("w2_exact_1d needs one-dimensional fields")
    ra, rb = _matched_masses(a, b)
    grid = a.grid
    h = grid.spacing[0]
    qa = np.cumsum(ra) / ra.sum()
    qb = np.cumsum(rb) / rb.sum()
    qa[-1] = qb[-1] = 1.0
    breaks = np.union1d(np.concatenate(([0.0], qa)), qb)
    breaks = breaks[(breaks >= 0.0) & (breaks <= 1.0)]
    lo = breaks[:-1]
    hi = breaks[1:]
    keep = hi > lo
    lo = lo[keep]
    hi = hi[keep]
    mid = 0.5 * (lo + hi)
    cell_a = np.minimum(np.searchsorted(qa, mid, side="left"), grid.cells[0] - 1)
    cell_b = np.minimum(np.searchsorted(qb, mid, side="left"), grid.cells[0] - 1)

    if representation == "atoms":
        centers = grid.axis_centers(0)
        diff = centers[cell_a] - centers[cell_b]
        total = float(np.sum((hi - lo) * diff * diff))
    elif representation == "histogram":
        edges = grid.axis_edges(0)
        start_a = np.concatenate(([0.0], qa[:-1]))
        start_b = np.concatenate(([0.0], qb[:-1]))
        width_a = qa - start_a
        width_b = qb - start_b

        def quantile(q, cells, starts, widths):
            return edges[cells] + h * (q - starts[cells]) / widths[cells]

        def separation(q):
            a = quantile(q, cell_a, start_a, width_a)
            return a - quantile(q, cell_b, start_b, width_b)

        d0 = separation(lo)
        d1 = separation(hi)
        total = float(np.sum((hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))
    else:
        raise ValueError(f"unknown representation {representation!r}")
    mass = float(ra.sum()) * grid.cell_volume
    return float(np.sqrt(max(0.0, total * mass)))


def lp_transport(
    a: core.DensityField,
    b: core.DensityField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> Tuple[float, TransportPlan, PotentialPair]:
    """Exact W2^2 with plan and potentials, by dual simplex on the support.

    Returns the optimal cost (squared distance), the plan and the potentials
    extended to every cell by c-transforms, so the pair is dual feasible on
    all pairs of cells and optimal.
    """
    ra, rb = _matched_masses(a, b)
    grid = a.grid
    vol = grid.cell_volume
    src = np.flatnonzero(ra > 0.0)
    dst = np.flatnonzero(rb > 0.0)
    arcs = src.size * dst.size
    if arcs > options.lp_cap:
        raise LPSizeError(arcs, options.lp_cap)

    centers = grid.centers()
    cost = cdist(centers[src], centers[dst], "sqeuclidean")
    rows = sparse.kron(sparse.identity(src.size), np.ones((1, dst.size)))
    cols = sparse.kron(np.ones((1, src.size)), sparse.identity(dst.size))
    res = _solve_lp(
        cost.ravel(),
        A_eq=sparse.vstack([rows, cols], format="csc"),
        b_eq=np.concatenate([ra[src], rb[dst]]),
    )
    if res.status != 0:
        raise TransportSolveError(f"transport LP infeasible: {res.message}")

    flow = res.x.reshape(src.size, dst.size)
    g = res.eqlin.marginals[src.size :]
    i, j = np.nonzero(flow * vol > options.plan_tolerance)
    plan = TransportPlan(grid, grid, src[i], dst[j], flow[i, j] * vol)
    total = float(vol * np.sum(cost * flow))

    phi = _c_transform(centers, centers[dst], 0.5 * g)
    psi = _c_transform(centers, centers, phi)
    potentials = PotentialPair(phi.reshape(grid.shape), psi.reshape(grid.shape))
    dual = 2.0 * vol * float(np.dot(phi, ra) + np.dot(psi, rb))
    gap = total - dual
    if abs(gap) > options.duality_tolerance * (1.0 + total):
        log.warning(
            f"transport:lp_transport:duality gap {gap!r} above tolerance "
            + f"(cost {total!r})"
        )
    log.debug(
        f"transport:lp_transport:{src.size}x{dst.size} arcs, "
        f"cost={total!r}, gap={gap!r}"
    )
    return total, plan, potentials


def sinkhorn_w2(
    a: core.DensityField,
    b: core.DensityField,
    epsilon: Optional[float] = None,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> float:
    """Entropic estimate of W2 by stabilized Sinkhorn with epsilon scaling.

    `epsilon` is in units of the squared grid spacing. The regularization
    starts at the largest cost and shrinks to the target, each stage warm
    started from the last. The value is the transport cost of the entropic
    plan, so it is biased upwards by O(epsilon) and there is no debiasing.
    """
    ra, rb = _matched_masses(a, b)
    grid = a.grid
    scale = options.sinkhorn_epsilon if epsilon is None else epsilon
    eps_target = scale * grid.h**2
    if not eps_target > 0.0:
        raise ValueError(f"epsilon must be > 0, got {scale!r}")

    src = np.flatnonzero(ra > 0.0)
    dst = np.flatnonzero(rb > 0.0)
    centers = grid.centers()
    cost = cdist(centers[src], centers[dst], "sqeuclidean")
    pa = ra[src] / ra.sum()
    pb = rb[dst] / rb.sum()
    stage = max(1, options.sinkhorn_stage_iter)
    stages = max(1, options.sinkhorn_max_iter // stage)
    # Small enough that POT's L2 marginal error bounds the L1 residual.
    threshold = options.sinkhorn_tolerance**2 / (src.size + dst.size)
    plan = ot.bregman.sinkhorn_epsilon_scaling(
        pa,
        pb,
        cost,
        eps_target,
        numItermax=stages,
        epsilon0=max(float(cost.max()), eps_target),
        numInnerItermax=stage,
        stopThr=threshold,
        warn=False,
    )
    plan = np.asarray(plan)
    residual = float(
        np.abs(plan.sum(axis=1) - pa).sum() + np.abs(plan.sum(axis=0) - pb).sum()
    )
    mass = float(ra.sum()) * grid.cell_volume
    estimate = float(np.sqrt(max(0.0, mass * float(np.sum(plan * cost)))))
    if not residual <= options.sinkhorn_tolerance:
        raise SinkhornConvergenceError(residual, stages * stage, estimate)
    log.debug(
        f"transport:sinkhorn_w2:{src.size}x{dst.size} plan, "
        + f"residual={residual!r}, estimate={estimate!r}"
    )
    return estimate


def optimal_map(
    a: core.DensityField,
    b: core.DensityField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> TransportMap:
    _, plan, _ = lp_transport(a, b, options)
    return barycentric_map(plan)


def barycentric_map(plan: TransportPlan) -> TransportMap:
    grid = plan.source_grid
    targets = plan.target_grid.centers()[plan.targets]
    rows = np.bincount(plan.sources, plan.masses, grid.size)
    defined = rows > 0.0
    values = np.full((grid.size, grid.dim), np.nan)
    for axis in range(grid.dim):
        moved = np.bincount(plan.sources, plan.masses * targets[:, axis], grid.size)
        values[defined, axis] = moved[defined] / rows[defined]
    return TransportMap(
        grid, values.reshape(grid.shape + (grid.dim,)), defined.reshape(grid.shape)
    )


def splat(
    grid: core.Grid, positions: np.ndarray, masses: np.ndarray
) -> core.DensityField:
    """Spread point masses onto cell centers with tent weights, mass exactly."""
    per_axis = []
    for axis in range(grid.dim):
        n = grid.cells[axis]
        s = positions[:, axis] / grid.spacing[axis] - 0.5
        low = np.floor(s)
        weight = s - low
        low = low.astype(np.int64)
        below = low < 0
        above = low >= n - 1
        weight = np.where(below | above, 0.0, weight)
        low = np.clip(low, 0, n - 1)
        high = np.clip(low + 1, 0, n - 1)
        per_axis.append(((low, 1.0 - weight), (high, weight)))

    out = np.zeros(grid.size)
    if grid.dim == 1:
        for cells, weight in per_axis[0]:
            np.add.at(out, cells, masses * weight)
    else:
        ny = grid.cells[1]
        for cx, wx in per_axis[0]:
            for cy, wy in per_axis[1]:
                np.add.at(out, cx * ny + cy, masses * wx * wy)
    return core.DensityField(grid, out.reshape(grid.shape) / grid.cell_volume)


def displacement_interpolate(
    a: core.DensityField, plan: TransportPlan, t: float
) -> core.DensityField:
    """The geodesic point at time t: every plan atom moved to (1 - t) x + t y."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation time must be in [0, 1], got {t!r}")
    core.check_same_grid(a.grid, plan.source_grid)
    x = plan.source_grid.centers()[plan.sources]
    y = plan.target_grid.centers()[plan.targets]
    return splat(plan.target_grid, (1.0 - t) * x + t * y, plan.masses)


def identity_plan(rho: core.DensityField) -> TransportPlan:
    support = np.flatnonzero(rho.values.ravel() > 0.0)
    masses = rho.values.ravel()[support] * rho.grid.cell_volume
    return TransportPlan(rho.grid, rho.grid, support, support.copy(), masses)


def _offsets(grid: core.Grid, radius: float) -> np.ndarray:
    reach = [int(radius // h) for h in grid.spacing]
    mesh = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    offsets = np.stack([m.ravel() for m in mesh], axis=-1)
    lengths = np.sum((offsets * np.asarray(grid.spacing)) ** 2, axis=-1)
    return offsets[lengths <= radius * radius * (1.0 + 1e-12)]


def _tie_bias(grid: core.Grid) -> np.ndarray:
    """A small linear preference over target cells.

    Spilling onto two equidistant cells costs the same, so the projection LP
    has ties. The bias ranks every cell differently and always the same way,
    which keeps the projected density a function of the input.
    """
    return TIE_BREAK * (grid.centers() @ TIE_DIRECTION[: grid.dim]) / max(grid.extent)


def _arcs_within(grid: core.Grid, src: np.ndarray, radius: float) -> np.ndarray:
    """Arc keys (source position * size + target cell) within `radius`."""
    index = np.stack(np.unravel_index(src, grid.shape), axis=-1)
    reached = index[:, None, :] + _offsets(grid, radius)[None, :, :]
    inside = np.all((reached >= 0) & (reached < np.asarray(grid.cells)), axis=-1)
    owner = np.broadcast_to(np.arange(src.size)[:, None], inside.shape)[inside]
    cells = np.ravel_multi_index(tuple(reached[inside].T), grid.shape)
    return np.unique(owner.astype(np.int64) * grid.size + cells)


def project_with_certificate(
    rho: core.DensityField, options: common.SolverOptions = common.DEFAULT_OPTIONS
) -> ProjectionCertificate:
    """Wasserstein projection onto {rho <= 1}, with its optimality certificate.

    The projection keeps the total mass, so subprobability inputs are fine;
    only mass beyond the domain volume is infeasible.
    """
    grid = rho.grid
    vol = grid.cell_volume
    mass = rho.mass()
    if mass > grid.volume * (1.0 + 1e-12):
        raise InfeasibleProjectionError(
            f"mass {mass!r} does not fit in a domain of volume {grid.volume!r}"
        )
    if rho.max() <= 1.0 + options.constraint_tolerance:
        return ProjectionCertificate(rho, identity_plan(rho), 0.0, 0, 0.0, 0.0, False)

    values = rho.values.ravel()
    src = np.flatnonzero(values > 0.0)
    centers = grid.centers()
    bias = _tie_bias(grid)
    radius = options.projection_initial_radius * grid.h
    keys = _arcs_within(grid, src, radius)

    for round_ in range(1, options.projection_max_rounds + 1):
        if keys.size > options.lp_cap:
            raise LPSizeError(int(keys.size), options.lp_cap)
        owner = keys // grid.size
        cells = keys % grid.size
        used, column = np.unique(cells, return_inverse=True)
        arc_ids = np.arange(keys.size)
        cost = np.sum((centers[src[owner]] - centers[cells]) ** 2, axis=-1)
        res = _solve_lp(
            cost + bias[cells],
            A_eq=sparse.csc_matrix(
                (np.ones(keys.size), (owner, arc_ids)), shape=(src.size, keys.size)
            ),
            b_eq=values[src],
            A_ub=sparse.csc_matrix(
                (np.ones(keys.size), (column, arc_ids)), shape=(used.size, keys.size)
            ),
            b_ub=np.ones(used.size),
        )
        if res.status == 2:
            radius *= 2.0
            log.debug(
                f"transport:project_with_certificate:radius {radius / 2.0!r} "
                + "infeasible, widening"
            )
            keys = np.union1d(keys, _arcs_within(grid, src, radius))
            continue

        f = res.eqlin.marginals
        g = np.zeros(grid.size)
        g[used] = np.maximum(0.0, -res.ineqlin.marginals)
        tolerance = options.duality_tolerance * (1.0 + float(np.abs(f).max()))
        worst = 0.0
        missing: List[np.ndarray] = []
        for start in range(0, src.size, CHUNK):
            block = cdist(centers[src[start : start + CHUNK]], centers, "sqeuclidean")
            slack = f[start : start + CHUNK, None] - g[None, :] - block - bias[None, :]
            worst = max(worst, float(slack.max()))
            rows, cols = np.nonzero(slack > tolerance)
            if rows.size:
                missing.append((rows + start).astype(np.int64) * grid.size + cols)
        if not missing:
            break
        keys = np.union1d(keys, np.concatenate(missing))
        log.debug(
            f"transport:project_with_certificate:round {round_}: dual violation "
            + f"{worst!r}, now {keys.size} arcs"
        )
    else:
        raise TransportSolveError(
            f"projection not certified after {options.projection_max_rounds} rounds"
        )

    flow = res.x
    keep = flow * vol > options.plan_tolerance
    projected = np.bincount(cells[keep], flow[keep], grid.size)
    projected *= values.sum() / projected.sum()
    plan = TransportPlan(grid, grid, src[owner[keep]], cells[keep], flow[keep] * vol)
    total = float(vol * np.dot(cost, flow))
    return ProjectionCertificate(
        density=core.DensityField(grid, projected.reshape(grid.shape)),
        plan=plan,
        cost=total,
        rounds=round_,
        radius=radius,
        dual_violation=max(0.0, worst),
        active=True,
    )


def wasserstein_project(
    rho: core.DensityField, options: common.SolverOptions = common.DEFAULT_OPTIONS
) -> core.DensityField:
    return project_with_certificate(rho, options).density
