# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Verification of contraction and pressure identities on solver output."""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import dataclasses
import math
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np

from congested_crowd import common
from congested_crowd import core
from congested_crowd import dynamics
from congested_crowd import pressure
from congested_crowd import transport
from congested_crowd.common import log

PAIR_CHUNK = 1024
DISTANCE_FLOOR = 1e-12
DERIVATIVE_STEPS = (1e-2, 5e-3, 2.5e-3)
PROJECTION_TOLERANCE = 1e-8


class TimeStampMismatchError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ContractionReport:
    mode: str
    times: Tuple[float, ...]
    distances: Tuple[float, ...]
    bounds: Tuple[float, ...]
    slack: Tuple[float, ...]
    rates: Tuple[float, ...]
    slack_tolerance: float
    method: str
    lam: Optional[float] = None
    lambda_source: Optional[str] = None

    @property
    def max_slack(self) -> float:
        return max(self.slack)

    @property
    def verdict(self) -> bool:
        return self.max_slack <= self.slack_tolerance

    COLUMNS = ("t", "distance", "bound", "slack", "rate")

    def rows(self) -> List[Tuple[float, float, float, float, float]]:
        rates = self.rates + (math.nan,)
        return list(zip(self.times, self.distances, self.bounds, self.slack, rates))


def _slack(distance: float, bound: float) -> float:
    if bound <= DISTANCE_FLOOR:
        if distance <= DISTANCE_FLOOR:
            return 0.0
        return distance / DISTANCE_FLOOR - 1.0
    return distance / bound - 1.0


def _rates(times: np.ndarray, distances: np.ndarray) -> Tuple[float, ...]:
    rates = []
    for k in range(len(times) - 1):
        d0 = distances[k]
        d1 = distances[k + 1]
        if d0 > DISTANCE_FLOOR and d1 > DISTANCE_FLOOR:
            rates.append((math.log(d1) - math.log(d0)) / (times[k + 1] - times[k]))
        else:
            rates.append(math.nan)
    return tuple(rates)


def _pair_chunks(size: int, seed: int, chunks: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    first = []
    second = []
    for _ in range(chunks):
        i = rng.integers(0, size, PAIR_CHUNK)
        j = (i + 1 + rng.integers(0, size - 1, PAIR_CHUNK)) % size
        first.append(i)
        second.append(j)
    return np.concatenate(first), np.concatenate(second)


def estimate_lambda(
    u: core.VelocityField, t: float = 0.0, sample_count: int = 4096, seed: int = 0
) -> float:
    """Sampled lower bound on the monotonicity constant of u at time t.

    Pairs are drawn in fixed chunks, so a larger sample count only ever adds
    pairs and the estimate can't decrease. When the count covers all pairs,
    every pair is used.
    """
    if sample_count < 2:
        raise ValueError("estimate_lambda needs at least 2 samples")
    grid = u.grid
    size = grid.size
    if size < 2:
        raise ValueError("estimate_lambda needs at least 2 cells")
    points = grid.centers()
    values = u.at_time(t).values.reshape(size, grid.dim)

    def quotient(i: np.ndarray, j: np.ndarray) -> float:
        dx = points[i] - points[j]
        du = values[i] - values[j]
        return float((np.sum(du * dx, axis=-1) / np.sum(dx * dx, axis=-1)).max())

    if sample_count >= size * (size - 1) // 2:
        best = -math.inf
        for start in range(0, size - 1):
            j = np.arange(start + 1, size)
            best = max(best, quotient(np.full(j.size, start), j))
        return best

    chunks = math.ceil(sample_count / PAIR_CHUNK)
    i, j = _pair_chunks(size, seed, chunks)
    return quotient(i[:sample_count], j[:sample_count])


def analytic_lambda(u: core.VelocityField) -> Optional[float]:
    if u.preset is None:
        return None
    return u.preset.analytic_lambda(u.grid.dim)


def resolve_lambda(
    u: core.VelocityField,
    lam: Optional[float] = None,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
    seed: int = 0,
) -> Tuple[float, str]:
    """The lambda to test against, and where it came from."""
    if lam is not None:
        return float(lam), "given"
    exact = analytic_lambda(u)
    if exact is not None:
        return exact, "analytic"
    return estimate_lambda(u, u.t, options.lambda_samples, seed), "estimated"


def _check_aligned(
    first: dynamics.Trajectory, second: dynamics.Trajectory
) -> np.ndarray:
    times = first.times()
    if not np.array_equal(times, second.times()):
        raise TimeStampMismatchError("trajectories are recorded at different times")
    core.check_same_grid(first.grid, second.grid)
    return times


def _w2_distances(
    first: dynamics.Trajectory,
    second: dynamics.Trajectory,
    options: common.SolverOptions,
) -> Tuple[List[float], str]:
    grid = first.grid
    pairs = list(zip(first.densities(), second.densities()))
    if grid.dim == 1:
        return [transport.w2_exact_1d(a, b) for a, b in pairs], "exact-1d"
    arcs = max(
        np.count_nonzero(a.values) * np.count_nonzero(b.values) for a, b in pairs
    )
    if arcs <= options.lp_cap:
        costs = [transport.lp_transport(a, b, options)[0] for a, b in pairs]
        return [math.sqrt(max(0.0, c)) for c in costs], "lp"
    log.warning(
        f"analysis:w2_contraction_report:{arcs} arcs over the LP cap, using sinkhorn"
    )
    distances = []
    method = "sinkhorn"
    for a, b in pairs:
        try:
            distances.append(transport.sinkhorn_w2(a, b, options=options))
        except transport.SinkhornConvergenceError as e:
            log.warning(f"analysis:w2_contraction_report:{e}; keeping its estimate")
            distances.append(e.estimate)
            method = "sinkhorn-unconverged"
    return distances, method


def w2_contraction_report(
    first: dynamics.Trajectory,
    second: dynamics.Trajectory,
    lam: float,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
    lambda_source: str = "given",
) -> ContractionReport:
    times = _check_aligned(first, second)
    distances, method = _w2_distances(first, second, options)
    initial = distances[0]
    bounds = [math.exp(lam * t) * initial for t in times]
    slack = tuple(_slack(d, b) for d, b in zip(distances, bounds))
    return ContractionReport(
        mode="w2",
        times=tuple(float(t) for t in times),
        distances=tuple(distances),
        bounds=tuple(bounds),
        slack=slack,
        rates=_rates(times, np.asarray(distances)),
        slack_tolerance=options.w2_slack,
        method=method,
        lam=lam,
        lambda_source=lambda_source,
    )


def l1_contraction_report(
    first: dynamics.Trajectory,
    second: dynamics.Trajectory,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> ContractionReport:
    times = _check_aligned(first, second)
    distances = [
        core.l1_distance(a, b) for a, b in zip(first.densities(), second.densities())
    ]
    bounds = [distances[0]] * len(distances)
    return ContractionReport(
        mode="l1",
        times=tuple(float(t) for t in times),
        distances=tuple(distances),
        bounds=tuple(bounds),
        slack=tuple(_slack(d, b) for d, b in zip(distances, bounds)),
        rates=_rates(times, np.asarray(distances)),
        slack_tolerance=options.l1_slack,
        method="l1",
    )


def _weighted_gradient_product(
    rho: core.DensityField, phi: np.ndarray, p: np.ndarray
) -> float:
    """Sum over faces of w * rho_face * (G phi)(G p)."""
    grid = rho.grid
    gradient, weights = core.gradient_operator(grid)
    density = np.concatenate(
        [core.cell_to_face(grid, axis, rho.values).ravel() for axis in range(grid.dim)]
    )
    product = (gradient @ phi.ravel()) * (gradient @ p.ravel())
    return float(np.sum(weights * density * product))


def verify_positivity(
    rho0: core.DensityField,
    rho1: core.DensityField,
    p: core.PressureField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> float:
    """The integral of grad phi . grad p against rho0; nonnegative up to O(h)."""
    if not np.any(p.values):
        return 0.0
    _, _, potentials = transport.lp_transport(rho0, rho1, options)
    return _weighted_gradient_product(rho0, potentials.phi, p.values)


def _band_scale(grid: core.Grid, phi: np.ndarray, p: core.PressureField) -> float:
    gradient, weights = core.gradient_operator(grid)
    grad_p = gradient @ p.values.ravel()
    grad_phi = gradient @ phi.ravel()
    return (
        grid.h
        * math.sqrt(float(np.dot(weights, grad_p * grad_p)))
        * math.sqrt(float(np.dot(weights, grad_phi * grad_phi)))
    )


def positivity_band(
    grid: core.Grid,
    phi: np.ndarray,
    p: core.PressureField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> float:
    """C h ||grad p|| ||grad phi||, the allowed negative part of the integral."""
    return options.positivity_constant * _band_scale(grid, phi, p)


@dataclasses.dataclass(frozen=True)
class PositivityCalibration:
    """Worst positivity defect per refinement level.

    `ratios[k]` is the largest negative part of the integral at level k over
    h ||grad p|| ||grad phi||; the smallest C that covers every level is
    their maximum.
    """

    hs: Tuple[float, ...]
    defects: Tuple[float, ...]
    ratios: Tuple[float, ...]

    @property
    def constant(self) -> float:
        return max(self.ratios, default=0.0)

    def consistent(self, constant: float) -> bool:
        """The defect stays inside the C h band at the two finest levels."""
        return len(self.ratios) >= 2 and all(r <= constant for r in self.ratios[-2:])

    COLUMNS = ("level", "h", "defect", "ratio")

    def rows(self) -> List[Tuple[int, float, float, float]]:
        return [
            (level, h, defect, ratio)
            for level, (h, defect, ratio) in enumerate(
                zip(self.hs, self.defects, self.ratios)
            )
        ]


def _positivity_defect(
    grid: core.Grid,
    centers: np.ndarray,
    radii: np.ndarray,
    options: common.SolverOptions,
) -> Tuple[float, float]:
    """Negative part of the integral and its band scale for one instance."""
    rho0, rho1 = (
        transport.wasserstein_project(
            core.make_density(
                grid,
                "bump",
                {"center": tuple(float(c) for c in center), "radius": float(radius)},
            ),
            options,
        )
        for center, radius in zip(centers, radii)
    )
    squeeze = core.make_velocity(
        grid, "potential", {"center": tuple(float(c) for c in centers[0])}
    )
    p = pressure.admissible_project(rho0, squeeze, options).pressure
    if not np.any(p.values):
        return 0.0, 0.0
    _, _, potentials = transport.lp_transport(rho0, rho1, options)
    value = _weighted_gradient_product(rho0, potentials.phi, p.values)
    return max(0.0, -value), _band_scale(grid, potentials.phi, p)


def calibrate_positivity(
    grid: core.Grid,
    levels: int = 2,
    count: int = 10,
    seed: int = 0,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> PositivityCalibration:
    """Measure the positivity defect on the same instances at finer and finer grids.

    Each instance is a pair of saturated bumps with the pressure that squeezes
    the first one; they are drawn once in continuous coordinates and rebuilt
    on `grid` and on each of its refinements.
    """
    if levels < 1:
        raise ValueError("a positivity calibration needs at least 1 level")
    rng = np.random.default_rng(seed)
    extent = np.asarray(grid.extent, dtype=float)
    instances = [
        (
            rng.uniform(0.3, 0.7, (2, grid.dim)) * extent,
            rng.uniform(0.08, 0.15, 2) * float(extent.min()),
        )
        for _ in range(count)
    ]
    hs: List[float] = []
    defects: List[float] = []
    ratios: List[float] = []
    level_grid = grid
    for level in range(levels):
        if level:
            level_grid = level_grid.refined()
        worst_defect = 0.0
        worst_ratio = 0.0
        try:
            for centers, radii in instances:
                defect, scale = _positivity_defect(level_grid, centers, radii, options)
                worst_defect = max(worst_defect, defect)
                if scale > 0.0:
                    worst_ratio = max(worst_ratio, defect / scale)
        except transport.LPSizeError as e:
            log.warning(f"analysis:calibrate_positivity:stopping at level {level}: {e}")
            break
        hs.append(level_grid.h)
        defects.append(worst_defect)
        ratios.append(worst_ratio)
    calibration = PositivityCalibration(tuple(hs), tuple(defects), tuple(ratios))
    log.info(
        f"analysis:calibrate_positivity:C = {calibration.constant!r} "
        + f"over {len(hs)} levels of {count} instances"
    )
    return calibration


@dataclasses.dataclass(frozen=True)
class GeodesicDerivative:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs


def verify_geodesic_derivative(
    rho0: core.DensityField,
    rho1: core.DensityField,
    p: core.PressureField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> GeodesicDerivative:
    """d/dt of the p-integral along the geodesic at t = 0, against the gradient form.

    The left side is a Richardson extrapolation of forward differences at the
    steps in DERIVATIVE_STEPS; the right side is -integral of grad phi . grad p
    against rho0.
    """
    if not np.any(p.values):
        return GeodesicDerivative(0.0, 0.0)
    _, plan, potentials = transport.lp_transport(rho0, rho1, options)
    vol = rho0.grid.cell_volume
    weights = p.values.ravel()

    def integral(t: float) -> float:
        moved = transport.displacement_interpolate(rho0, plan, t)
        return vol * float(np.dot(weights, moved.values.ravel()))

    start = integral(0.0)
    slopes = [(integral(t) - start) / t for t in DERIVATIVE_STEPS]
    first = 2.0 * slopes[1] - slopes[0]
    second = 2.0 * slopes[2] - slopes[1]
    lhs = (4.0 * second - first) / 3.0
    rhs = -_weighted_gradient_product(rho0, potentials.phi, p.values)
    return GeodesicDerivative(lhs, rhs)


@dataclasses.dataclass(frozen=True)
class LemmaCheck:
    check: str
    instance: int
    measured: float
    allowed: float

    @property
    def slack(self) -> float:
        return self.measured - self.allowed

    @property
    def passed(self) -> bool:
        return self.measured <= self.allowed


@dataclasses.dataclass(frozen=True)
class LemmaSweep:
    checks: Tuple[LemmaCheck, ...]
    calibration: Optional[PositivityCalibration] = None

    @property
    def max_slack(self) -> float:
        return max((c.slack for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    COLUMNS = ("check", "instance", "measured", "allowed", "passed")


def random_density(
    grid: core.Grid, rng: np.random.Generator, sparsity: float = 0.6
) -> core.DensityField:
    """A unit-mass density concentrated enough to violate the cap."""
    return core.make_density(
        grid, "random", {"sparsity": sparsity}, int(rng.integers(0, 2**31))
    )


def random_feasible(
    grid: core.Grid, rng: np.random.Generator, options: common.SolverOptions
) -> core.DensityField:
    return transport.wasserstein_project(random_density(grid, rng), options)


def lemma_sweep(
    grid: core.Grid,
    count: int,
    seed: int = 0,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
    calibration_levels: int = 0,
) -> LemmaSweep:
    """Random instances of the projection, cone and geodesic identities.

    Every instance contributes one check per identity; a check passes when
    the measured quantity is at most the allowed one. With
    `calibration_levels` the positivity constant is also measured over that
    many refinements of `grid`, one check per level.
    """
    rng = np.random.default_rng(seed)
    checks: List[LemmaCheck] = []
    geodesic_band = max(1e-3, 10.0 * grid.h)
    for k in range(count):
        a = random_density(grid, rng)
        b = random_density(grid, rng)
        pa = transport.wasserstein_project(a, options)
        pb = transport.wasserstein_project(b, options)
        growth = core.l1_distance(pa, pb) - core.l1_distance(a, b)
        checks.append(LemmaCheck("projection-l1", k, growth, PROJECTION_TOLERANCE))

        outer = core.DensityField(grid, a.values * rng.uniform(0.5, 1.0))
        inner = core.DensityField(grid, outer.values * rng.random(grid.shape))
        excess = float(
            (
                transport.wasserstein_project(inner, options).values
                - transport.wasserstein_project(outer, options).values
            ).max()
        )
        checks.append(
            LemmaCheck("projection-monotone", k, excess, PROJECTION_TOLERANCE)
        )

        drift = core.VelocityField(
            grid, rng.normal(size=grid.shape + (grid.dim,))
        )
        result = pressure.admissible_project(pa, drift, options)
        energy = pressure.energy_check(result, drift, options)
        checks.append(
            LemmaCheck("cone-energy", k, energy.split_residual, options.ortho_tolerance)
        )
        checks.append(
            LemmaCheck(
                "cone-complementarity",
                k,
                result.complementarity,
                options.complementarity_tolerance,
            )
        )

        witnesses = pressure.sample_pressure_test_functions(
            pa, 1, int(rng.integers(0, 2**31)), options
        )
        if not witnesses:
            continue
        q = witnesses[0]
        _, _, potentials = transport.lp_transport(pa, pb, options)
        value = _weighted_gradient_product(pa, potentials.phi, q.values)
        band = positivity_band(grid, potentials.phi, q, options)
        checks.append(LemmaCheck("positivity", k, -value, band))
        derivative = verify_geodesic_derivative(pa, pb, q, options)
        checks.append(
            LemmaCheck("geodesic-derivative", k, abs(derivative.gap), geodesic_band)
        )
    calibration = None
    if calibration_levels > 0 and count > 0:
        calibration = calibrate_positivity(
            grid, calibration_levels, count, seed, options
        )
        checks.extend(
            LemmaCheck(
                "positivity-calibration", level, ratio, options.positivity_constant
            )
            for level, ratio in enumerate(calibration.ratios)
        )
    sweep = LemmaSweep(tuple(checks), calibration)
    log.info(
        f"analysis:lemma_sweep:{count} instances, {len(checks)} checks, "
        + f"max slack {sweep.max_slack!r}"
    )
    return sweep
