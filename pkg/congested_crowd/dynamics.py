# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Time stepping for the constrained crowd motion schemes.

One step of the first order scheme transports the density with the drift
sampled at the left end of the step and projects the result back onto
{rho <= 1}. The second order scheme adds a backward Euler heat step between
the two. Pressures are not part of either scheme; they are reconstructed at
recorded frames by projecting the drift onto the admissible cone.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import dataclasses
import functools
import math
from concurrent.futures import Future
from concurrent.futures import ThreadPoolExecutor
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.sparse import identity
from scipy.sparse.linalg import splu

from congested_crowd import common
from congested_crowd import core
from congested_crowd import pressure
from congested_crowd import transport
from congested_crowd.common import log
from congested_crowd.scenario import Scenario


class LinearSolveError(RuntimeError):
    pass


class MissingPressureError(ValueError):
    pass


class SimulationError(RuntimeError):
    """A step failed; `step` is the index of the step being computed."""

    def __init__(self, step: int, cause: BaseException) -> None:
        self.step = step
        super().__init__(f"simulation failed at step {step}: {cause}")


@dataclasses.dataclass(frozen=True, eq=False)
class Frame:
    step: int
    t: float
    density: core.DensityField
    pressure: Optional[core.PressureField] = None
    pressure_converged: Optional[bool] = None


@dataclasses.dataclass(frozen=True)
class StepDiagnostics:
    step: int
    t: float
    tau: float
    mass: float
    mass_drift: float
    max_density: float
    pre_projection_max: float
    cfl: float
    substeps: int
    projection_active: bool
    w2_step: Optional[float]
    step_bound: float
    step_allowance: float
    step_bound_l2: float
    pressure_status: str

    def step_bound_ok(self, slack: float, allowance: bool = False) -> bool:
        """W2^2 of the advection step against (tau sup|u|)^2.

        With `allowance` the bound also carries the cost of moving mass
        between cell centers, which the atomic LP charges on 2D grids.
        """
        if self.w2_step is None:
            return True
        bound = self.step_bound + (self.step_allowance if allowance else 0.0)
        return self.w2_step**2 <= (1.0 + slack) * bound + 1e-15

    @property
    def step_ratio(self) -> Optional[float]:
        """W2^2 of the step over the unmodified bound; above 1 is a violation."""
        if self.w2_step is None or self.step_bound <= 0.0:
            return None
        return self.w2_step**2 / self.step_bound

    COLUMNS = (
        "step",
        "t",
        "tau",
        "mass",
        "mass_drift",
        "max_density",
        "pre_projection_max",
        "cfl",
        "substeps",
        "projection_active",
        "w2_step",
        "step_bound",
        "step_allowance",
        "step_bound_l2",
        "step_ratio",
        "pressure_status",
    )


class Trajectory:
    """Recorded frames of one run plus the diagnostics of every step.

    Frames are immutable; the lists only ever grow, in time order.
    """

    def __init__(
        self,
        grid: core.Grid,
        order: int,
        tau: float,
        scenario: Optional[Scenario] = None,
    ) -> None:
        self.grid = grid
        self.order = order
        self.tau = tau
        self.scenario = scenario
        self.frames: List[Frame] = []
        self.diagnostics: List[StepDiagnostics] = []

    def __len__(self) -> int:
        return len(self.frames)

    def append_frame(self, frame: Frame) -> None:
        if self.frames and frame.t <= self.frames[-1].t:
            raise ValueError(f"frame at t={frame.t!r} is not after the last one")
        self.frames.append(frame)

    def times(self) -> np.ndarray:
        return np.array([frame.t for frame in self.frames])

    def densities(self) -> List[core.DensityField]:
        return [frame.density for frame in self.frames]

    def final(self) -> core.DensityField:
        return self.frames[-1].density

    def max_density(self) -> float:
        return max(frame.density.max() for frame in self.frames)

    def mass_drift(self) -> float:
        start = self.frames[0].density.mass()
        return max(abs(frame.density.mass() - start) for frame in self.frames)

    def step_bound_violations(
        self, slack: float, allowance: bool = False
    ) -> List[StepDiagnostics]:
        return [d for d in self.diagnostics if not d.step_bound_ok(slack, allowance)]


@dataclasses.dataclass(frozen=True, eq=False)
class _Stage:
    density: core.DensityField
    transported_from: core.DensityField
    transported: core.DensityField
    pre_projection_max: float
    cfl: float
    substeps: int
    projection_active: bool


def _advect(
    rho: core.DensityField,
    u: core.VelocityField,
    tau: float,
    options: common.SolverOptions,
) -> Tuple[core.DensityField, float, int]:
    core.check_same_grid(rho.grid, u.grid)
    grid = rho.grid
    positive = []
    negative = []
    rates = np.zeros(grid.shape)
    fastest = 0.0
    for axis in range(grid.dim):
        faces = u.face_values(axis)
        if not np.all(np.isfinite(faces)):
            raise core.InvalidFieldError("advect: velocity has non-finite entries")
        # No flux through the boundary.
        inner = np.take(faces, range(1, grid.cells[axis]), axis=axis)
        pos = np.maximum(inner, 0.0)
        neg = np.maximum(-inner, 0.0)
        positive.append(pos)
        negative.append(neg)
        h = grid.spacing[axis]
        zero = np.zeros_like(np.take(faces, [0], axis=axis))
        rates += np.concatenate([pos, zero], axis=axis) / h
        rates += np.concatenate([zero, neg], axis=axis) / h
        fastest = max(fastest, float(np.abs(inner).max()) / h if inner.size else 0.0)

    out_rate = float(rates.max())
    substeps = max(
        1,
        math.ceil(tau * out_rate / options.cfl - 1e-12),
        math.ceil(tau * fastest / options.cfl - 1e-12),
    )
    dt = tau / substeps
    values = np.array(rho.values)
    for _ in range(substeps):
        change = np.zeros(grid.shape)
        for axis in range(grid.dim):
            n = grid.cells[axis]
            left = np.take(values, range(0, n - 1), axis=axis)
            right = np.take(values, range(1, n), axis=axis)
            flux = positive[axis] * left - negative[axis] * right
            zero = np.zeros_like(np.take(values, [0], axis=axis))
            flux = np.concatenate([zero, flux, zero], axis=axis)
            upper = np.take(flux, range(1, n + 1), axis=axis)
            lower = np.take(flux, range(0, n), axis=axis)
            change -= (upper - lower) / grid.spacing[axis]
        values = values + dt * change
    return core.DensityField(grid, values), dt * out_rate, substeps


def advect(
    rho: core.DensityField,
    u: core.VelocityField,
    tau: float,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> core.DensityField:
    """Upwind finite volume transport over tau, sub-stepped under the CFL cap."""
    return _advect(rho, u, tau, options)[0]


@functools.lru_cache(maxsize=16)
def _heat_solver(grid: core.Grid, tau: float) -> Callable[[np.ndarray], np.ndarray]:
    laplacian = core.neumann_laplacian(grid)
    system = (identity(grid.size, format="csc") - tau * laplacian).tocsc()
    try:
        return splu(system).solve
    except RuntimeError as e:
        raise LinearSolveError(f"heat step factorization failed: {e}") from e


def diffuse(
    rho: core.DensityField,
    tau: float,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> core.DensityField:
    """One backward Euler step of the heat equation with no-flux boundaries."""
    if not tau > 0.0:
        raise ValueError(f"diffusion step must be > 0, got {tau!r}")
    grid = rho.grid
    solution = _heat_solver(grid, float(tau))(rho.values.ravel())
    if not np.all(np.isfinite(solution)):
        raise LinearSolveError("heat step produced non-finite values")
    return core.DensityField(grid, solution.reshape(grid.shape))


def _transport_stage(
    rho: core.DensityField,
    u: core.VelocityField,
    tau: float,
    order: int,
    options: common.SolverOptions,
) -> _Stage:
    if order == 0:
        source = rho
        moved, cfl, substeps = _advect(rho, u, tau, options)
        before = moved
    elif options.split_order == "advect-first":
        source = rho
        moved, cfl, substeps = _advect(rho, u, tau, options)
        before = diffuse(moved, tau, options)
    elif options.split_order == "diffuse-first":
        source = diffuse(rho, tau, options)
        moved, cfl, substeps = _advect(source, u, tau, options)
        before = moved
    else:
        raise ValueError(f"unknown split order {options.split_order!r}")
    certificate = transport.project_with_certificate(before, options)
    return _Stage(
        density=certificate.density,
        transported_from=source,
        transported=moved,
        pre_projection_max=before.max(),
        cfl=cfl,
        substeps=substeps,
        projection_active=certificate.active,
    )


def split_step_first_order(
    rho: core.DensityField,
    u: core.VelocityField,
    t: float,
    tau: float,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> Tuple[core.DensityField, core.PressureField]:
    drift = u.at_time(t)
    stage = _transport_stage(rho, drift, tau, 0, options)
    projected = pressure.admissible_project(stage.density, drift, options)
    return stage.density, projected.pressure


def split_step_second_order(
    rho: core.DensityField,
    u: core.VelocityField,
    t: float,
    tau: float,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> Tuple[core.DensityField, core.PressureField]:
    drift = u.at_time(t)
    stage = _transport_stage(rho, drift, tau, 1, options)
    projected = pressure.admissible_project(stage.density, drift, options)
    return stage.density, projected.pressure


def _step_distance(stage: _Stage, options: common.SolverOptions) -> Optional[float]:
    if stage.transported_from.grid.dim == 1:
        return transport.w2_exact_1d(stage.transported, stage.transported_from)
    try:
        cost, _, _ = transport.lp_transport(
            stage.transported, stage.transported_from, options
        )
    except transport.LPSizeError:
        log.debug("dynamics:run:step estimate skipped, grid over the LP cap")
        return None
    return math.sqrt(max(0.0, cost))


def _step_bounds(
    rho: core.DensityField, u: core.VelocityField, tau: float
) -> Tuple[float, float, float]:
    """(tau sup|u|)^2, the 2D quantization allowance, and the L2 bound."""
    grid = rho.grid
    speed = u.face_linf()
    bound = (tau * speed) ** 2
    allowance = 0.0
    if grid.dim > 1:
        # Upwind transfer between cell centers costs up to h per unit time.
        allowance = grid.dim * grid.h * tau * speed
    _, weights = core.gradient_operator(grid)
    faces = u.face_vector()
    bound_l2 = tau * tau * float(np.dot(weights, faces * faces)) * rho.max()
    return bound, allowance, bound_l2


def _frame(
    step: int,
    t: float,
    rho: core.DensityField,
    u: core.VelocityField,
    options: common.SolverOptions,
) -> Frame:
    if not options.reconstruct_pressure:
        return Frame(step, t, rho)
    result = pressure.admissible_project(rho, u, options)
    return Frame(step, t, rho, result.pressure, result.converged)


def run(
    scenario: Scenario, options: Optional[common.SolverOptions] = None
) -> Trajectory:
    """Iterate the scheme of the scenario's order from the projected initial density."""
    options = options or scenario.options
    grid = scenario.grid
    steps = scenario.step_count
    log.info(
        f"dynamics:run:order={scenario.order} cells={grid.cells} "
        + f"tau={scenario.tau!r} horizon={scenario.horizon!r} steps={steps}"
    )
    try:
        rho = transport.wasserstein_project(scenario.initial_density(), options)
        drift = scenario.velocity(0.0)
        trajectory = Trajectory(grid, scenario.order, scenario.tau, scenario)
        trajectory.append_frame(_frame(0, 0.0, rho, drift, options))
    except Exception as e:
        raise SimulationError(0, e) from e
    start_mass = rho.mass()

    t = 0.0
    for step in range(1, steps + 1):
        t_next = scenario.horizon if step == steps else step * scenario.tau
        dt = t_next - t
        try:
            drift = drift.at_time(t)
            stage = _transport_stage(rho, drift, dt, scenario.order, options)
            w2_step = None
            stride = options.step_estimate_stride
            if stride > 0 and step % stride == 0:
                w2_step = _step_distance(stage, options)
            bound, allowance, bound_l2 = _step_bounds(
                stage.transported_from, drift, dt
            )
            rho = stage.density
            recorded = step == steps or step % max(1, options.frame_stride) == 0
            status = "skipped"
            if recorded:
                frame = _frame(step, t_next, rho, drift, options)
                trajectory.append_frame(frame)
                if frame.pressure_converged is not None:
                    converged = frame.pressure_converged
                    status = "reconstructed" if converged else "not-converged"
        except SimulationError:
            raise
        except Exception as e:
            log.error(f"dynamics:run:step {step} failed: {e}")
            raise SimulationError(step, e) from e

        mass = rho.mass()
        trajectory.diagnostics.append(
            StepDiagnostics(
                step=step,
                t=t_next,
                tau=dt,
                mass=mass,
                mass_drift=abs(mass - start_mass),
                max_density=rho.max(),
                pre_projection_max=stage.pre_projection_max,
                cfl=stage.cfl,
                substeps=stage.substeps,
                projection_active=stage.projection_active,
                w2_step=w2_step,
                step_bound=bound,
                step_allowance=allowance,
                step_bound_l2=bound_l2,
                pressure_status=status,
            )
        )
        t = t_next

    log.info(
        f"dynamics:run:done, {len(trajectory)} frames, max density "
        + f"{trajectory.max_density()!r}, mass drift {trajectory.mass_drift()!r}"
    )
    return trajectory


@dataclasses.dataclass(frozen=True)
class NeumannTestFunction:
    """A smooth test function with zero normal derivative on the boundary.

    `kind` is "constant", "cosine" (cos(k pi x / L) along `axis`) or
    "smoothstep" (3 s^2 - 2 s^3 with s = x / L along `axis`).
    """

    name: str
    kind: str
    axis: int = 0
    mode: int = 0
    length: float = 1.0

    def value(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.ones(len(points))
        x = points[:, self.axis]
        if self.kind == "cosine":
            return np.cos(self.mode * np.pi * x / self.length)
        s = x / self.length
        return 3.0 * s * s - 2.0 * s**3

    def derivative(self, points: np.ndarray) -> np.ndarray:
        """Derivative along `axis`; the others vanish."""
        if self.kind == "constant":
            return np.zeros(len(points))
        x = points[:, self.axis]
        if self.kind == "cosine":
            k = self.mode * np.pi / self.length
            return -k * np.sin(k * x)
        s = x / self.length
        return 6.0 * (s - s * s) / self.length

    def laplacian(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros(len(points))
        x = points[:, self.axis]
        if self.kind == "cosine":
            k = self.mode * np.pi / self.length
            return -k * k * np.cos(k * x)
        s = x / self.length
        return (6.0 - 12.0 * s) / self.length**2


def neumann_test_functions(grid: core.Grid) -> List[NeumannTestFunction]:
    functions = [NeumannTestFunction("constant", "constant")]
    names = "xy"
    for axis in range(grid.dim):
        length = grid.extent[axis]
        for mode in (1, 2):
            functions.append(
                NeumannTestFunction(
                    f"cos{mode}-{names[axis]}", "cosine", axis, mode, length
                )
            )
        functions.append(
            NeumannTestFunction(
                f"smoothstep-{names[axis]}", "smoothstep", axis, 0, length
            )
        )
    return functions


@dataclasses.dataclass(frozen=True)
class WeakResidualEntry:
    start: float
    end: float
    test_function: str
    residual: float


@dataclasses.dataclass(frozen=True)
class WeakResidualReport:
    entries: Tuple[WeakResidualEntry, ...]

    @property
    def max_residual(self) -> float:
        return max((e.residual for e in self.entries), default=0.0)

    def for_function(self, name: str) -> float:
        residuals = [e.residual for e in self.entries if e.test_function == name]
        return max(residuals, default=0.0)


def weak_residual(
    trajectory: Trajectory,
    u: core.VelocityField,
    test_functions: Optional[Sequence[NeumannTestFunction]] = None,
) -> WeakResidualReport:
    """Residual of the weak form between consecutive recorded frames.

    On [r, s] the flux term is evaluated with the density and pressure of
    frame s and the drift at time r, on interior faces only.
    """
    grid = trajectory.grid
    if test_functions is None:
        test_functions = neumann_test_functions(grid)
    for frame in trajectory.frames[1:]:
        if frame.pressure is None:
            raise MissingPressureError(f"frame at t={frame.t!r} has no pressure")

    centers = grid.centers()
    vol = grid.cell_volume
    entries = []
    for before, after in zip(trajectory.frames, trajectory.frames[1:]):
        assert after.pressure is not None
        drift = u.at_time(before.t)
        p = after.pressure.values.ravel()
        rho = after.density.values
        for phi in test_functions:
            flux = 0.0
            for axis in range(grid.dim):
                mask = grid.interior_face_mask(axis)
                weights = grid.face_weights(axis)[mask]
                positions = grid.face_positions(axis)[mask]
                pushed = core.face_gradient(grid, axis) @ p
                pushed = pushed.reshape(grid.face_shape(axis))
                velocity = (drift.face_values(axis) - pushed)[mask]
                density = core.cell_to_face(grid, axis, rho)[mask]
                slope = phi.derivative(positions) if phi.axis == axis else 0.0
                flux += float(np.sum(weights * density * velocity * slope))
            diffusion = 0.0
            if trajectory.order == 1:
                diffusion = vol * float(np.dot(rho.ravel(), phi.laplacian(centers)))
            values = phi.value(centers)
            delta = after.density.values.ravel() - before.density.values.ravel()
            change = vol * float(np.dot(values, delta))
            lhs = (after.t - before.t) * (flux + diffusion)
            entries.append(
                WeakResidualEntry(before.t, after.t, phi.name, abs(change - lhs))
            )
    return WeakResidualReport(tuple(entries))


@dataclasses.dataclass(frozen=True)
class ConvergenceStudy:
    cells: Tuple[Tuple[int, ...], ...]
    taus: Tuple[float, ...]
    gaps: Tuple[float, ...]
    ratios: Tuple[float, ...]

    def passed(self, min_ratio: float = 1.5) -> bool:
        return bool(self.ratios) and all(r >= min_ratio for r in self.ratios)


def _terminal_density(scenario: Scenario) -> core.DensityField:
    return run(scenario).final()


def convergence_study(
    scenario: Scenario, levels: int = 3, workers: Optional[int] = None
) -> ConvergenceStudy:
    """Run (h, tau) / 2^k for k < levels and compare terminal densities.

    Terminal fields are aggregated onto the coarsest grid; gaps are L1
    distances between successive levels and ratios are gap_k / gap_(k+1).
    """
    if levels < 2:
        raise ValueError("a convergence study needs at least 2 levels")
    quiet = scenario.options.replace(
        reconstruct_pressure=False, step_estimate_stride=0, frame_stride=10**9
    )
    scenarios = [scenario.refined(k).replace(options=quiet) for k in range(levels)]
    workers = workers or common.thread_cap() or levels

    futures: List[Future] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for refined in scenarios:
            log.debug(f"dynamics:convergence_study:starting cells={refined.grid.cells}")
            futures.append(pool.submit(_terminal_density, refined))
        finals = [future.result() for future in futures]

    coarse = []
    for level, final in enumerate(finals):
        for _ in range(level):
            final = final.restrict_to(final.grid.coarsened())
        coarse.append(final)
    gaps = tuple(core.l1_distance(a, b) for a, b in zip(coarse, coarse[1:]))
    ratios = tuple(
        a / b if b > 0.0 else math.inf for a, b in zip(gaps, gaps[1:])
    )
    return ConvergenceStudy(
        cells=tuple(s.grid.cells for s in scenarios),
        taus=tuple(s.tau for s in scenarios),
        gaps=gaps,
        ratios=ratios,
    )
