# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Projection of a drift onto the cone of admissible velocities.

For a feasible density the admissible velocity is v = u - grad p, where p is
the nonnegative pressure supported on the saturated set that minimizes
||u - grad p||^2 in the face-weighted norm. This is a bound-constrained
quadratic program in the saturated cells only; it is solved by projected
gradient with Barzilai-Borwein steps, with a periodic active-set solve that
usually lands on the exact minimizer.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import dataclasses
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy import sparse
from scipy.sparse.linalg import splu

from congested_crowd import common
from congested_crowd import core
from congested_crowd.common import log


@dataclasses.dataclass(frozen=True, eq=False)
class ConeProjectionResult:
    pressure: core.PressureField
    velocity: core.VelocityField
    orthogonality: float
    cone_residual: float
    kkt_residual: float
    complementarity: float
    iterations: int
    converged: bool

    def summary(self) -> str:
        """One-line record of the residuals, for artifacts and logs."""
        return (
            "{"
            + f"converged: {str(self.converged).lower()}, "
            + f"iterations: {self.iterations}, "
            + f"orthogonality: {common.format_float(self.orthogonality)}, "
            + f"cone_residual: {common.format_float(self.cone_residual)}, "
            + f"kkt_residual: {common.format_float(self.kkt_residual)}, "
            + f"complementarity: {common.format_float(self.complementarity)}"
            + "}"
        )


@dataclasses.dataclass(frozen=True)
class EnergyReport:
    drift_energy: float
    pressure_energy: float
    velocity_energy: float
    split_residual: float
    pressure_bounded: bool
    velocity_bounded: bool
    passed: bool


@dataclasses.dataclass(frozen=True)
class ConeCertificate:
    witnesses: int
    max_ratio: float
    passed: bool


def _weighted_norm2(vector: np.ndarray, weights: np.ndarray) -> float:
    return float(np.dot(weights, vector * vector))


def _result(
    rho: core.DensityField,
    u: core.VelocityField,
    p: np.ndarray,
    saturated: np.ndarray,
    iterations: int,
    kkt: float,
    options: common.SolverOptions,
) -> ConeProjectionResult:
    grid = rho.grid
    gradient, weights = core.gradient_operator(grid)
    drift = u.face_vector()
    residual = drift - gradient @ p
    drift_norm2 = _weighted_norm2(drift, weights)

    orthogonality = 0.0
    cone_residual = 0.0
    if drift_norm2 > 0.0:
        product = float(np.dot(weights, (gradient @ p) * residual))
        orthogonality = abs(product) / drift_norm2
        if saturated.any():
            pushed = gradient.T @ (weights * residual)
            column_norms = np.sqrt(
                np.asarray(gradient.multiply(gradient).T @ weights).ravel()
            )
            scale = column_norms[saturated] * np.sqrt(drift_norm2)
            ratios = pushed[saturated] / scale
            cone_residual = max(0.0, float(ratios.max()))

    pressure = core.PressureField(grid, p.reshape(grid.shape))
    complementarity = pressure.complementarity(rho, options.saturation_threshold)
    faces = core.split_faces(grid, residual)
    centers = np.stack(
        [core.face_to_cell(grid, axis, faces[axis]) for axis in range(grid.dim)],
        axis=-1,
    )
    velocity = core.VelocityField(grid, centers, t=u.t, faces=faces)
    converged = (
        kkt <= options.pressure_tolerance
        and orthogonality <= options.ortho_tolerance
        and cone_residual <= options.cone_tolerance
        and complementarity <= options.complementarity_tolerance
    )
    return ConeProjectionResult(
        pressure=pressure,
        velocity=velocity,
        orthogonality=orthogonality,
        cone_residual=cone_residual,
        kkt_residual=kkt,
        complementarity=complementarity,
        iterations=iterations,
        converged=converged,
    )


def _active_set_solve(
    hessian: sparse.csc_matrix, rhs: np.ndarray, active: np.ndarray
) -> Optional[np.ndarray]:
    if not active.any():
        return np.zeros_like(rhs)
    block = hessian[active][:, active].tocsc()
    try:
        solution = splu(block).solve(rhs[active])
    except RuntimeError:
        return None
    candidate = np.zeros_like(rhs)
    candidate[active] = np.maximum(solution, 0.0)
    return candidate


def admissible_project(
    rho: core.DensityField,
    u: core.VelocityField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> ConeProjectionResult:
    """Split u into grad p plus an admissible velocity.

    Non-convergence is reported through `converged` and the residuals, never
    raised.
    """
    core.check_same_grid(rho.grid, u.grid)
    grid = rho.grid
    saturated = rho.saturated(options.saturation_threshold).ravel()
    full = np.zeros(grid.size)
    drift = u.face_vector()
    if not saturated.any() or not np.any(drift):
        return _result(rho, u, full, saturated, 0, 0.0, options)

    gradient, weights = core.gradient_operator(grid)
    restricted = gradient[:, saturated].tocsc()
    weighted = restricted.T.multiply(weights).tocsr()
    hessian = (weighted @ restricted).tocsc()
    rhs = weighted @ drift
    scale = 1.0 + float(np.linalg.norm(rhs))

    def objective(p: np.ndarray) -> float:
        return 0.5 * float(p @ (hessian @ p)) - float(rhs @ p)

    def projected_gradient(p: np.ndarray, grad: np.ndarray) -> float:
        pg = np.where(p > 0.0, grad, np.minimum(grad, 0.0))
        return float(np.linalg.norm(pg)) / scale

    # Gershgorin bound on the largest eigenvalue for the first step.
    step = 1.0 / float(abs(hessian).sum(axis=1).max())
    p = _active_set_solve(hessian, rhs, np.ones(rhs.size, dtype=bool))
    if p is None:
        p = np.zeros(rhs.size)
    grad = hessian @ p - rhs
    kkt = projected_gradient(p, grad)
    iterations = 0
    while kkt > options.pressure_tolerance and iterations < options.pressure_max_iter:
        iterations += 1
        p_next = np.maximum(0.0, p - step * grad)
        grad_next = hessian @ p_next - rhs
        s = p_next - p
        y = grad_next - grad
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0.0 else step
        p, grad = p_next, grad_next

        if iterations % max(1, options.pressure_polish_every) == 0:
            active = (p > 0.0) | (grad < 0.0)
            candidate = _active_set_solve(hessian, rhs, active)
            if candidate is not None and objective(candidate) <= objective(p):
                p = candidate
                grad = hessian @ p - rhs
        kkt = projected_gradient(p, grad)

    full[saturated] = p
    result = _result(rho, u, full, saturated, iterations, kkt, options)
    if not result.converged:
        log.warning(f"pressure:admissible_project:not converged {result.summary()}")
    else:
        log.debug(f"pressure:admissible_project:{result.summary()}")
    return result


def energy_check(
    result: ConeProjectionResult,
    u: core.VelocityField,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> EnergyReport:
    """Check ||u||^2 = ||grad p||^2 + ||v||^2 and both energy bounds."""
    grid = u.grid
    gradient, weights = core.gradient_operator(grid)
    drift = _weighted_norm2(u.face_vector(), weights)
    push = _weighted_norm2(gradient @ result.pressure.values.ravel(), weights)
    velocity = _weighted_norm2(result.velocity.face_vector(), weights)
    if drift > 0.0:
        split = abs(drift - push - velocity) / drift
    else:
        split = abs(push + velocity)
    slack = options.ortho_tolerance * max(drift, 1e-300)
    pressure_bounded = push <= drift + slack
    velocity_bounded = velocity <= drift + slack
    return EnergyReport(
        drift_energy=drift,
        pressure_energy=push,
        velocity_energy=velocity,
        split_residual=split,
        pressure_bounded=pressure_bounded,
        velocity_bounded=velocity_bounded,
        passed=(
            split <= options.ortho_tolerance and pressure_bounded and velocity_bounded
        ),
    )


def _taper(grid: core.Grid, saturated: np.ndarray, length: float) -> np.ndarray:
    if saturated.all() or length <= 0.0:
        return np.ones(grid.shape)
    distance = ndimage.distance_transform_edt(saturated, sampling=grid.spacing)
    return np.minimum(1.0, distance / length)


def sample_pressure_test_functions(
    rho: core.DensityField,
    count: int,
    seed: int = 0,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> List[core.PressureField]:
    """Random nonnegative witnesses supported on the saturated set.

    Each witness is uniform noise on the saturated cells, smoothed by a few
    averaging passes and tapered to zero at the edge of the saturated set.
    """
    grid = rho.grid
    saturated = rho.saturated(options.saturation_threshold)
    if not saturated.any():
        return []
    taper = _taper(grid, saturated, options.witness_taper_length)
    rng = np.random.default_rng(seed)
    witnesses = []
    for _ in range(count):
        q = rng.random(grid.shape) * saturated
        for _ in range(options.witness_smoothing_passes):
            q = ndimage.uniform_filter(q, size=3, mode="nearest") * saturated
        q = q * taper
        if q.max() <= 0.0:
            q = taper * saturated
        witnesses.append(core.PressureField(grid, q))
    return witnesses


def canonical_witnesses(
    rho: core.DensityField,
    result: ConeProjectionResult,
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> List[core.PressureField]:
    """q = p and one tapered indicator per connected saturated component."""
    grid = rho.grid
    saturated = rho.saturated(options.saturation_threshold)
    witnesses = []
    if result.pressure.values.max() > 0.0:
        witnesses.append(result.pressure)
    labels, components = ndimage.label(saturated)
    taper = _taper(grid, saturated, options.witness_taper_length)
    for label in range(1, components + 1):
        witnesses.append(core.PressureField(grid, taper * (labels == label)))
    return witnesses


def cone_certificate(
    rho: core.DensityField,
    result: ConeProjectionResult,
    u: core.VelocityField,
    witnesses: Sequence[core.PressureField] = (),
    options: common.SolverOptions = common.DEFAULT_OPTIONS,
) -> ConeCertificate:
    """Largest normalized <grad q, u - grad p> over given and canonical witnesses."""
    grid = rho.grid
    gradient, weights = core.gradient_operator(grid)
    residual = result.velocity.face_vector()
    drift = np.sqrt(_weighted_norm2(u.face_vector(), weights))
    everything = list(witnesses) + canonical_witnesses(rho, result, options)
    worst = 0.0
    for q in everything:
        values = q.values.ravel()
        grad_q = gradient @ values
        norm_q = np.sqrt(
            grid.cell_volume * float(values @ values) + _weighted_norm2(grad_q, weights)
        )
        if norm_q == 0.0 or drift == 0.0:
            continue
        ratio = float(np.dot(weights, grad_q * residual)) / (norm_q * drift)
        worst = max(worst, ratio)
    return ConeCertificate(
        witnesses=len(everything),
        max_ratio=worst,
        passed=worst <= options.cone_tolerance,
    )
