# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Grids, density/velocity/pressure fields and the discrete operators on them.

Fields are cell averages on a uniform Cartesian grid over a box, in one or two
dimensions. Every field is an immutable value object: its array is copied on
construction and marked read-only, so fields can be shared between threads.

Discrete differential operators live on cell faces. Along each axis a grid of
`n` cells has `n + 1` faces; interior faces carry the difference of the two
adjacent cells and the two boundary faces copy the adjacent interior
difference. Face weights are the cell volume inside and half of it on the
boundary, so `G^T W G` is a consistent Laplacian and the divergence defined as
`-G^T W / vol` is the exact adjoint of the gradient.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import dataclasses
import functools
import math
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy import sparse

from congested_crowd import common

NEGATIVE_ROUNDOFF = 1e-12

Params = Mapping[str, Any]


class GridMismatchError(ValueError):
    """Two fields were combined that live on different grids."""


class DomainVolumeError(ValueError):
    """The domain is too small to hold a unit mass under the density cap."""


class InvalidFieldError(ValueError):
    """Field values are negative, non-finite, or of the wrong shape."""


class DegenerateDensityError(ValueError):
    """A density preset produced no mass at all."""


@dataclasses.dataclass(frozen=True)
class Grid:
    """A uniform Cartesian grid over the box [0, extent_0] x [0, extent_1]."""

    extent: Tuple[float, ...]
    cells: Tuple[int, ...]

    def __post_init__(self) -> None:
        extent = tuple(float(e) for e in self.extent)
        cells = tuple(int(n) for n in self.cells)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "cells", cells)
        if len(extent) not in (1, 2) or len(cells) != len(extent):
            raise ValueError(
                f"grid needs one or two axes, got extent={extent} cells={cells}"
            )
        if any(not math.isfinite(e) or e <= 0 for e in extent):
            raise ValueError(f"grid extent must be positive, got {extent}")
        if any(n < 2 for n in cells):
            raise ValueError(f"grid needs at least 2 cells per axis, got {cells}")
        if math.prod(extent) <= 1.0:
            raise DomainVolumeError(
                f"domain volume <= 1 (extent {extent}): a unit mass cannot "
                + "satisfy the density cap with room to move"
            )

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.cells

    @property
    def size(self) -> int:
        return math.prod(self.cells)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extent, self.cells))

    @property
    def h(self) -> float:
        """Largest spacing over the axes."""
        return max(self.spacing)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def volume(self) -> float:
        return math.prod(self.extent)

    def axis_centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def axis_edges(self, axis: int) -> np.ndarray:
        return np.arange(self.cells[axis] + 1) * self.spacing[axis]

    def centers(self) -> np.ndarray:
        """Cell centers as an array of shape (size, dim), row-major order."""
        return _centers(self)

    def face_shape(self, axis: int) -> Tuple[int, ...]:
        shape = list(self.cells)
        shape[axis] += 1
        return tuple(shape)

    def face_positions(self, axis: int) -> np.ndarray:
        """Face centers of the faces normal to `axis`, shape face_shape + (dim,)."""
        coords = [self.axis_centers(a) for a in range(self.dim)]
        coords[axis] = self.axis_edges(axis)
        mesh = np.meshgrid(*coords, indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_weights(self, axis: int) -> np.ndarray:
        weights = np.full(self.face_shape(axis), self.cell_volume)
        index: List[Any] = [slice(None)] * self.dim
        index[axis] = 0
        weights[tuple(index)] *= 0.5
        index[axis] = -1
        weights[tuple(index)] *= 0.5
        return weights

    def interior_face_mask(self, axis: int) -> np.ndarray:
        mask = np.ones(self.face_shape(axis), dtype=bool)
        index: List[Any] = [slice(None)] * self.dim
        index[axis] = 0
        mask[tuple(index)] = False
        index[axis] = -1
        mask[tuple(index)] = False
        return mask

    def coarsened(self) -> "Grid":
        if any(n % 2 for n in self.cells):
            raise ValueError(f"cannot halve a grid with cells {self.cells}")
        return Grid(self.extent, tuple(n // 2 for n in self.cells))

    def refined(self) -> "Grid":
        return Grid(self.extent, tuple(2 * n for n in self.cells))

    def header(self, t: float) -> str:
        spacing = self.spacing
        h_text = (
            common.format_float(spacing[0])
            if len(set(spacing)) == 1
            else ",".join(common.format_float(s) for s in spacing)
        )
        counts = " ".join(str(n) for n in self.cells)
        return f"# grid {self.dim} {counts} {h_text} {common.format_float(t)}"


@functools.lru_cache(maxsize=64)
def _centers(grid: Grid) -> np.ndarray:
    mesh = np.meshgrid(
        *[grid.axis_centers(a) for a in range(grid.dim)], indexing="ij"
    )
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    centers.setflags(write=False)
    return centers


def _readonly(values: Any, shape: Tuple[int, ...], what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.shape != shape:
        if array.size == math.prod(shape):
            array = array.reshape(shape)
        else:
            raise InvalidFieldError(
                f"{what}: expected shape {shape}, got {array.shape}"
            )
    if not np.all(np.isfinite(array)):
        raise InvalidFieldError(f"{what}: values must be finite")
    array.setflags(write=False)
    return array


def _nonnegative(array: np.ndarray, what: str) -> np.ndarray:
    low = float(array.min()) if array.size else 0.0
    if low >= 0.0:
        return array
    scale = max(1.0, float(np.abs(array).max()))
    if low < -NEGATIVE_ROUNDOFF * scale:
        raise InvalidFieldError(f"{what}: negative entries (min {low!r})")
    clipped = np.maximum(array, 0.0)
    clipped.setflags(write=False)
    return clipped


class DensityField:
    """Cell-averaged density. Nonnegative; unit mass once built by make_density.

    Subprobability fields are representable too, since the projection is
    defined for them.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values: Any) -> None:
        self.grid = grid
        self.values = _nonnegative(
            _readonly(values, grid.shape, "density"), "density"
        )

    def __repr__(self) -> str:
        return (
            f"DensityField(cells={self.grid.cells}, mass={self.mass()!r}, "
            + f"max={self.max()!r})"
        )

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def max(self) -> float:
        return float(self.values.max())

    def cell_masses(self) -> np.ndarray:
        return self.values.ravel() * self.grid.cell_volume

    def is_feasible(
        self, tolerance: float = common.DEFAULT_OPTIONS.constraint_tolerance
    ) -> bool:
        return self.max() <= 1.0 + tolerance

    def normalized(self) -> "DensityField":
        total = self.mass()
        if total <= 0.0:
            raise DegenerateDensityError("degenerate density")
        return DensityField(self.grid, self.values / total)

    def saturated(self, threshold: float) -> np.ndarray:
        """Boolean mask of the saturated set {rho >= 1 - threshold}."""
        return self.values >= 1.0 - threshold

    def restrict_to(self, coarse: Grid) -> "DensityField":
        """Aggregate onto a grid with half the cells per axis, exactly."""
        if coarse.extent != self.grid.extent or any(
            2 * c != f for c, f in zip(coarse.cells, self.grid.cells)
        ):
            raise GridMismatchError(
                f"cannot restrict {self.grid.cells} onto {coarse.cells}"
            )
        values = self.values
        if self.grid.dim == 1:
            coarse_values = 0.5 * (values[0::2] + values[1::2])
        else:
            coarse_values = 0.25 * (
                values[0::2, 0::2]
                + values[1::2, 0::2]
                + values[0::2, 1::2]
                + values[1::2, 1::2]
            )
        return DensityField(coarse, coarse_values)

    def equals(self, other: "DensityField") -> bool:
        return self.grid == other.grid and np.array_equal(self.values, other.values)


class PressureField:
    """Nonnegative cell pressure, zero off the saturated set."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values: Any) -> None:
        self.grid = grid
        self.values = _nonnegative(
            _readonly(values, grid.shape, "pressure"), "pressure"
        )

    def __repr__(self) -> str:
        top = float(self.values.max())
        return f"PressureField(cells={self.grid.cells}, max={top!r})"

    @classmethod
    def zeros(cls, grid: Grid) -> "PressureField":
        return cls(grid, np.zeros(grid.shape))

    def complementarity(self, rho: DensityField, threshold: float) -> float:
        """max p * (1 - rho - threshold)_+; zero when p respects the saturated set."""
        check_same_grid(self.grid, rho.grid)
        slack = np.maximum(0.0, 1.0 - rho.values - threshold)
        return float((self.values * slack).max())


@dataclasses.dataclass(frozen=True)
class VelocityPreset:
    """A closed-form drift u(t, x), evaluated anywhere in the box."""

    name: str
    params: Tuple[Tuple[str, Any], ...] = ()

    def param(self, name: str, default: Any = None) -> Any:
        for key, value in self.params:
            if key == name:
                return value
        return default

    def modulation(self, t: float) -> float:
        amplitude = float(self.param("amplitude", 0.0))
        period = float(self.param("period", 1.0))
        if amplitude == 0.0:
            return 1.0
        return 1.0 + amplitude * math.sin(2.0 * math.pi * t / period)

    def evaluate(self, t: float, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        dim = points.shape[-1]
        builder = _VELOCITY_BUILDERS.get(self.name)
        if builder is None:
            raise ValueError(f"velocity preset {self.name!r} has no closed form")
        return self.modulation(t) * builder(self, points, dim)

    def analytic_lambda(self, dim: int) -> Optional[float]:
        """Smallest lambda with (u(x)-u(y)).(x-y) <= lambda|x-y|^2, if known."""
        if self.name in ("zero", "constant", "rotation"):
            base: Optional[float] = 0.0
        elif self.name == "potential":
            base = -float(self.param("stiffness", 1.0))
        elif self.name == "linear":
            matrix = _vector(self.param("matrix"), dim * dim, "matrix").reshape(
                dim, dim
            )
            base = float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T)).max())
        else:
            return None
        amplitude = abs(float(self.param("amplitude", 0.0)))
        return base * (1.0 + amplitude) if base >= 0.0 else base * (1.0 - amplitude)


class VelocityField:
    """The spontaneous drift sampled at cell centers, at time `t`.

    Advection and the cone projection work on faces: presets are evaluated at
    face centers, tables are averaged from the two adjacent cells. `faces`
    overrides both, which is how the admissible velocity of the cone
    projection keeps its exact face values.
    """

    __slots__ = ("grid", "values", "t", "preset", "faces")

    def __init__(
        self,
        grid: Grid,
        values: Any,
        t: float = 0.0,
        preset: Optional[VelocityPreset] = None,
        faces: Optional[Sequence[np.ndarray]] = None,
    ) -> None:
        self.grid = grid
        self.values = _readonly(values, grid.shape + (grid.dim,), "velocity")
        self.t = float(t)
        self.preset = preset
        if faces is not None:
            faces = tuple(
                _readonly(f, grid.face_shape(axis), "face velocity")
                for axis, f in enumerate(faces)
            )
        self.faces = faces

    def __repr__(self) -> str:
        name = self.preset.name if self.preset is not None else "table"
        return f"VelocityField({name}, t={self.t!r}, cells={self.grid.cells})"

    @classmethod
    def from_preset(
        cls, grid: Grid, preset: VelocityPreset, t: float = 0.0
    ) -> "VelocityField":
        values = preset.evaluate(t, grid.centers()).reshape(grid.shape + (grid.dim,))
        return cls(grid, values, t=t, preset=preset)

    def at_time(self, t: float) -> "VelocityField":
        if self.preset is None:
            return VelocityField(self.grid, self.values, t=t, faces=self.faces)
        return VelocityField.from_preset(self.grid, self.preset, t)

    def face_values(self, axis: int) -> np.ndarray:
        """Normal component on the faces normal to `axis`."""
        if self.faces is not None:
            return self.faces[axis]
        if self.preset is not None:
            return _preset_faces(self.grid, self.preset, self.t, axis)
        return cell_to_face(self.grid, axis, self.values[..., axis])

    def face_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.face_values(a).ravel() for a in range(self.grid.dim)]
        )

    def scaled(self, factor: float) -> "VelocityField":
        faces = None
        if self.faces is not None or self.preset is not None:
            faces = [factor * self.face_values(a) for a in range(self.grid.dim)]
        return VelocityField(self.grid, factor * self.values, t=self.t, faces=faces)

    def linf(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def face_linf(self) -> float:
        return max(
            float(np.abs(self.face_values(a)).max()) for a in range(self.grid.dim)
        )


Field = Union[DensityField, PressureField, VelocityField]


def _preset_faces(
    grid: Grid, preset: VelocityPreset, t: float, axis: int
) -> np.ndarray:
    positions = grid.face_positions(axis)
    flat = positions.reshape(-1, grid.dim)
    return preset.evaluate(t, flat)[:, axis].reshape(grid.face_shape(axis))


def check_same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise GridMismatchError(f"fields live on different grids: {a} vs {b}")


def mass(rho: DensityField) -> float:
    return rho.mass()


def linf(field: Field) -> float:
    if isinstance(field, VelocityField):
        return field.linf()
    return float(np.abs(field.values).max()) if field.values.size else 0.0


def l1_distance(a: DensityField, b: DensityField) -> float:
    check_same_grid(a.grid, b.grid)
    return float(np.abs(a.values - b.values).sum() * a.grid.cell_volume)


# ---------------------------------------------------------------------------
# Discrete operators


@functools.lru_cache(maxsize=64)
def _difference_1d(n: int, h: float) -> sparse.csr_matrix:
    rows = []
    cols = []
    data = []
    for face in range(n + 1):
        left = min(max(face, 1), n - 1)
        rows += [face, face]
        cols += [left - 1, left]
        data += [-1.0 / h, 1.0 / h]
    return sparse.csr_matrix((data, (rows, cols)), shape=(n + 1, n))


@functools.lru_cache(maxsize=64)
def face_gradient(grid: Grid, axis: int) -> sparse.csr_matrix:
    """Cells to faces normal to `axis`; boundary faces copy the next difference."""
    diff = _difference_1d(grid.cells[axis], grid.spacing[axis])
    if grid.dim == 1:
        return diff
    others = [sparse.identity(n, format="csr") for n in grid.cells]
    others[axis] = diff
    return sparse.kron(others[0], others[1], format="csr")


@functools.lru_cache(maxsize=64)
def gradient_operator(grid: Grid) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Stacked face gradient G and the matching face weights W."""
    blocks = [face_gradient(grid, a) for a in range(grid.dim)]
    weights = np.concatenate([grid.face_weights(a).ravel() for a in range(grid.dim)])
    weights.setflags(write=False)
    return sparse.vstack(blocks, format="csr"), weights


@functools.lru_cache(maxsize=64)
def neumann_laplacian(grid: Grid) -> sparse.csr_matrix:
    """Five-point (three-point in 1D) Laplacian with zero normal flux."""
    blocks = []
    for axis in range(grid.dim):
        n = grid.cells[axis]
        h = grid.spacing[axis]
        main = np.full(n, -2.0)
        main[0] = main[-1] = -1.0
        off = np.ones(n - 1)
        lap = sparse.diags([off, main, off], [-1, 0, 1], format="csr") / (h * h)
        if grid.dim == 1:
            blocks.append(lap)
            continue
        others = [sparse.identity(m, format="csr") for m in grid.cells]
        others[axis] = lap
        blocks.append(sparse.kron(others[0], others[1], format="csr"))
    total = blocks[0]
    for block in blocks[1:]:
        total = total + block
    return total.tocsr()


def cell_to_face(grid: Grid, axis: int, values: np.ndarray) -> np.ndarray:
    """Average two neighbouring cells onto their face; boundary faces copy."""
    values = np.asarray(values, dtype=np.float64).reshape(grid.shape)
    first = np.take(values, [0], axis=axis)
    last = np.take(values, [-1], axis=axis)
    lower = np.take(values, range(0, grid.cells[axis] - 1), axis=axis)
    upper = np.take(values, range(1, grid.cells[axis]), axis=axis)
    return np.concatenate([first, 0.5 * (lower + upper), last], axis=axis)


def face_to_cell(grid: Grid, axis: int, face_values: np.ndarray) -> np.ndarray:
    face_values = np.asarray(face_values, dtype=np.float64).reshape(
        grid.face_shape(axis)
    )
    lower = np.take(face_values, range(0, grid.cells[axis]), axis=axis)
    upper = np.take(face_values, range(1, grid.cells[axis] + 1), axis=axis)
    return 0.5 * (lower + upper)


def split_faces(grid: Grid, vector: np.ndarray) -> List[np.ndarray]:
    """Cut a stacked face vector back into per-axis face arrays."""
    pieces = []
    start = 0
    for axis in range(grid.dim):
        shape = grid.face_shape(axis)
        count = math.prod(shape)
        pieces.append(np.asarray(vector[start : start + count]).reshape(shape))
        start += count
    return pieces


def divergence_negative_part(u: VelocityField) -> float:
    """L-infinity norm of the negative part of the discrete divergence of u."""
    grid = u.grid
    div = np.zeros(grid.shape)
    for axis in range(grid.dim):
        faces = u.face_values(axis)
        upper = np.take(faces, range(1, grid.cells[axis] + 1), axis=axis)
        lower = np.take(faces, range(0, grid.cells[axis]), axis=axis)
        div += (upper - lower) / grid.spacing[axis]
    return float(np.maximum(0.0, -div).max())


# ---------------------------------------------------------------------------
# Presets


def _vector(value: Any, length: int, name: str) -> np.ndarray:
    if value is None:
        raise ValueError(f"preset parameter {name!r} is required")
    array = np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel()
    if array.size == 1 and length > 1:
        array = np.full(length, float(array[0]))
    if array.size != length:
        raise ValueError(f"preset parameter {name!r} needs {length} numbers")
    return array


def _box_overlap(grid: Grid, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    fractions = []
    for axis in range(grid.dim):
        edges = grid.axis_edges(axis)
        left = np.maximum(edges[:-1], lo[axis])
        right = np.minimum(edges[1:], hi[axis])
        fractions.append(np.maximum(0.0, right - left) / grid.spacing[axis])
    if grid.dim == 1:
        return fractions[0]
    return np.multiply.outer(fractions[0], fractions[1])


def _raised_cosine(grid: Grid, center: np.ndarray, radius: float) -> np.ndarray:
    distance = np.linalg.norm(grid.centers() - center, axis=-1)
    bump = np.where(
        distance < radius, 0.5 * (1.0 + np.cos(np.pi * distance / radius)), 0.0
    )
    return bump.reshape(grid.shape)


def _density_uniform(
    grid: Grid, params: Params, rng: np.random.Generator
) -> np.ndarray:
    return np.ones(grid.shape)


def _density_box(grid: Grid, params: Params, rng: np.random.Generator) -> np.ndarray:
    lo = _vector(params.get("lo", 0.0), grid.dim, "lo")
    hi = _vector(params.get("hi", grid.extent), grid.dim, "hi")
    return _box_overlap(grid, lo, hi)


def _density_indicator(
    grid: Grid, params: Params, rng: np.random.Generator
) -> np.ndarray:
    lo = _vector(params.get("lo"), grid.dim, "lo")
    hi = _vector(params.get("hi"), grid.dim, "hi")
    return _box_overlap(grid, lo, hi)


def _density_bump(grid: Grid, params: Params, rng: np.random.Generator) -> np.ndarray:
    center = _vector(params.get("center"), grid.dim, "center")
    radius = float(params.get("radius", 0.25))
    return _raised_cosine(grid, center, radius)


def _density_two_bumps(
    grid: Grid, params: Params, rng: np.random.Generator
) -> np.ndarray:
    centers = _vector(params.get("centers"), 2 * grid.dim, "centers").reshape(
        2, grid.dim
    )
    radius = float(params.get("radius", 0.25))
    weights = _vector(params.get("weights", 1.0), 2, "weights")
    total = np.zeros(grid.shape)
    for center, weight in zip(centers, weights):
        bump = _raised_cosine(grid, center, radius)
        bump_mass = bump.sum() * grid.cell_volume
        if bump_mass > 0.0:
            total += weight * bump / bump_mass
    return total


def _density_table(grid: Grid, params: Params, rng: np.random.Generator) -> np.ndarray:
    return _vector(params.get("values"), grid.size, "values").reshape(grid.shape)


def _density_random(grid: Grid, params: Params, rng: np.random.Generator) -> np.ndarray:
    low = float(params.get("low", 0.0))
    high = float(params.get("high", 1.0))
    sparsity = float(params.get("sparsity", 0.0))
    values = rng.uniform(low, high, size=grid.shape)
    if sparsity > 0.0:
        values[rng.random(grid.shape) < sparsity] = 0.0
    return values


DensityBuilder = Callable[[Grid, Params, np.random.Generator], np.ndarray]
DENSITY_PRESETS: Dict[str, Tuple[DensityBuilder, Tuple[str, ...]]] = {
    "uniform": (_density_uniform, ()),
    "uniform-on-box": (_density_box, ("lo", "hi")),
    "indicator": (_density_indicator, ("lo", "hi")),
    "bump": (_density_bump, ("center", "radius")),
    "two-bumps": (_density_two_bumps, ("centers", "radius", "weights")),
    "custom-table": (_density_table, ("values",)),
    "random": (_density_random, ("low", "high", "sparsity")),
}


def make_density(
    grid: Grid, preset: str, params: Optional[Params] = None, seed: int = 0
) -> DensityField:
    """Build a preset density and normalize it to unit mass.

    Feasibility is not enforced here; the Wasserstein projection does that.
    """
    params = dict(params or {})
    try:
        builder, allowed = DENSITY_PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown density preset {preset!r}") from None
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ValueError(f"density preset {preset!r} has no parameter {unknown[0]!r}")

    raw = np.asarray(builder(grid, params, np.random.default_rng(seed)), dtype=float)
    if not np.all(np.isfinite(raw)):
        raise InvalidFieldError(f"density preset {preset!r} produced non-finite values")
    if raw.min() < 0.0:
        raise InvalidFieldError(f"density preset {preset!r} has negative entries")
    total = raw.sum() * grid.cell_volume
    if total <= 0.0:
        raise DegenerateDensityError("degenerate density")
    return DensityField(grid, raw / total)


def _velocity_zero(preset: VelocityPreset, points: np.ndarray, dim: int) -> np.ndarray:
    return np.zeros_like(points)


def _velocity_constant(
    preset: VelocityPreset, points: np.ndarray, dim: int
) -> np.ndarray:
    vector = _vector(preset.param("vector"), dim, "vector")
    return np.broadcast_to(vector, points.shape).copy()


def _velocity_potential(
    preset: VelocityPreset, points: np.ndarray, dim: int
) -> np.ndarray:
    center = _vector(preset.param("center"), dim, "center")
    stiffness = float(preset.param("stiffness", 1.0))
    return -stiffness * (points - center)


def _velocity_linear(
    preset: VelocityPreset, points: np.ndarray, dim: int
) -> np.ndarray:
    matrix = _vector(preset.param("matrix"), dim * dim, "matrix").reshape(dim, dim)
    center = _vector(preset.param("center", 0.0), dim, "center")
    offset = _vector(preset.param("offset", 0.0), dim, "offset")
    return (points - center) @ matrix.T + offset


def _velocity_rotation(
    preset: VelocityPreset, points: np.ndarray, dim: int
) -> np.ndarray:
    if dim != 2:
        raise ValueError("the rotation preset needs a 2D grid")
    center = _vector(preset.param("center"), dim, "center")
    omega = float(preset.param("omega", 1.0))
    shifted = points - center
    return omega * np.stack([-shifted[..., 1], shifted[..., 0]], axis=-1)


def _velocity_piecewise(
    preset: VelocityPreset, points: np.ndarray, dim: int
) -> np.ndarray:
    breaks = np.sort(np.atleast_1d(np.asarray(preset.param("breaks", ()), dtype=float)))
    values = _vector(preset.param("values"), breaks.size + 1, "values")
    result = np.zeros_like(points)
    result[..., 0] = values[np.searchsorted(breaks, points[..., 0], side="right")]
    return result


VelocityBuilder = Callable[[VelocityPreset, np.ndarray, int], np.ndarray]
_VELOCITY_BUILDERS: Dict[str, VelocityBuilder] = {
    "zero": _velocity_zero,
    "constant": _velocity_constant,
    "potential": _velocity_potential,
    "linear": _velocity_linear,
    "rotation": _velocity_rotation,
    "piecewise": _velocity_piecewise,
}

MODULATION_PARAMS = ("amplitude", "period")
VELOCITY_PRESETS: Dict[str, Tuple[str, ...]] = {
    "zero": (),
    "constant": ("vector",),
    "potential": ("center", "stiffness"),
    "linear": ("matrix", "center", "offset"),
    "rotation": ("center", "omega"),
    "piecewise": ("breaks", "values"),
    "table": ("values",),
}


def make_velocity(
    grid: Grid, preset: str, params: Optional[Params] = None, t: float = 0.0
) -> VelocityField:
    params = dict(params or {})
    if preset not in VELOCITY_PRESETS:
        raise ValueError(f"unknown velocity preset {preset!r}")
    allowed = VELOCITY_PRESETS[preset] + MODULATION_PARAMS
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ValueError(f"velocity preset {preset!r} has no parameter {unknown[0]!r}")
    if preset == "table":
        values = _vector(params.get("values"), grid.size * grid.dim, "values")
        return VelocityField(grid, values.reshape(grid.shape + (grid.dim,)), t=t)

    frozen = VelocityPreset(preset, tuple(sorted(params.items())))
    # Evaluate once so a bad parameter fails here and not mid-simulation.
    return VelocityField.from_preset(grid, frozen, t)
