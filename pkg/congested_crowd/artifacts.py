# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Writers for the files a run leaves behind: CSV tables, field dumps, PGMs.

Every artifact is rendered to memory first and then written atomically, so a
reader never sees a half-written file. Nothing time- or host-dependent goes
into an artifact: identical runs produce byte-identical files.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import math
import os
import tempfile
from typing import Any
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Sequence
from typing import Union

import numpy as np

from congested_crowd import common
from congested_crowd import core
from congested_crowd import dynamics
from congested_crowd import transport
from congested_crowd.common import log


def atomic_write(path: str, data: Union[str, bytes]) -> None:
    """Write to a temporary file next to `path`, then rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    with tempfile.NamedTemporaryFile(
        dir=directory, prefix=".tmp-", delete=False
    ) as handle:
        try:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        except BaseException:
            handle.close()
            os.unlink(handle.name)
            raise
    os.replace(handle.name, path)
    log.debug(f"artifacts:atomic_write:{path} ({len(payload)} bytes)")


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else common.format_float(float(value))
    return str(value)


def table_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def field_csv(values: np.ndarray, grid: core.Grid, t: float) -> str:
    """Header line, then one row per x index holding the values along y."""
    rows = np.asarray(values).reshape(grid.cells[0], -1)
    lines = [grid.header(t)]
    for row in rows:
        lines.append(",".join(common.format_float(v) for v in row))
    return "\n".join(lines) + "\n"


def velocity_csv(u: core.VelocityField) -> str:
    grid = u.grid
    names = "xy"[: grid.dim]
    lines = [grid.header(u.t), ",".join(["cell"] + [f"u{n}" for n in names])]
    values = u.values.reshape(grid.size, grid.dim)
    for cell, vector in enumerate(values):
        lines.append(",".join([str(cell)] + [common.format_float(v) for v in vector]))
    return "\n".join(lines) + "\n"


def plan_csv(plan: transport.TransportPlan) -> str:
    return table_csv(("i", "j", "mass"), plan.triples())


def pgm(rho: core.DensityField) -> bytes:
    """Binary greyscale map, 255 where the density reaches 1, y pointing up."""
    grid = rho.grid
    levels = np.rint(255.0 * np.minimum(rho.values, 1.0)).astype(np.uint8)
    if grid.dim == 1:
        image = levels.reshape(1, -1)
    else:
        image = levels.T[::-1, :]
    height, width = image.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + image.tobytes()


def summary_text(entries: Mapping[str, Any]) -> str:
    return "".join(f"{key} = {format_cell(value)}\n" for key, value in entries.items())


def write_trajectory(
    out_dir: str, trajectory: dynamics.Trajectory, heatmaps: bool = False
) -> List[str]:
    """Frames, optional heatmaps and the per-step metrics table."""
    written = []
    grid = trajectory.grid
    for index, frame in enumerate(trajectory.frames):
        name = os.path.join(out_dir, f"frame_{index:06d}.csv")
        atomic_write(name, field_csv(frame.density.values, grid, frame.t))
        written.append(name)
        if frame.pressure is not None:
            name = os.path.join(out_dir, f"pressure_{index:06d}.csv")
            atomic_write(name, field_csv(frame.pressure.values, grid, frame.t))
            written.append(name)
        if heatmaps:
            name = os.path.join(out_dir, f"frame_{index:06d}.pgm")
            atomic_write(name, pgm(frame.density))
            written.append(name)
    columns = dynamics.StepDiagnostics.COLUMNS
    rows = [[getattr(d, c) for c in columns] for d in trajectory.diagnostics]
    name = os.path.join(out_dir, "metrics.csv")
    atomic_write(name, table_csv(columns, rows))
    written.append(name)
    return written
