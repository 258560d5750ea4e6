# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Common functions and variables needed by more than one module."""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

# Be careful editing this! Every other module imports from here, so don't
# import anything from congested_crowd.

import dataclasses
import os
import sys
import time
import traceback
from functools import partial
from io import StringIO
from typing import Any
from typing import Dict
from typing import IO
from typing import List
from typing import Mapping
from typing import Optional

PACKAGE_VERSION = (1, 0, 0)
DEBUG_ENV = "CONGESTED_CROWD_DEBUG"
THREADS_ENV = "CONGESTED_CROWD_THREADS"
TRUE_STRINGS = frozenset(["1", "true", "yes", "on"])
FALSE_STRINGS = frozenset(["0", "false", "no", "off"])


class Logger:
    LEVELS = {"DEBUG": 0, "INFO": 1, "WARN": 2, "ERROR": 3}

    def __init__(
        self, log_level: Optional[str] = None, outputs: Optional[List[IO]] = None
    ) -> None:
        self.log_level = "INFO"
        if DEBUG_ENV in os.environ:
            self.log_level = "DEBUG"
        if log_level is not None:
            self.log_level = log_level

        self.outputs = outputs if outputs is not None else [sys.stderr]

        self.debug = partial(self.print_formatted_log, "DEBUG")
        self.info = partial(self.print_formatted_log, "INFO")
        self.warn = self.warning = partial(self.print_formatted_log, "WARN")
        self.error = partial(self.print_formatted_log, "ERROR")

    def __call__(self, logmsg) -> None:
        self.info(logmsg)

    @staticmethod
    def _tag_args(level: str, *args: Any) -> List[str]:
        now = time.localtime()
        buf = StringIO()
        tagged_args: List[str] = []
        for arg in args:
            buf.write(time.strftime("%Y-%m-%d %H:%M:%S", now))
            buf.write(" [")
            buf.write(level)
            buf.write("] ")
            buf.write(str(arg))

            tagged_args.append(buf.getvalue())
            buf.seek(0)
            buf.truncate(0)

        return tagged_args

    def _prints(self, level: str, *args: str) -> None:
        if self.LEVELS[level] < self.LEVELS[self.log_level]:
            return
        for o in self.outputs:
            for arg in args:
                o.write(arg)
                o.write("\n")
            if hasattr(o, "flush"):
                o.flush()

    def print_formatted_log(self, level: str, *args: Any) -> None:
        tagged_args = self._tag_args(level, *args)
        self._prints(level, *tagged_args)

    def exception(self, *args: Any, **kwargs: Any) -> None:
        limit = kwargs.pop("limit", None)
        tagged_args = self._tag_args("ERROR", *args)
        self._prints("ERROR", *tagged_args)
        self._prints("ERROR", traceback.format_exc(limit))


log = Logger()


def _help(text: str) -> Dict[str, str]:
    return {"help": text}


@dataclasses.dataclass(frozen=True)
class SolverOptions:
    """Every tolerance and solver knob, in one place.

    Call sites read these instead of hard-coding constants. Values coming from
    scenario files or the command line go through `from_mapping`, which
    coerces them to the type of the field default.
    """

    constraint_tolerance: float = dataclasses.field(
        default=1e-6, metadata=_help("Slack allowed above the density cap of 1.")
    )
    mass_tolerance: float = dataclasses.field(
        default=1e-10, metadata=_help("Allowed deviation from unit mass.")
    )
    saturation_threshold: float = dataclasses.field(
        default=1e-6,
        metadata=_help("Cells with density >= 1 - threshold are saturated."),
    )
    complementarity_tolerance: float = dataclasses.field(
        default=1e-8, metadata=_help("Bound on p * (1 - rho) off the saturated set.")
    )
    ortho_tolerance: float = dataclasses.field(
        default=1e-6,
        metadata=_help("Relative bound on the orthogonality residual of the cone."),
    )
    cone_tolerance: float = dataclasses.field(
        default=1e-6, metadata=_help("Relative bound on the polar cone residual.")
    )
    duality_tolerance: float = dataclasses.field(
        default=1e-8, metadata=_help("Relative duality gap accepted from the LP.")
    )
    plan_tolerance: float = dataclasses.field(
        default=1e-14, metadata=_help("Plan entries below this mass are dropped.")
    )
    lp_cap: int = dataclasses.field(
        default=1048576,
        metadata=_help("Largest number of arcs handed to one exact LP solve."),
    )
    projection_initial_radius: int = dataclasses.field(
        default=4,
        metadata=_help("Initial arc radius, in cells, of the projection LP."),
    )
    projection_max_rounds: int = dataclasses.field(
        default=16, metadata=_help("Arc-generation rounds of the projection LP.")
    )
    sinkhorn_epsilon: float = dataclasses.field(
        default=0.1,
        metadata=_help("Entropic regularization, in units of the squared spacing."),
    )
    sinkhorn_max_iter: int = dataclasses.field(
        default=20000, metadata=_help("Sinkhorn iteration budget.")
    )
    sinkhorn_stage_iter: int = dataclasses.field(
        default=100,
        metadata=_help("Stabilized Sinkhorn iterations per epsilon stage."),
    )
    sinkhorn_tolerance: float = dataclasses.field(
        default=1e-7, metadata=_help("Sinkhorn marginal violation, in L1.")
    )
    pressure_max_iter: int = dataclasses.field(
        default=20000, metadata=_help("Projected gradient iteration budget.")
    )
    pressure_tolerance: float = dataclasses.field(
        default=1e-8, metadata=_help("Relative projected gradient tolerance.")
    )
    pressure_polish_every: int = dataclasses.field(
        default=25,
        metadata=_help("Projected gradient steps between active-set solves."),
    )
    witness_taper_length: float = dataclasses.field(
        default=0.1,
        metadata=_help("Distance over which pressure witnesses fall to zero."),
    )
    witness_smoothing_passes: int = dataclasses.field(
        default=3, metadata=_help("Averaging passes applied to random witnesses.")
    )
    positivity_constant: float = dataclasses.field(
        default=1.0,
        metadata=_help("C in the C h band allowed below zero by the positivity check."),
    )
    cfl: float = dataclasses.field(
        default=0.9, metadata=_help("Largest CFL number of an advection substep.")
    )
    w2_slack: float = dataclasses.field(
        default=0.10, metadata=_help("Accepted slack of the W2 contraction bound.")
    )
    l1_slack: float = dataclasses.field(
        default=0.05, metadata=_help("Accepted slack of the L1 contraction bound.")
    )
    step_bound_slack: float = dataclasses.field(
        default=0.10, metadata=_help("Accepted slack of the W2 step estimate.")
    )
    step_estimate_stride: int = dataclasses.field(
        default=1,
        metadata=_help("Measure the W2 step estimate every this many steps (0: off)."),
    )
    reconstruct_pressure: bool = dataclasses.field(
        default=True, metadata=_help("Recover the pressure at every recorded frame.")
    )
    frame_stride: int = dataclasses.field(
        default=1, metadata=_help("Record every this many steps, plus the last one.")
    )
    split_order: str = dataclasses.field(
        default="advect-first",
        metadata=_help("Second order step: advect-first or diffuse-first."),
    )
    lambda_samples: int = dataclasses.field(
        default=4096, metadata=_help("Cell pairs sampled when estimating lambda.")
    )
    pgm: bool = dataclasses.field(
        default=False, metadata=_help("Write PGM heatmaps next to frame CSVs.")
    )

    @classmethod
    def option_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def option_help(cls) -> Dict[str, str]:
        return {f.name: f.metadata.get("help", "") for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "SolverOptions":
        """Build options from strings or values, checking each one's type."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        values: Dict[str, Any] = {}
        for name, raw in mapping.items():
            if name not in known:
                raise KeyError(name)
            values[name] = coerce_option(name, raw, known[name].default)
        return cls(**values)

    def replace(self, **changes: Any) -> "SolverOptions":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def coerce_option(name: str, raw: Any, default: Any) -> Any:
    """Make sure a value has the type of the option default."""
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in TRUE_STRINGS:
            return True
        if text in FALSE_STRINGS:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        if isinstance(raw, bool):
            raise ValueError(f"{name}: expected an integer, got {raw!r}")
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ValueError(f"{name}: expected a number, got {raw!r}") from None
    return str(raw).strip()


DEFAULT_OPTIONS = SolverOptions()


def thread_cap() -> Optional[int]:
    """Worker cap from the environment, None when unset."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        log.warning(f"common:thread_cap:ignoring {THREADS_ENV}={raw!r}")
        return None
    return max(1, value)


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; artifacts rely on it."""
    return repr(float(value))
