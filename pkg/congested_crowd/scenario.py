# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Scenario files: parsing, validation and serialization.

A scenario is an INI document with four sections:

    [grid]
    extent = 2.0
    cells = 256

    [initial]
    preset = bump
    center = 0.5
    radius = 0.25

    [velocity]
    preset = potential
    center = 1.0

    [solver]
    order = 0
    horizon = 1.0
    tau = 0.001

Parsing is fail-closed: unknown sections and keys, duplicate keys and invalid
values are all errors that carry the offending key and its line number.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import configparser
import dataclasses
import math
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

from congested_crowd import common
from congested_crowd import core

SECTIONS = ("grid", "initial", "velocity", "solver")
GRID_KEYS = ("extent", "cells", "dim")
SOLVER_KEYS = ("order", "horizon", "tau", "seed")


class ScenarioError(ValueError):
    """A scenario document that can't be used, with where it went wrong."""

    def __init__(
        self, desc: str, key: Optional[str] = None, lineno: Optional[int] = None
    ) -> None:
        self.desc = desc
        self.key = key
        self.lineno = lineno
        where = []
        if lineno is not None:
            where.append(f"line {lineno}")
        if key is not None:
            where.append(key)
        prefix = ": ".join(where)
        super().__init__(f"{prefix}: {desc}" if prefix else desc)


ParamItems = Tuple[Tuple[str, Any], ...]


@dataclasses.dataclass(frozen=True)
class Scenario:
    grid: core.Grid
    initial_preset: str
    initial_params: ParamItems
    velocity_preset: str
    velocity_params: ParamItems
    horizon: float
    tau: float
    order: int = 0
    seed: int = 0
    options: common.SolverOptions = common.DEFAULT_OPTIONS

    @property
    def step_count(self) -> int:
        return max(1, math.ceil(self.horizon / self.tau - 1e-9))

    def initial_density(self) -> core.DensityField:
        """The preset density, normalized but not yet projected."""
        return core.make_density(
            self.grid, self.initial_preset, dict(self.initial_params), self.seed
        )

    def velocity(self, t: float = 0.0) -> core.VelocityField:
        return core.make_velocity(
            self.grid, self.velocity_preset, dict(self.velocity_params), t
        )

    def refined(self, levels: int) -> "Scenario":
        """Cells times 2**levels per axis and tau over 2**levels."""
        if self.initial_preset == "custom-table" and levels:
            raise ValueError("custom-table densities can't be refined")
        factor = 2**levels
        grid = core.Grid(self.grid.extent, tuple(n * factor for n in self.grid.cells))
        return dataclasses.replace(self, grid=grid, tau=self.tau / factor)

    def replace(self, **changes: Any) -> "Scenario":
        return dataclasses.replace(self, **changes)


def _line_numbers(text: str) -> Dict[Tuple[str, str], int]:
    """Map (section, key) to the line the key appears on."""
    lines: Dict[Tuple[str, str], int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            lines.setdefault((section, ""), lineno)
            continue
        for sep in ("=", ":"):
            if sep in line:
                key = line.split(sep, 1)[0].strip().lower()
                lines.setdefault((section, key), lineno)
                break
    return lines


def _parse_numbers(text: str) -> Any:
    """A single number, or a tuple of them when the text has commas."""
    pieces = [p.strip() for p in text.split(",")]
    if any(not p for p in pieces):
        raise ValueError(f"empty entry in {text!r}")
    numbers = tuple(float(p) for p in pieces)
    if not all(math.isfinite(n) for n in numbers):
        raise ValueError(f"non-finite number in {text!r}")
    return numbers[0] if len(numbers) == 1 else numbers


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return common.format_float(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


class _Document:
    """A parsed INI document plus the line of every key in it."""

    def __init__(
        self, sections: Dict[str, Dict[str, str]], lines: Dict[Tuple[str, str], int]
    ) -> None:
        self.sections = sections
        self.lines = lines

    def error(self, section: str, key: str, desc: str) -> ScenarioError:
        return ScenarioError(
            desc, key=f"{section}.{key}" if key else section,
            lineno=self.lines.get((section, key)),
        )

    def require(self, section: str, key: str) -> str:
        try:
            return self.sections[section][key]
        except KeyError:
            raise self.error(section, "", f"missing required key {key!r}") from None


def _read_document(text: str) -> _Document:
    parser = configparser.ConfigParser(
        strict=True,
        interpolation=None,
        default_section="__no_default_section__",
        inline_comment_prefixes=("#", ";"),
    )
    try:
        parser.read_string(text, source="<scenario>")
    except configparser.DuplicateOptionError as e:
        key = f"{e.section}.{e.option}"
        raise ScenarioError("duplicate key", key=key, lineno=e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ScenarioError(
            "duplicate section", key=e.section, lineno=e.lineno
        ) from None
    except configparser.MissingSectionHeaderError as e:
        raise ScenarioError("missing section header", lineno=e.lineno) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ScenarioError("syntax error", lineno=lineno) from None
    except configparser.Error as e:
        raise ScenarioError(f"syntax error: {e.message}") from None

    lines = _line_numbers(text)
    sections: Dict[str, Dict[str, str]] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            lineno = lines.get((name, ""))
            raise ScenarioError("unknown section", key=name, lineno=lineno)
        sections[name] = dict(parser.items(name))
    for name in SECTIONS:
        if name not in sections:
            raise ScenarioError("missing section", key=name)
    return _Document(sections, lines)


def _parse_params(
    doc: _Document, section: str, allowed: Sequence[str]
) -> Tuple[str, ParamItems]:
    entries = doc.sections[section]
    preset = doc.require(section, "preset").strip()
    params: List[Tuple[str, Any]] = []
    for key, raw in entries.items():
        if key == "preset":
            continue
        if key not in allowed:
            raise doc.error(section, key, f"unknown key for preset {preset!r}")
        try:
            params.append((key, _parse_numbers(raw)))
        except ValueError as e:
            raise doc.error(section, key, str(e)) from None
    return preset, tuple(sorted(params))


def _build(doc: _Document) -> Scenario:
    grid_entries = doc.sections["grid"]
    for key in grid_entries:
        if key not in GRID_KEYS:
            raise doc.error("grid", key, "unknown key")
    try:
        extent = _parse_numbers(doc.require("grid", "extent"))
    except ValueError as e:
        raise doc.error("grid", "extent", str(e)) from None
    extent = extent if isinstance(extent, tuple) else (extent,)
    try:
        cells = tuple(int(c.strip()) for c in doc.require("grid", "cells").split(","))
    except ValueError:
        raise doc.error("grid", "cells", "expected integers") from None
    if len(cells) == 1 and len(extent) > 1:
        cells = cells * len(extent)
    if "dim" in grid_entries:
        try:
            dim = int(grid_entries["dim"])
        except ValueError:
            raise doc.error("grid", "dim", "expected an integer") from None
        if dim != len(extent):
            raise doc.error("grid", "dim", f"{dim} does not match extent {extent}")
    try:
        grid = core.Grid(extent, cells)
    except core.DomainVolumeError as e:
        raise doc.error("grid", "extent", str(e)) from None
    except ValueError as e:
        raise doc.error("grid", "cells", str(e)) from None

    initial_preset = doc.require("initial", "preset").strip()
    if initial_preset not in core.DENSITY_PRESETS:
        message = f"unknown density preset {initial_preset!r}"
        raise doc.error("initial", "preset", message)
    _, initial_params = _parse_params(
        doc, "initial", core.DENSITY_PRESETS[initial_preset][1]
    )

    velocity_preset = doc.require("velocity", "preset").strip()
    if velocity_preset not in core.VELOCITY_PRESETS:
        message = f"unknown velocity preset {velocity_preset!r}"
        raise doc.error("velocity", "preset", message)
    _, velocity_params = _parse_params(
        doc,
        "velocity",
        core.VELOCITY_PRESETS[velocity_preset] + core.MODULATION_PARAMS,
    )

    solver = doc.sections["solver"]
    option_names = set(common.SolverOptions.option_names())
    option_values: Dict[str, str] = {}
    for key, raw in solver.items():
        if key in SOLVER_KEYS:
            continue
        if key not in option_names:
            raise doc.error("solver", key, "unknown key")
        option_values[key] = raw
    try:
        options = common.SolverOptions.from_mapping(option_values)
    except ValueError as e:
        key = str(e).split(":", 1)[0]
        raise doc.error("solver", key, str(e)) from None

    def number(key: str, kind: Any, default: Any = None) -> Any:
        raw = solver.get(key)
        if raw is None:
            if default is None:
                raise doc.error("solver", "", f"missing required key {key!r}")
            return default
        try:
            value = kind(raw.strip())
        except ValueError:
            message = f"expected {kind.__name__}, got {raw!r}"
            raise doc.error("solver", key, message) from None
        if kind is float and not math.isfinite(value):
            raise doc.error("solver", key, "must be finite")
        return value

    horizon = number("horizon", float)
    tau = number("tau", float)
    order = number("order", int, 0)
    seed = number("seed", int, 0)
    if tau <= 0.0:
        raise doc.error("solver", "tau", "must be > 0")
    if horizon < tau:
        raise doc.error("solver", "horizon", "must be >= tau")
    if order not in (0, 1):
        raise doc.error("solver", "order", "must be 0 or 1")
    if options.split_order not in ("advect-first", "diffuse-first"):
        raise doc.error(
            "solver", "split_order", "must be advect-first or diffuse-first"
        )

    scenario = Scenario(
        grid=grid,
        initial_preset=initial_preset,
        initial_params=initial_params,
        velocity_preset=velocity_preset,
        velocity_params=velocity_params,
        horizon=horizon,
        tau=tau,
        order=order,
        seed=seed,
        options=options,
    )
    # Build the presets once so bad parameters surface here, with their key.
    try:
        scenario.initial_density()
    except ValueError as e:
        raise doc.error("initial", "preset", str(e)) from None
    try:
        scenario.velocity()
    except ValueError as e:
        raise doc.error("velocity", "preset", str(e)) from None
    return scenario


def parse_scenario(text: str) -> Scenario:
    return _build(_read_document(text))


def _sections_of(scenario: Scenario, full: bool) -> Dict[str, Dict[str, str]]:
    grid = scenario.grid
    sections: Dict[str, Dict[str, str]] = {
        "grid": {
            "extent": _format_value(grid.extent),
            "cells": _format_value(grid.cells),
        },
        "initial": {"preset": scenario.initial_preset},
        "velocity": {"preset": scenario.velocity_preset},
        "solver": {
            "order": str(scenario.order),
            "horizon": _format_value(scenario.horizon),
            "tau": _format_value(scenario.tau),
            "seed": str(scenario.seed),
        },
    }
    if full:
        sections["grid"]["dim"] = str(grid.dim)
    for key, value in scenario.initial_params:
        sections["initial"][key] = _format_value(value)
    for key, value in scenario.velocity_params:
        sections["velocity"][key] = _format_value(value)
    defaults = common.DEFAULT_OPTIONS.as_dict()
    for key, value in scenario.options.as_dict().items():
        if full or value != defaults[key]:
            sections["solver"][key] = _format_value(value)
    return sections


def serialize_scenario(scenario: Scenario, full: bool = False) -> str:
    """Render a scenario as text that parses back to an equal scenario.

    With `full`, every solver option is written out, defaults included; the
    run manifest uses that form.
    """
    out: List[str] = []
    for name, entries in _sections_of(scenario, full).items():
        if out:
            out.append("")
        out.append(f"[{name}]")
        for key, value in entries.items():
            out.append(f"{key} = {value}")
    return "\n".join(out) + "\n"


def _known_keys(section: str, scenario: Scenario) -> Sequence[str]:
    if section == "grid":
        return GRID_KEYS
    if section == "initial":
        return ("preset",) + core.DENSITY_PRESETS[scenario.initial_preset][1]
    if section == "velocity":
        return (
            ("preset",)
            + core.VELOCITY_PRESETS[scenario.velocity_preset]
            + core.MODULATION_PARAMS
        )
    return SOLVER_KEYS + tuple(common.SolverOptions.option_names())


def apply_overrides(
    scenario: Scenario, overrides: Sequence[Tuple[str, str]]
) -> Scenario:
    """Apply `section.key=value` (or unique bare `key=value`) overrides."""
    if not overrides:
        return scenario
    sections = _sections_of(scenario, full=False)
    for name, value in overrides:
        if "." in name:
            section, key = name.split(".", 1)
            if section not in SECTIONS or key not in _known_keys(section, scenario):
                raise ScenarioError("unknown override key", key=name)
        else:
            key = name
            owners = [s for s in SECTIONS if key in sections[s]]
            if not owners:
                owners = [s for s in SECTIONS if key in _known_keys(s, scenario)]
            if len(owners) != 1:
                desc = "ambiguous override key" if owners else "unknown override key"
                raise ScenarioError(desc, key=name)
            section = owners[0]
        sections[section][key.lower()] = value
        if section in ("initial", "velocity") and key == "preset":
            # A new preset brings its own parameters.
            sections[section] = {"preset": value}
    text_out: List[str] = []
    for name, entries in sections.items():
        text_out.append(f"[{name}]")
        for key, value in entries.items():
            text_out.append(f"{key} = {value}")
    return parse_scenario("\n".join(text_out) + "\n")


def read_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scenario(f.read())

