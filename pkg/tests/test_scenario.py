# vim: fileencoding=UTF-8:expandtab:autoindent:ts=4:sw=4:sts=4

import os
import sys
import tempfile
import unittest

from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st

test_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.dirname(test_dir)
sys.path = [src_dir] + sys.path

from tests.assertions import TestAssertions
from congested_crowd import common
from congested_crowd import scenario


MINIMAL = """\
[grid]
extent = 2.0
cells = 16

[initial]
preset = bump
center = 0.5
radius = 0.25

[velocity]
preset = potential
center = 1.0

[solver]
horizon = 0.1
tau = 0.01
"""


def with_line(text: str, section: str, line: str) -> str:
    return text.replace(f"[{section}]\n", f"[{section}]\n{line}\n", 1)


class TestParse(TestAssertions):
    def test_minimal_file_gets_defaults(self) -> None:
        s = scenario.parse_scenario(MINIMAL)
        self.assertEqual(s.grid.cells, (16,))
        self.assertEqual(s.grid.extent, (2.0,))
        self.assertEqual(s.initial_preset, "bump")
        self.assertEqual(s.initial_params, (("center", 0.5), ("radius", 0.25)))
        self.assertEqual(s.velocity_preset, "potential")
        self.assertEqual(s.order, 0)
        self.assertEqual(s.seed, 0)
        self.assertEqual(s.options, common.DEFAULT_OPTIONS)
        self.assertEqual(s.step_count, 10)
        self.assertUnitMass(s.initial_density())

    def test_two_dimensional_grid(self) -> None:
        text = MINIMAL.replace("extent = 2.0", "extent = 2.0, 1.0").replace(
            "cells = 16", "cells = 8"
        )
        text = text.replace("center = 0.5", "center = 0.5, 0.5")
        text = text.replace("center = 1.0", "center = 1.0, 0.5")
        s = scenario.parse_scenario(text)
        self.assertEqual(s.grid.cells, (8, 8))
        self.assertEqual(s.grid.dim, 2)

    def test_solver_options(self) -> None:
        text = with_line(MINIMAL, "solver", "order = 1\nseed = 9\ncfl = 0.5\npgm = yes")
        s = scenario.parse_scenario(text)
        self.assertEqual(s.order, 1)
        self.assertEqual(s.seed, 9)
        self.assertEqual(s.options.cfl, 0.5)
        self.assertTrue(s.options.pgm)

    def test_duplicate_key_names_the_key(self) -> None:
        text = with_line(MINIMAL, "initial", "radius = 0.5")
        with self.assertRaises(scenario.ScenarioError) as cm:
            scenario.parse_scenario(text)
        self.assertEqual(cm.exception.key, "initial.radius")
        self.assertIsNotNone(cm.exception.lineno)
        self.assertIn("duplicate key", str(cm.exception))

    def test_unknown_keys_are_rejected(self) -> None:
        cases = [
            ("initial", "width = 2", "initial.width"),
            ("velocity", "omega = 2", "velocity.omega"),
            ("solver", "tolerance = 2", "solver.tolerance"),
            ("grid", "spacing = 2", "grid.spacing"),
        ]
        for section, line, key in cases:
            with self.subTest(key=key):
                with self.assertRaises(scenario.ScenarioError) as cm:
                    scenario.parse_scenario(with_line(MINIMAL, section, line))
                self.assertEqual(cm.exception.key, key)
                self.assertEqual(cm.exception.lineno, MINIMAL.splitlines().index(
                    f"[{section}]"
                ) + 2)

    def test_semantic_errors_carry_the_key(self) -> None:
        cases = [
            (MINIMAL.replace("tau = 0.01", "tau = 0"), "solver.tau"),
            (MINIMAL.replace("tau = 0.01", "tau = -1"), "solver.tau"),
            (MINIMAL.replace("extent = 2.0", "extent = 1.0"), "grid.extent"),
            (with_line(MINIMAL, "solver", "order = 2"), "solver.order"),
            (with_line(MINIMAL, "solver", "cfl = fast"), "solver.cfl"),
            (
                with_line(MINIMAL, "solver", "split_order = sideways"),
                "solver.split_order",
            ),
            (MINIMAL.replace("preset = bump", "preset = blob"), "initial.preset"),
            (MINIMAL.replace("radius = 0.25", "radius = lots"), "initial.radius"),
            (MINIMAL.replace("cells = 16", "cells = many"), "grid.cells"),
        ]
        for text, key in cases:
            with self.subTest(key=key):
                with self.assertRaises(scenario.ScenarioError) as cm:
                    scenario.parse_scenario(text)
                self.assertEqual(cm.exception.key, key)

    def test_domain_volume_message(self) -> None:
        with self.assertRaisesRegex(scenario.ScenarioError, "domain volume <= 1"):
            scenario.parse_scenario(MINIMAL.replace("extent = 2.0", "extent = 0.5"))

    def test_structure_errors(self) -> None:
        with self.assertRaisesRegex(scenario.ScenarioError, "missing section"):
            scenario.parse_scenario(MINIMAL.split("[solver]")[0])
        with self.assertRaisesRegex(scenario.ScenarioError, "unknown section"):
            scenario.parse_scenario(MINIMAL + "\n[extra]\nkey = 1\n")
        with self.assertRaisesRegex(scenario.ScenarioError, "missing section header"):
            scenario.parse_scenario("extent = 2\n" + MINIMAL)
        with self.assertRaisesRegex(scenario.ScenarioError, "missing required key"):
            scenario.parse_scenario(MINIMAL.replace("tau = 0.01\n", ""))

    def test_degenerate_initial_density(self) -> None:
        text = MINIMAL.replace("center = 0.5", "center = 9.0")
        with self.assertRaisesRegex(scenario.ScenarioError, "degenerate density"):
            scenario.parse_scenario(text)


class TestSerialize(TestAssertions):
    def test_round_trip(self) -> None:
        s = scenario.parse_scenario(with_line(MINIMAL, "solver", "lp_cap = 1000"))
        text = scenario.serialize_scenario(s)
        self.assertIn("lp_cap = 1000", text)
        self.assertNotIn("cfl", text)
        self.assertEqual(scenario.parse_scenario(text), s)

    def test_full_form_lists_every_option(self) -> None:
        s = scenario.parse_scenario(MINIMAL)
        text = scenario.serialize_scenario(s, full=True)
        for name in common.SolverOptions.option_names():
            self.assertIn(f"\n{name} = ", text)
        self.assertIn("dim = 1", text)
        self.assertEqual(scenario.parse_scenario(text), s)

    @settings(max_examples=40, deadline=None)
    @given(
        extent=st.floats(min_value=1.5, max_value=4.0),
        cells=st.integers(min_value=4, max_value=40),
        where=st.floats(min_value=0.0, max_value=1.0),
        radius=st.floats(min_value=0.2, max_value=1.0),
        stiffness=st.floats(min_value=-3.0, max_value=3.0),
        tau=st.floats(min_value=1e-4, max_value=0.1),
        steps=st.integers(min_value=1, max_value=20),
        cfl=st.floats(min_value=0.1, max_value=1.0),
        order=st.sampled_from([0, 1]),
    )
    def test_round_trip_property(
        self, extent, cells, where, radius, stiffness, tau, steps, cfl, order
    ) -> None:
        s = scenario.Scenario(
            grid=scenario.core.Grid((extent,), (cells,)),
            initial_preset="bump",
            initial_params=(("center", where * extent), ("radius", radius * extent)),
            velocity_preset="potential",
            velocity_params=(("center", extent / 2.0), ("stiffness", stiffness)),
            horizon=tau * steps,
            tau=tau,
            order=order,
            options=common.SolverOptions(cfl=cfl),
        )
        again = scenario.parse_scenario(scenario.serialize_scenario(s))
        self.assertEqual(again, s)
        text = scenario.serialize_scenario(s)
        self.assertEqual(scenario.serialize_scenario(again), text)


class TestOverrides(TestAssertions):
    def setUp(self) -> None:
        self.base = scenario.parse_scenario(MINIMAL)

    def test_section_and_bare_keys(self) -> None:
        s = scenario.apply_overrides(
            self.base, [("solver.tau", "0.05"), ("radius", "0.5"), ("cfl", "0.3")]
        )
        self.assertEqual(s.tau, 0.05)
        self.assertEqual(dict(s.initial_params)["radius"], 0.5)
        self.assertEqual(s.options.cfl, 0.3)
        self.assertEqual(self.base.tau, 0.01)

    def test_ambiguous_and_unknown_keys(self) -> None:
        with self.assertRaisesRegex(scenario.ScenarioError, "ambiguous"):
            scenario.apply_overrides(self.base, [("center", "1.0")])
        with self.assertRaisesRegex(scenario.ScenarioError, "unknown override key"):
            scenario.apply_overrides(self.base, [("warp", "9")])
        with self.assertRaisesRegex(scenario.ScenarioError, "unknown override key"):
            scenario.apply_overrides(self.base, [("solver.warp", "9")])

    def test_new_preset_drops_old_parameters(self) -> None:
        s = scenario.apply_overrides(self.base, [("initial.preset", "uniform")])
        self.assertEqual(s.initial_preset, "uniform")
        self.assertEqual(s.initial_params, ())

    def test_no_overrides(self) -> None:
        self.assertIs(scenario.apply_overrides(self.base, []), self.base)


class TestRefine(TestAssertions):
    def test_refined(self) -> None:
        s = scenario.parse_scenario(MINIMAL).refined(2)
        self.assertEqual(s.grid.cells, (64,))
        self.assertAlmostEqual(s.tau, 0.0025)
        self.assertEqual(s.step_count, 40)

    def test_read_scenario(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "s.cfg")
            with open(path, "w", encoding="utf-8") as f:
                f.write(MINIMAL)
            self.assertEqual(
                scenario.read_scenario(path), scenario.parse_scenario(MINIMAL)
            )
            with self.assertRaises(OSError):
                scenario.read_scenario(os.path.join(tmpdir, "missing.cfg"))


if __name__ == "__main__":
    unittest.main(module="test_scenario", verbosity=2)
