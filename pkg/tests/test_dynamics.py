# vim: fileencoding=UTF-8:expandtab:autoindent:ts=4:sw=4:sts=4

import os
import sys
import unittest

import numpy as np

from unittest import mock

test_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.dirname(test_dir)
sys.path = [src_dir] + sys.path

from tests.assertions import TestAssertions
from congested_crowd import common
from congested_crowd import core
from congested_crowd import dynamics
from congested_crowd import scenario


LINE = core.Grid((2.0,), (64,))
ACCEPTANCE = os.environ.get("CONGESTED_CROWD_ACCEPTANCE") == "1"

CROWD = """\
[grid]
extent = 2.0
cells = {cells}

[initial]
preset = bump
center = 0.5
radius = 0.5

[velocity]
preset = potential
center = 1.0

[solver]
order = {order}
horizon = {horizon}
tau = {tau}
"""

PLANE = """\
[grid]
extent = 2.0, 2.0
cells = 16, 16

[initial]
preset = bump
center = 1.0, 1.0
radius = 0.5

[velocity]
preset = constant
vector = 1.0, 0.0

[solver]
horizon = 0.01
tau = 0.005
reconstruct_pressure = false
"""


def crowd(cells=64, order=0, horizon=0.05, tau=0.01, **options) -> scenario.Scenario:
    s = scenario.parse_scenario(
        CROWD.format(cells=cells, order=order, horizon=horizon, tau=tau)
    )
    if options:
        s = s.replace(options=s.options.replace(**options))
    return s


class TestAdvect(TestAssertions):
    def test_zero_drift_is_identity(self) -> None:
        rho = core.make_density(LINE, "bump", {"center": 0.5, "radius": 0.3})
        moved = dynamics.advect(rho, core.make_velocity(LINE, "zero"), 0.1)
        self.assertFieldsClose(moved, rho, atol=0.0)

    def test_constant_drift_moves_the_mean(self) -> None:
        rho = core.make_density(LINE, "bump", {"center": 0.5, "radius": 0.25})
        u = core.make_velocity(LINE, "constant", {"vector": 1.0})
        moved = dynamics.advect(rho, u, 0.1)
        x = LINE.axis_centers(0)
        shift = float(np.dot(x, moved.cell_masses()) - np.dot(x, rho.cell_masses()))
        self.assertAlmostEqual(shift, 0.1, places=12)
        self.assertUnitMass(moved, 1e-12)
        self.assertAllNonNegative(moved)

    def test_no_flux_through_the_boundary(self) -> None:
        rho = core.make_density(LINE, "uniform")
        u = core.make_velocity(LINE, "constant", {"vector": -3.0})
        moved = dynamics.advect(rho, u, 0.5)
        self.assertUnitMass(moved, 1e-12)
        self.assertAllNonNegative(moved)
        self.assertGreater(moved.values[0], rho.values[0])

    def test_substeps_respect_the_cfl_cap(self) -> None:
        rho = core.make_density(LINE, "uniform")
        u = core.make_velocity(LINE, "constant", {"vector": 2.0})
        options = common.SolverOptions(cfl=0.5)
        _, cfl, substeps = dynamics._advect(rho, u, 0.1, options)
        self.assertLessEqual(cfl, 0.5 + 1e-12)
        # 0.1 * 2 / (1 / 32) / 0.5 = 12.8
        self.assertEqual(substeps, 13)

    def test_two_dimensional_rotation_keeps_mass(self) -> None:
        grid = core.Grid((2.0, 2.0), (16, 16))
        rho = core.make_density(grid, "bump", {"center": (1.3, 1.0), "radius": 0.4})
        u = core.make_velocity(grid, "rotation", {"center": (1.0, 1.0), "omega": 1.0})
        moved = dynamics.advect(rho, u, 0.2)
        self.assertUnitMass(moved, 1e-12)
        self.assertAllNonNegative(moved)


class TestDiffuse(TestAssertions):
    def test_mass_and_maximum_principle(self) -> None:
        rho = core.make_density(LINE, "indicator", {"lo": 0.5, "hi": 1.0})
        smoothed = dynamics.diffuse(rho, 0.01)
        self.assertUnitMass(smoothed, 1e-12)
        self.assertAllNonNegative(smoothed)
        self.assertLess(smoothed.max(), rho.max())
        self.assertGreater(smoothed.values[10], 0.0)

    def test_constant_is_steady(self) -> None:
        rho = core.make_density(LINE, "uniform")
        self.assertFieldsClose(dynamics.diffuse(rho, 0.5), rho, atol=1e-12)

    def test_rejects_bad_step(self) -> None:
        rho = core.make_density(LINE, "uniform")
        with self.assertRaises(ValueError):
            dynamics.diffuse(rho, 0.0)


class TestSplitSteps(TestAssertions):
    def test_wall_keeps_the_crowd_in_place(self) -> None:
        grid = core.Grid((2.0,), (32,))
        rho = core.make_density(grid, "indicator", {"lo": 0.0, "hi": 1.0})
        u = core.make_velocity(grid, "constant", {"vector": -1.0})
        after, p = dynamics.split_step_first_order(rho, u, 0.0, 0.01)
        self.assertFieldsClose(after, rho, atol=1e-9)
        x = grid.axis_centers(0)
        self.assertLessEqual(
            float(np.abs(p.values - np.maximum(0.0, 1.0 - x)).max()), 2.0 * grid.h
        )

    def test_second_order_step_is_feasible(self) -> None:
        rho = core.make_density(LINE, "indicator", {"lo": 0.5, "hi": 1.0})
        u = core.make_velocity(LINE, "potential", {"center": 1.0})
        after, p = dynamics.split_step_second_order(rho, u, 0.0, 0.01)
        self.assertFeasible(after)
        self.assertUnitMass(after)
        self.assertAllNonNegative(p)

    def test_split_order_does_not_matter_without_drift(self) -> None:
        rho = core.make_density(LINE, "indicator", {"lo": 0.5, "hi": 0.75})
        u = core.make_velocity(LINE, "zero")
        first, _ = dynamics.split_step_second_order(rho, u, 0.0, 0.01)
        options = common.SolverOptions(split_order="diffuse-first")
        second, _ = dynamics.split_step_second_order(rho, u, 0.0, 0.01, options)
        self.assertFieldsClose(first, second, atol=1e-9)


class TestRun(TestAssertions):
    def test_first_order_run(self) -> None:
        trajectory = dynamics.run(crowd())
        self.assertEqual(len(trajectory), 6)
        self.assertEqual(len(trajectory.diagnostics), 5)
        self.assertFieldsClose(trajectory.times(), [0.0, 0.01, 0.02, 0.03, 0.04, 0.05])
        self.assertLessEqual(trajectory.mass_drift(), 1e-9)
        self.assertLessEqual(trajectory.max_density(), 1.0 + 1e-9)
        for frame in trajectory.frames:
            self.assertFeasible(frame.density)
            self.assertIsNotNone(frame.pressure)
        for d in trajectory.diagnostics:
            self.assertLessEqual(d.cfl, 0.9 + 1e-12)
            self.assertGreaterEqual(d.substeps, 1)
            self.assertIsNotNone(d.w2_step)
            self.assertIn(d.pressure_status, ("reconstructed", "not-converged"))

    def test_initial_density_is_projected(self) -> None:
        s = crowd().replace(initial_params=(("center", 0.5), ("radius", 0.1)))
        self.assertGreater(s.initial_density().max(), 1.0)
        trajectory = dynamics.run(s.replace(horizon=0.01))
        self.assertFeasible(trajectory.frames[0].density)
        self.assertTrue(trajectory.diagnostics[0].projection_active)

    def test_last_step_lands_on_the_horizon(self) -> None:
        trajectory = dynamics.run(crowd(horizon=0.025))
        self.assertEqual(trajectory.frames[-1].t, 0.025)
        self.assertAlmostEqual(trajectory.diagnostics[-1].tau, 0.005)

    def test_frame_stride(self) -> None:
        trajectory = dynamics.run(
            crowd(frame_stride=2, reconstruct_pressure=False, step_estimate_stride=0)
        )
        self.assertFieldsClose(trajectory.times(), [0.0, 0.02, 0.04, 0.05])
        self.assertEqual(len(trajectory.diagnostics), 5)
        self.assertIsNone(trajectory.frames[-1].pressure)
        self.assertIsNone(trajectory.diagnostics[0].w2_step)
        self.assertEqual(trajectory.diagnostics[0].pressure_status, "skipped")

    def test_step_bound_holds(self) -> None:
        trajectory = dynamics.run(
            crowd(cells=256, horizon=0.02, tau=0.002, reconstruct_pressure=False)
        )
        self.assertListEqual(trajectory.step_bound_violations(0.10), [])
        for d in trajectory.diagnostics:
            self.assertGreater(d.step_bound, 0.0)
            self.assertEqual(d.step_allowance, 0.0)
            self.assertLessEqual(d.step_ratio, 1.1 + 1e-9)
            self.assertGreater(d.step_bound_l2, 0.0)

    def test_step_bound_on_a_plane(self) -> None:
        trajectory = dynamics.run(scenario.parse_scenario(PLANE))
        self.assertEqual(len(trajectory.diagnostics), 2)
        for d in trajectory.diagnostics:
            self.assertAlmostEqual(d.step_bound, 2.5e-5, places=15)
            self.assertAlmostEqual(d.step_allowance, 1.25e-3, places=15)
            self.assertGreater(d.step_ratio, 1.1)
            self.assertFalse(d.step_bound_ok(0.10))
            self.assertTrue(d.step_bound_ok(0.10, allowance=True))
        violations = trajectory.step_bound_violations(0.10)
        self.assertEqual([d.step for d in violations], [1, 2])
        self.assertListEqual(trajectory.step_bound_violations(0.10, allowance=True), [])
        self.assertIn("step_allowance", dynamics.StepDiagnostics.COLUMNS)
        self.assertIn("step_ratio", dynamics.StepDiagnostics.COLUMNS)


    def test_second_order_run(self) -> None:
        for split_order in ("advect-first", "diffuse-first"):
            with self.subTest(split_order=split_order):
                trajectory = dynamics.run(
                    crowd(order=1, split_order=split_order, reconstruct_pressure=False)
                )
                self.assertLessEqual(trajectory.mass_drift(), 1e-9)
                self.assertLessEqual(trajectory.max_density(), 1.0 + 1e-9)

    def test_failures_name_the_step(self) -> None:
        with mock.patch(
            "congested_crowd.dynamics._transport_stage",
            mock.MagicMock(side_effect=RuntimeError("boom")),
        ), mock.patch("congested_crowd.dynamics.log"):
            with self.assertRaises(dynamics.SimulationError) as cm:
                dynamics.run(crowd())
        self.assertEqual(cm.exception.step, 1)
        self.assertIsInstance(cm.exception.__cause__, RuntimeError)

    def test_frames_must_move_forward(self) -> None:
        trajectory = dynamics.Trajectory(LINE, 0, 0.1)
        rho = core.make_density(LINE, "uniform")
        trajectory.append_frame(dynamics.Frame(0, 0.0, rho))
        with self.assertRaises(ValueError):
            trajectory.append_frame(dynamics.Frame(1, 0.0, rho))


class TestWeakResidual(TestAssertions):
    def test_test_functions_have_no_normal_derivative(self) -> None:
        grid = core.Grid((2.0, 1.5), (4, 4))
        functions = dynamics.neumann_test_functions(grid)
        self.assertEqual(len(functions), 7)
        ends = np.array([[0.0, 0.0], [2.0, 1.5]])
        for phi in functions:
            with self.subTest(name=phi.name):
                self.assertFieldsClose(phi.derivative(ends), 0.0, atol=1e-12)

    def test_closed_form_derivatives(self) -> None:
        grid = core.Grid((2.0,), (4,))
        x = np.linspace(0.1, 1.9, 7)[:, None]
        step = 1e-5
        for phi in dynamics.neumann_test_functions(grid):
            with self.subTest(name=phi.name):
                numeric = (phi.value(x + step) - phi.value(x - step)) / (2 * step)
                self.assertFieldsClose(phi.derivative(x), numeric, atol=1e-6)
                second = (
                    phi.value(x + step) - 2 * phi.value(x) + phi.value(x - step)
                ) / step**2
                self.assertFieldsClose(phi.laplacian(x), second, atol=1e-3)

    def test_mass_residual_vanishes(self) -> None:
        s = crowd()
        trajectory = dynamics.run(s)
        report = dynamics.weak_residual(trajectory, s.velocity(0.0))
        self.assertEqual(len(report.entries), 5 * 4)
        self.assertLessEqual(report.for_function("constant"), 1e-10)
        self.assertTrue(np.isfinite(report.max_residual))

    def test_needs_pressures(self) -> None:
        s = crowd(reconstruct_pressure=False)
        trajectory = dynamics.run(s)
        with self.assertRaises(dynamics.MissingPressureError):
            dynamics.weak_residual(trajectory, s.velocity(0.0))


class TestConvergenceStudy(TestAssertions):
    def test_levels(self) -> None:
        s = crowd(cells=16, horizon=0.04, tau=0.02)
        study = dynamics.convergence_study(s, levels=3, workers=1)
        self.assertEqual(study.cells, ((16,), (32,), (64,)))
        self.assertEqual(study.taus, (0.02, 0.01, 0.005))
        self.assertEqual(len(study.gaps), 2)
        self.assertEqual(len(study.ratios), 1)
        self.assertTrue(all(g >= 0.0 for g in study.gaps))
        self.assertGreaterEqual(study.ratios[0], 1.5, study.gaps)
        self.assertTrue(study.passed())

    def test_needs_two_levels(self) -> None:
        with self.assertRaises(ValueError):
            dynamics.convergence_study(crowd(), levels=1)

    def test_passed(self) -> None:
        study = dynamics.ConvergenceStudy(
            ((8,), (16,), (32,)), (0.1, 0.05, 0.025), (0.4, 0.2), (2.0,)
        )
        self.assertTrue(study.passed())
        self.assertFalse(dynamics.ConvergenceStudy((), (), (), ()).passed())


@unittest.skipUnless(ACCEPTANCE, "set CONGESTED_CROWD_ACCEPTANCE=1")
class TestAcceptance(TestAssertions):
    def test_first_order_convergence(self) -> None:
        s = crowd(cells=64, horizon=0.2, tau=0.01)
        study = dynamics.convergence_study(s, levels=4)
        self.assertTrue(study.passed(), study.ratios)

if __name__ == "__main__":
    unittest.main(module="test_dynamics", verbosity=2)
