# vim: fileencoding=UTF-8:expandtab:autoindent:ts=4:sw=4:sts=4

import math
import os
import sys
import tempfile
import unittest

import numpy as np

from unittest import mock

test_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.dirname(test_dir)
sys.path = [src_dir] + sys.path

from tests.assertions import TestAssertions
from congested_crowd import artifacts
from congested_crowd import core
from congested_crowd import dynamics


SQUARE = core.Grid((2.0, 1.0), (2, 2))


class TestFormatting(TestAssertions):
    def test_format_cell(self) -> None:
        self.assertEqual(artifacts.format_cell(None), "")
        self.assertEqual(artifacts.format_cell(True), "true")
        self.assertEqual(artifacts.format_cell(np.bool_(False)), "false")
        self.assertEqual(artifacts.format_cell(np.int64(3)), "3")
        self.assertEqual(artifacts.format_cell(0.1), "0.1")
        self.assertEqual(artifacts.format_cell(math.nan), "nan")
        self.assertEqual(artifacts.format_cell("reconstructed"), "reconstructed")

    def test_table(self) -> None:
        text = artifacts.table_csv(("a", "b"), [(1, 0.5), (2, None)])
        self.assertEqual(text, "a,b\n1,0.5\n2,\n")

    def test_field_rows_run_along_y(self) -> None:
        text = artifacts.field_csv(np.array([[0.0, 0.25], [0.5, 1.0]]), SQUARE, 0.5)
        lines = text.splitlines()
        self.assertEqual(lines[0], "# grid 2 2 2 1.0,0.5 0.5")
        self.assertEqual(lines[1:], ["0.0,0.25", "0.5,1.0"])

    def test_velocity(self) -> None:
        u = core.make_velocity(SQUARE, "constant", {"vector": (1.0, -2.0)})
        lines = artifacts.velocity_csv(u).splitlines()
        self.assertEqual(lines[1], "cell,ux,uy")
        self.assertEqual(lines[2], "0,1.0,-2.0")
        self.assertEqual(len(lines), 6)

    def test_pgm_puts_y_up(self) -> None:
        rho = core.DensityField(SQUARE, [[1.0, 0.0], [0.5, 2.0]])
        data = artifacts.pgm(rho)
        header = b"P5\n2 2\n255\n"
        self.assertTrue(data.startswith(header))
        # top row is the larger y
        self.assertEqual(list(data[len(header) :]), [0, 255, 255, 128])

    def test_summary(self) -> None:
        text = artifacts.summary_text({"verdict": "PASS", "max_slack": -0.25})
        self.assertEqual(text, "verdict = PASS\nmax_slack = -0.25\n")


class TestWrites(TestAssertions):
    def test_atomic_write_replaces(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "nested", "a.txt")
            with mock.patch("congested_crowd.artifacts.log"):
                artifacts.atomic_write(path, "first")
                artifacts.atomic_write(path, b"second")
            with open(path, "rb") as f:
                self.assertEqual(f.read(), b"second")
            self.assertListEqual(os.listdir(os.path.dirname(path)), ["a.txt"])

    def test_failed_write_leaves_nothing(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "a.txt")
            with mock.patch("os.fsync", side_effect=OSError("disk full")):
                with self.assertRaises(OSError):
                    artifacts.atomic_write(path, "data")
            self.assertListEqual(os.listdir(tmpdir), [])

    def test_write_trajectory(self) -> None:
        grid = core.Grid((2.0,), (4,))
        trajectory = dynamics.Trajectory(grid, 0, 0.1)
        rho = core.make_density(grid, "uniform")
        trajectory.append_frame(dynamics.Frame(0, 0.0, rho))
        trajectory.append_frame(
            dynamics.Frame(1, 0.1, rho, core.PressureField.zeros(grid), True)
        )
        with tempfile.TemporaryDirectory() as tmpdir:
            with mock.patch("congested_crowd.artifacts.log"):
                written = artifacts.write_trajectory(tmpdir, trajectory, heatmaps=True)
            names = [os.path.basename(p) for p in written]
            self.assertListEqual(
                names,
                [
                    "frame_000000.csv",
                    "frame_000000.pgm",
                    "frame_000001.csv",
                    "pressure_000001.csv",
                    "frame_000001.pgm",
                    "metrics.csv",
                ],
            )
            with open(os.path.join(tmpdir, "metrics.csv"), encoding="utf-8") as f:
                self.assertEqual(
                    f.read(), ",".join(dynamics.StepDiagnostics.COLUMNS) + "\n"
                )


if __name__ == "__main__":
    unittest.main(module="test_artifacts", verbosity=2)
