# vim: fileencoding=UTF-8:expandtab:autoindent:ts=4:sw=4:sts=4

import io
import os
import sys
import unittest

from unittest import mock

test_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.dirname(test_dir)
sys.path = [src_dir] + sys.path

from congested_crowd import common


TEST_TIME = "2020-04-01 01:02:03"


class TestLogger(unittest.TestCase):
    def test_logger_log_level(self) -> None:
        with mock.patch.dict(os.environ, clear=False):
            os.environ.pop(common.DEBUG_ENV, None)
            logger = common.Logger()
            self.assertEqual(logger.log_level, "INFO")

            os.environ[common.DEBUG_ENV] = "1"
            logger = common.Logger()
            self.assertEqual(logger.log_level, "DEBUG")

            logger = common.Logger(log_level="ERROR")
            self.assertEqual(logger.log_level, "ERROR")

    def test_logger_tags_messages(self) -> None:
        with mock.patch(
            "congested_crowd.common.time.strftime",
            mock.MagicMock(return_value=TEST_TIME),
        ):
            logger = common.Logger()
            for msg in ("transport:lp_transport:solved", "ρ ≤ 1"):
                self.assertListEqual(
                    logger._tag_args("DEBUG", msg), [f"{TEST_TIME} [DEBUG] {msg}"]
                )

    def test_logger_drops_lower_levels(self) -> None:
        out = io.StringIO()
        logger = common.Logger(log_level="WARN", outputs=[out])
        logger.info("quiet")
        logger.debug("quieter")
        self.assertEqual(out.getvalue(), "")
        logger.warning("loud")
        self.assertIn("[WARN] loud", out.getvalue())

    @mock.patch(
        "congested_crowd.common.Logger.print_formatted_log",
        mock.MagicMock(),
    )
    @mock.patch(
        "congested_crowd.common.Logger._prints",
        mock.MagicMock(),
    )
    @mock.patch(
        "congested_crowd.common.Logger._tag_args",
        mock.MagicMock(return_value="Goodbye, World"),
    )
    def test_logger_logs(self):
        logger = common.Logger()

        logger.debug("Hello, World")
        logger.print_formatted_log.assert_called_with("DEBUG", "Hello, World")

        logger("Hello, World")
        logger.print_formatted_log.assert_called_with("INFO", "Hello, World")

        logger.print_formatted_log.reset_mock()
        logger._prints.reset_mock()
        logger._tag_args.reset_mock()

        logger.exception("Oh noes!")
        logger._tag_args.assert_called_with("ERROR", "Oh noes!")
        self.assertEqual(logger._prints.call_count, 2)


class TestSolverOptions(unittest.TestCase):
    def test_defaults(self) -> None:
        options = common.SolverOptions()
        self.assertEqual(options.lp_cap, 1048576)
        self.assertEqual(options.sinkhorn_epsilon, 0.1)
        self.assertEqual(options.positivity_constant, 1.0)
        self.assertEqual(options.pressure_polish_every, 25)
        self.assertEqual(options.plan_tolerance, 1e-14)
        self.assertEqual(options.split_order, "advect-first")
        self.assertTrue(options.reconstruct_pressure)
        self.assertFalse(options.pgm)

    def test_every_option_is_documented(self) -> None:
        helps = common.SolverOptions.option_help()
        self.assertListEqual(list(helps), common.SolverOptions.option_names())
        for name, text in helps.items():
            self.assertNotEqual(text, "", name)

    def test_from_mapping_coerces_strings(self) -> None:
        options = common.SolverOptions.from_mapping(
            {"lp_cap": "100", "cfl": "0.5", "pgm": "yes", "reconstruct_pressure": "0"}
        )
        self.assertEqual(options.lp_cap, 100)
        self.assertEqual(options.cfl, 0.5)
        self.assertTrue(options.pgm)
        self.assertFalse(options.reconstruct_pressure)

    def test_from_mapping_rejects_bad_values(self) -> None:
        with self.assertRaises(KeyError):
            common.SolverOptions.from_mapping({"no_such_option": "1"})
        with self.assertRaisesRegex(ValueError, "lp_cap"):
            common.SolverOptions.from_mapping({"lp_cap": "many"})
        with self.assertRaisesRegex(ValueError, "pgm"):
            common.SolverOptions.from_mapping({"pgm": "maybe"})

    def test_replace_leaves_original(self) -> None:
        options = common.SolverOptions()
        changed = options.replace(cfl=0.25)
        self.assertEqual(changed.cfl, 0.25)
        self.assertEqual(options.cfl, 0.9)
        self.assertEqual(changed.as_dict()["cfl"], 0.25)


class TestHelpers(unittest.TestCase):
    def test_thread_cap(self) -> None:
        with mock.patch.dict(os.environ, {common.THREADS_ENV: "3"}):
            self.assertEqual(common.thread_cap(), 3)
        with mock.patch.dict(os.environ, {common.THREADS_ENV: "0"}):
            self.assertEqual(common.thread_cap(), 1)
        with mock.patch.dict(os.environ, {common.THREADS_ENV: "lots"}), mock.patch(
            "congested_crowd.common.log"
        ):
            self.assertIsNone(common.thread_cap())
        with mock.patch.dict(os.environ, {common.THREADS_ENV: ""}):
            self.assertIsNone(common.thread_cap())

    def test_format_float_round_trips(self) -> None:
        for value in (0.1, 1.0 / 3.0, 1e-300, 12345.678):
            self.assertEqual(float(common.format_float(value)), value)
        self.assertEqual(common.format_float(1), "1.0")


if __name__ == "__main__":
    unittest.main(module="test_common", verbosity=2)
