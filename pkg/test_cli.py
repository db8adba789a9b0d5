"""
Tests for the command-line interface: subcommands, outputs and exit codes.
"""

import unittest
import sys
import os
import io
import json
import logging
import shutil
import tempfile
from unittest.mock import patch

import numpy as np

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.cli import EXIT_DATA, EXIT_FAILURE, EXIT_NUMERICAL, EXIT_USAGE, create_parser, exit_code_for, main
from src.eval_metrics import trajectory_from_poses
from src.exceptions import (
    BehindCameraException, FormatException, FrameMismatchException, InvalidSpecException,
    InvalidValueException, MissingFileException, RefinementDivergedException, SlamException,
    TrackingLostException, UnknownKeyException,
)
from src.frontend_sim import NoiseSpec, Segment, WorldSpec
from src.io_formats import read_report, read_tum, write_tum
from src.lie_geometry import se3_exp
from src.utils import LOGGER_NAME


def tiny_world_dict():
    spec = WorldSpec(
        name='cli_tiny', seed=3, landmark_count=1500, scene_extent=40.0,
        trajectory_script=[Segment('arc', 10, 0.5, 30.0), Segment('forward', 10, 0.5)],
        noise=NoiseSpec.zero(), candidates_per_frame=40, edge_radius=4,
    )
    return spec.to_dict()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.log_file = os.path.join(self.tmp, 'slam.log')

    def tearDown(self):
        logger = logging.getLogger(LOGGER_NAME)
        for handler in list(logger.handlers):
            handler.close()
        logger.handlers.clear()
        shutil.rmtree(self.tmp, ignore_errors=True)

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def invoke(self, *argv):
        """Run main; return (exit code, stdout text)."""
        argv = list(argv) + ['--log-file', self.log_file]
        with patch('sys.stdout', new_callable=io.StringIO) as out, \
                patch('sys.stderr', new_callable=io.StringIO):
            try:
                code = main(argv)
            except SystemExit as e:
                code = e.code
        return code, out.getvalue()

    def write_trajectory(self, name, n):
        poses = [se3_exp(np.array([k, 0.3 * np.sin(k), 0.1 * k, 0, 0.05 * k, 0])) for k in range(n)]
        write_tum(trajectory_from_poses(poses), self.path(name))
        return self.path(name)


class TestExitCodes(unittest.TestCase):
    """Exception to exit-code mapping."""

    def test_mapping(self):
        self.assertEqual(exit_code_for(UnknownKeyException('window')), EXIT_USAGE)
        self.assertEqual(exit_code_for(InvalidValueException('mu', 'bad')), EXIT_USAGE)
        self.assertEqual(exit_code_for(InvalidSpecException('bad world')), EXIT_USAGE)
        self.assertEqual(exit_code_for(FormatException('bad line', 'x.csv', 'line 3')), EXIT_DATA)
        self.assertEqual(exit_code_for(MissingFileException('gone')), EXIT_DATA)
        self.assertEqual(exit_code_for(FrameMismatchException('ids differ')), EXIT_DATA)
        self.assertEqual(exit_code_for(RefinementDivergedException('cost rose')), EXIT_NUMERICAL)
        self.assertEqual(exit_code_for(BehindCameraException('z < 0')), EXIT_NUMERICAL)
        self.assertEqual(exit_code_for(TrackingLostException('lost')), EXIT_FAILURE)
        self.assertEqual(exit_code_for(SlamException('other')), EXIT_FAILURE)


class TestParser(unittest.TestCase):
    """Argument parsing."""

    def test_run_flags(self):
        args = create_parser().parse_args(['run', '--bundle', 'b', '--out', 'o', '--mu', '0', '--no-loop'])
        self.assertEqual(args.command, 'run')
        self.assertEqual(args.mu, '0')
        self.assertTrue(args.no_loop)
        self.assertFalse(args.no_mask)

    def test_eval_defaults(self):
        args = create_parser().parse_args(['eval', '--est', 'e.txt'])
        self.assertEqual((args.k, args.threshold), (10, 10.0))
        self.assertIsNone(args.ref)


class TestUsageErrors(CliTestCase):
    """Bad invocations exit with the usage code."""

    def test_no_command(self):
        with patch('sys.stdout', new_callable=io.StringIO):
            with self.assertRaises(SystemExit) as ctx:
                main([])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)

    def test_missing_required_argument(self):
        code, _ = self.invoke('run', '--bundle', self.path('b'))
        self.assertEqual(code, EXIT_USAGE)

    def test_unknown_preset(self):
        code, out = self.invoke('simulate', '--world', 'moon_base', '--out', self.path('b'))
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn('Unknown world', out)

    def test_unknown_config_key(self):
        with open(self.path('bad.cfg'), 'w', encoding='utf-8') as handle:
            handle.write("window = 4\n")
        code, _ = self.invoke('run', '--bundle', self.path('b'), '--config', self.path('bad.cfg'),
                              '--out', self.path('out'))
        self.assertEqual(code, EXIT_USAGE)

    def test_invalid_break_window(self):
        est = self.write_trajectory('est.txt', 30)
        code, _ = self.invoke('eval', '--est', est, '--k', '0')
        self.assertEqual(code, EXIT_USAGE)


class TestEval(CliTestCase):
    """The eval subcommand."""

    def test_self_comparison(self):
        est = self.write_trajectory('est.txt', 30)
        code, out = self.invoke('eval', '--est', est, '--ref', est, '--report', self.path('report.txt'))
        self.assertEqual(code, 0)
        self.assertIn('EVALUATION', out)
        report = read_report(self.path('report.txt'))
        self.assertEqual(report['frames'], '30')
        self.assertEqual(report['breaks'], '0')
        self.assertLess(float(report['ate_rmse']), 1e-6)

    def test_without_reference(self):
        est = self.write_trajectory('est.txt', 30)
        code, out = self.invoke('eval', '--est', est)
        self.assertEqual(code, 0)
        self.assertNotIn('ate_rmse', out)

    def test_missing_estimate(self):
        code, _ = self.invoke('eval', '--est', self.path('none.txt'))
        self.assertEqual(code, EXIT_DATA)

    def test_frame_mismatch(self):
        est = self.write_trajectory('est.txt', 30)
        ref = self.write_trajectory('ref.txt', 20)
        code, _ = self.invoke('eval', '--est', est, '--ref', ref)
        self.assertEqual(code, EXIT_DATA)

    def test_malformed_trajectory(self):
        with open(self.path('bad.txt'), 'w', encoding='utf-8') as handle:
            handle.write("0 1 2 3\n")
        code, _ = self.invoke('eval', '--est', self.path('bad.txt'))
        self.assertEqual(code, EXIT_DATA)


class TestSimulateAndRun(CliTestCase):
    """simulate, run and eval chained over one small world."""

    def setUp(self):
        super().setUp()
        with open(self.path('world.json'), 'w', encoding='utf-8') as handle:
            json.dump(tiny_world_dict(), handle)
        with open(self.path('run.cfg'), 'w', encoding='utf-8') as handle:
            handle.write("n_init = 6\nfocal_px = 410\n")

    def test_pipeline_end_to_end(self):
        bundle = self.path('bundle')
        code, out = self.invoke('simulate', '--world', self.path('world.json'), '--out', bundle, '--seed', '7')
        self.assertEqual(code, 0)
        self.assertIn('SIMULATION SUMMARY', out)
        for name in ('frames.csv', 'patches.csv', 'edges.csv', 'priors.csv', 'descriptors.bin',
                     'gt_traj.txt', 'world.json'):
            self.assertTrue(os.path.isfile(os.path.join(bundle, name)), name)
        with open(os.path.join(bundle, 'world.json'), encoding='utf-8') as handle:
            self.assertEqual(json.load(handle)['world']['seed'], 7)

        out_dir = self.path('out')
        code, out = self.invoke('run', '--bundle', bundle, '--config', self.path('run.cfg'), '--out', out_dir)
        self.assertEqual(code, 0)
        self.assertIn('RUN FINISHED', out)
        for name in ('traj_est.txt', 'keyframes.txt', 'events.jsonl', 'report.txt', 'config.txt',
                     'manifest.json'):
            self.assertTrue(os.path.isfile(os.path.join(out_dir, name)), name)

        trajectory = read_tum(os.path.join(out_dir, 'traj_est.txt'))
        self.assertEqual(len(trajectory), 21)
        report = read_report(os.path.join(out_dir, 'report.txt'))
        self.assertEqual(report['focal'], '410')
        self.assertEqual(report['refine_diverged'], 'false')
        self.assertNotIn('total', report)
        with open(os.path.join(out_dir, 'manifest.json'), encoding='utf-8') as handle:
            manifest = json.load(handle)
        self.assertEqual(manifest['config']['n_init'], 6)
        self.assertIn('traj_est.txt', manifest['outputs'])
        self.assertIn('total', manifest['timings'])

        code, _ = self.invoke('eval', '--est', os.path.join(out_dir, 'traj_est.txt'),
                              '--ref', os.path.join(bundle, 'gt_traj.txt'))
        self.assertEqual(code, 0)

    def test_repeat_is_byte_identical(self):
        """simulate, run and eval twice with the same seeds; every artifact but the timed manifest matches."""
        for name in ('a', 'b'):
            bundle = self.path(name, 'bundle')
            out_dir = self.path(name, 'out')
            code, _ = self.invoke('simulate', '--world', self.path('world.json'), '--out', bundle, '--seed', '7')
            self.assertEqual(code, 0)
            code, _ = self.invoke('run', '--bundle', bundle, '--config', self.path('run.cfg'), '--out', out_dir,
                                  '--seed', '5')
            self.assertEqual(code, 0)
            code, _ = self.invoke('eval', '--est', os.path.join(out_dir, 'traj_est.txt'),
                                  '--ref', os.path.join(bundle, 'gt_traj.txt'),
                                  '--report', self.path(name, 'eval.txt'))
            self.assertEqual(code, 0)

        for parts in (('bundle', 'edges.csv'), ('bundle', 'gt_traj.txt'), ('out', 'traj_est.txt'),
                      ('out', 'events.jsonl'), ('out', 'report.txt'), ('out', 'keyframes.txt'), ('eval.txt',)):
            with self.subTest(file=os.path.join(*parts)):
                with open(self.path('a', *parts), 'rb') as first, open(self.path('b', *parts), 'rb') as second:
                    self.assertEqual(first.read(), second.read())

    def test_missing_bundle(self):
        code, _ = self.invoke('run', '--bundle', self.path('nowhere'), '--out', self.path('out'))
        self.assertEqual(code, EXIT_DATA)

    def test_bad_world_file(self):
        with open(self.path('broken.json'), 'w', encoding='utf-8') as handle:
            handle.write("{not json")
        code, _ = self.invoke('simulate', '--world', self.path('broken.json'), '--out', self.path('b'))
        self.assertEqual(code, EXIT_USAGE)


if __name__ == '__main__':
    unittest.main()
