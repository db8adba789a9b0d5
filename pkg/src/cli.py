"""
Command-line interface for the casual-video SLAM backend.

One entry point with four subcommands: generate a synthetic bundle
(simulate), reconstruct a bundle (run), score a trajectory (eval) and
recover the focal length from the first frames (focal).
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .eval_metrics import evaluate_trajectory
    from .exceptions import (
        ConfigurationException, DataFormatException, FrameMismatchException, GeometryException,
        InvalidSpecException, InvalidValueException, MissingFileException, OptimizationException,
        RefinementDivergedException, SlamException, UnknownKeyException, ValidationException,
    )
    from .frontend_sim import WorldSpec, generate, standard_worlds
    from .io_formats import (
        CONFIG_ECHO_FILE, EVENTS_FILE, KEYFRAMES_FILE, MANIFEST_FILE, POSE_GRAPH_FILE, REPORT_FILE,
        TRAJECTORY_FILE, RunManifest, config_from_values, parse_config, read_bundle, read_tum,
        write_bundle, write_config, write_events, write_keyframes, write_pose_graph, write_report, write_tum,
    )
    from .pipeline import PipelineConfig, SlamPipeline, select_init_frames
    from .utils import format_duration, load_environment, setup_logging
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from eval_metrics import evaluate_trajectory
    from exceptions import (
        ConfigurationException, DataFormatException, FrameMismatchException, GeometryException,
        InvalidSpecException, InvalidValueException, MissingFileException, OptimizationException,
        RefinementDivergedException, SlamException, UnknownKeyException, ValidationException,
    )
    from frontend_sim import WorldSpec, generate, standard_worlds
    from io_formats import (
        CONFIG_ECHO_FILE, EVENTS_FILE, KEYFRAMES_FILE, MANIFEST_FILE, POSE_GRAPH_FILE, REPORT_FILE,
        TRAJECTORY_FILE, RunManifest, config_from_values, parse_config, read_bundle, read_tum,
        write_bundle, write_config, write_events, write_keyframes, write_pose_graph, write_report, write_tum,
    )
    from pipeline import PipelineConfig, SlamPipeline, select_init_frames
    from utils import format_duration, load_environment, setup_logging


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

RUN_OUTPUTS = [TRAJECTORY_FILE, KEYFRAMES_FILE, EVENTS_FILE, POSE_GRAPH_FILE, REPORT_FILE, CONFIG_ECHO_FILE]


def exit_code_for(error: Exception) -> int:
    """Map an exception to the process exit code."""
    if isinstance(error, (UnknownKeyException, InvalidValueException, ValidationException,
                          ConfigurationException, InvalidSpecException)):
        return EXIT_USAGE
    if isinstance(error, (DataFormatException, FrameMismatchException)):
        return EXIT_DATA
    if isinstance(error, (OptimizationException, GeometryException)):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def create_parser(default_log_file: str = "slam.log") -> argparse.ArgumentParser:
    """
    Create and configure the command-line argument parser.

    Returns:
        Configured ArgumentParser instance
    """
    parser = argparse.ArgumentParser(
        description='Monocular SLAM backend for casual videos',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:

  Generate a synthetic dataset:
    python slam.py simulate --world city_loop --out data/city --seed 1
    python slam.py simulate --world my_world.json --out data/custom

  Reconstruct it:
    python slam.py run --bundle data/city --out runs/city
    python slam.py run --bundle data/city --config slam.cfg --out runs/city --mu 0 --no-loop

  Score a trajectory:
    python slam.py eval --est runs/city/traj_est.txt --ref data/city/gt_traj.txt --report eval.txt

  Recover the focal length only:
    python slam.py focal --bundle data/city

Exit codes: 0 success, 2 usage error, 3 data format error, 4 numerical failure.
        """
    )

    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    def add_common(sub):
        sub.add_argument('--verbose', '-v', action='store_true', help='Enable verbose (DEBUG) logging')
        sub.add_argument('--log-file', default=default_log_file,
                         help=f'Log file path (default: {default_log_file})')

    simulate = subparsers.add_parser('simulate', help='Generate a synthetic bundle')
    simulate.add_argument('--world', required=True,
                          help=f"Preset name ({', '.join(sorted(standard_worlds()))}) or world JSON file")
    simulate.add_argument('--out', required=True, help='Output bundle directory')
    simulate.add_argument('--seed', type=int, help='Override the world seed')
    add_common(simulate)

    run = subparsers.add_parser('run', help='Reconstruct a bundle')
    run.add_argument('--bundle', required=True, help='Input bundle directory')
    run.add_argument('--config', help='Config file with key = value lines')
    run.add_argument('--out', required=True, help='Output directory')
    run.add_argument('--seed', type=int, help='Override the config seed')
    run.add_argument('--mu', help='Override the depth-prior weight')
    run.add_argument('--no-mask', action='store_true', help='Ignore dynamic-object masks')
    run.add_argument('--no-loop', action='store_true', help='Disable loop closure')
    add_common(run)

    evaluate = subparsers.add_parser('eval', help='Score an estimated trajectory')
    evaluate.add_argument('--est', required=True, help='Estimated TUM trajectory')
    evaluate.add_argument('--ref', help='Reference TUM trajectory')
    evaluate.add_argument('--k', type=int, default=10, help='Break detector window (default: 10)')
    evaluate.add_argument('--threshold', type=float, default=10.0, help='Break ratio threshold (default: 10)')
    evaluate.add_argument('--report', help='Write metrics to this file')
    evaluate.add_argument('--literal-breaks', action='store_true',
                          help='Compare steps against the plain mean of the window')
    add_common(evaluate)

    focal = subparsers.add_parser('focal', help='Estimate the focal length from the initialization frames')
    focal.add_argument('--bundle', required=True, help='Input bundle directory')
    focal.add_argument('--config', help='Config file with key = value lines')
    focal.add_argument('--seed', type=int, help='Override the config seed')
    add_common(focal)

    return parser


def validate_run_args(args, default_seed: int = 0) -> PipelineConfig:
    """
    Build the run configuration: config file first, flags on top.

    Raises:
        UnknownKeyException, InvalidValueException: From the config file or flags
    """
    config = parse_config(args.config) if args.config else PipelineConfig(seed=default_seed)
    overrides = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = str(args.seed)
    if getattr(args, 'mu', None) is not None:
        overrides['mu'] = str(args.mu)
    if getattr(args, 'no_mask', False):
        overrides['use_masks'] = 'false'
    if getattr(args, 'no_loop', False):
        overrides['use_loop_closure'] = 'false'
    if overrides:
        config = config_from_values(overrides, base=config)
    return config


def load_world(world: str, seed: Optional[int]) -> WorldSpec:
    """
    Resolve ``--world`` to a world description: a preset name or a JSON file.

    Raises:
        InvalidSpecException: For an unknown preset or malformed description
        MissingFileException: If a path-looking argument does not exist
    """
    presets = standard_worlds()
    if world in presets:
        spec = presets[world]
    elif world.endswith('.json') or os.path.sep in world:
        if not os.path.isfile(world):
            raise MissingFileException(f"World file not found: {world}")
        try:
            with open(world, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise InvalidSpecException(f"World file {world} is not valid JSON: {str(e)}")
        spec = WorldSpec.from_dict(data.get('world', data))
    else:
        raise InvalidSpecException(f"Unknown world '{world}'. Presets: {', '.join(sorted(presets))}")
    if seed is not None:
        if seed < 0:
            raise ValidationException(f"Seed must be >= 0: {seed}")
        spec.seed = seed
    spec.validate()
    return spec


def execute_simulate(args) -> int:
    logger = logging.getLogger("casual_slam")
    spec = load_world(args.world, args.seed)
    logger.info(f"Simulating world '{spec.name}' with seed {spec.seed}")
    bundle, _ = generate(spec)
    write_bundle(bundle, args.out)
    display_simulation_summary(spec, bundle, args.out)
    return EXIT_OK


def execute_run(args, default_seed: int = 0) -> int:
    """Reconstruct a bundle and write every run artifact; a diverged refinement still writes outputs."""
    logger = logging.getLogger("casual_slam")
    config = validate_run_args(args, default_seed)
    bundle = read_bundle(args.bundle)
    os.makedirs(args.out, exist_ok=True)

    pipeline = SlamPipeline(bundle, config)
    exit_code = EXIT_OK
    refine_error = None
    start = time.perf_counter()
    try:
        pipeline.run()
    except RefinementDivergedException as e:
        logger.error(f"Post-refinement diverged, keeping the pre-refinement map: {str(e)}")
        refine_error = e
        exit_code = EXIT_NUMERICAL
    pipeline.timings['total'] = time.perf_counter() - start

    trajectory = pipeline.trajectory()
    state = pipeline.state
    metrics = evaluate_trajectory(trajectory, bundle.gt_trajectory())
    metrics['keyframes'] = len(state.keyframes)
    metrics['lost_frames'] = len(state.lost_frames)
    metrics['loops'] = sum(1 for e in state.events if e['event'] == 'loop')
    metrics['focal_init'] = float(state.K_init.fx)
    metrics['focal'] = float(state.K.fx)
    metrics['post_refine'] = config.post_refine
    metrics['refine_diverged'] = refine_error is not None

    write_tum(trajectory, os.path.join(args.out, TRAJECTORY_FILE))
    write_keyframes(state, os.path.join(args.out, KEYFRAMES_FILE))
    write_events(state.events, os.path.join(args.out, EVENTS_FILE))
    if len(state.keyframes) >= 2:
        write_pose_graph(pipeline.pose_graph(), os.path.join(args.out, POSE_GRAPH_FILE))
    write_report(metrics, os.path.join(args.out, REPORT_FILE))
    write_config(config, os.path.join(args.out, CONFIG_ECHO_FILE))
    RunManifest.build(config, args.bundle, args.out, RUN_OUTPUTS, pipeline.timings).write(
        os.path.join(args.out, MANIFEST_FILE))

    display_run_result(metrics, args.out, pipeline.timings.get('total', 0.0))
    return exit_code


def execute_eval(args) -> int:
    if args.k < 1:
        raise ValidationException(f"--k must be >= 1: {args.k}")
    if not args.threshold > 0:
        raise ValidationException(f"--threshold must be > 0: {args.threshold}")
    est = read_tum(args.est)
    ref = read_tum(args.ref) if args.ref else None
    metrics = evaluate_trajectory(est, ref, k=args.k, threshold=args.threshold, literal=args.literal_breaks)
    if args.report:
        write_report(metrics, args.report)
    display_metrics(metrics)
    return EXIT_OK


def execute_focal(args, default_seed: int = 0) -> int:
    logger = logging.getLogger("casual_slam")
    config = validate_run_args(args, default_seed)
    bundle = read_bundle(args.bundle)
    pipeline = SlamPipeline(bundle, config)
    init_frames = select_init_frames(bundle, config.n_init, config.flow_threshold_px, pipeline.index)
    K = pipeline.estimate_focal(init_frames)
    logger.info(f"Estimated focal length {K.fx:.3f} px from frames {init_frames[0]}..{init_frames[-1]}")

    print("\n" + "=" * 50)
    print("FOCAL LENGTH")
    print("=" * 50)
    print(f"Init frames: {', '.join(str(f) for f in init_frames)}")
    print(f"Focal:       {K.fx:.3f} px")
    print(f"Principal:   ({K.cx:.1f}, {K.cy:.1f})")
    true_fx = (bundle.world or {}).get('camera', {}).get('fx')
    if true_fx:
        print(f"True focal:  {float(true_fx):.3f} px ({100.0 * (K.fx - true_fx) / true_fx:+.3f}%)")
    print("=" * 50)
    return EXIT_OK


def display_simulation_summary(spec: WorldSpec, bundle, out_dir: str) -> None:
    print("\n" + "=" * 50)
    print("SIMULATION SUMMARY")
    print("=" * 50)
    print(f"World:      {spec.name}")
    print(f"Seed:       {spec.seed}")
    print(f"Frames:     {bundle.frame_count}")
    print(f"Patches:    {len(bundle.patches)}")
    print(f"Edges:      {len(bundle.edges)}")
    print(f"Masks:      {len(bundle.masks)}")
    print(f"Bundle:     {out_dir}")
    print("=" * 50)


def display_metrics(metrics: dict) -> None:
    print("\n" + "=" * 50)
    print("EVALUATION")
    print("=" * 50)
    for key, value in metrics.items():
        if isinstance(value, float):
            print(f"{key:<22} {value:.6g}")
        elif isinstance(value, (list, tuple)):
            print(f"{key:<22} {' '.join(str(v) for v in value)}")
        else:
            print(f"{key:<22} {value}")
    print("=" * 50)


def display_run_result(metrics: dict, out_dir: str, seconds: float) -> None:
    print("\n" + "=" * 50)
    if metrics.get('refine_diverged'):
        print("⚠️  RUN FINISHED, REFINEMENT ROLLED BACK")
    else:
        print("✅ RUN FINISHED")
    print("=" * 50)
    print(f"Registered: {metrics['registered']}/{metrics['frames']} frames")
    print(f"Keyframes:  {metrics['keyframes']}")
    print(f"Loops:      {metrics['loops']}")
    print(f"Breaks:     {metrics['breaks']}")
    print(f"Focal:      {metrics['focal']:.3f} px")
    if 'ate_rmse' in metrics:
        print(f"ATE RMSE:   {metrics['ate_rmse']:.6g}")
    print(f"Duration:   {format_duration(seconds)}")
    print(f"Outputs:    {out_dir}")
    print("=" * 50)


def main(argv=None) -> int:
    """
    Main entry point for the CLI application.

    Handles environment loading, argument parsing, logging setup and
    dispatch; exits with 0/2/3/4 depending on the outcome.
    """
    try:
        env = load_environment()
    except SlamException as e:
        print(f"❌ Configuration Error: {str(e)}")
        print("\nPlease check your .env file")
        sys.exit(EXIT_USAGE)

    parser = create_parser(env['log_file'])
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_USAGE)

    logger = setup_logging(args.log_file, level=env['log_level'])
    if args.verbose:
        logger.setLevel(logging.DEBUG)
        logger.debug("Verbose logging enabled")

    logger.info("=" * 60)
    logger.info(f"STARTING {args.command.upper()}")
    logger.info("=" * 60)
    logger.info(f"Command line arguments: {' '.join(sys.argv[1:] if argv is None else argv)}")

    try:
        if args.command == 'simulate':
            code = execute_simulate(args)
        elif args.command == 'run':
            code = execute_run(args, env['default_seed'])
        elif args.command == 'eval':
            code = execute_eval(args)
        else:
            code = execute_focal(args, env['default_seed'])

    except SlamException as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"\n❌ Error: {str(e)}")
        if code == EXIT_USAGE:
            print("\nUse --help for usage information and examples")
        else:
            print(f"\nCheck {args.log_file} for detailed error information")
        sys.exit(code)

    except KeyboardInterrupt:
        print("\n❌ Operation cancelled by user")
        sys.exit(EXIT_FAILURE)

    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}")
        print(f"❌ Unexpected error: {str(e)}")
        print(f"Check {args.log_file} for detailed error information")
        sys.exit(EXIT_FAILURE)

    logger.info("=" * 60)
    logger.info("SESSION COMPLETED")
    logger.info("=" * 60)
    if code != EXIT_OK:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
