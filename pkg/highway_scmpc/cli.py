"""
Command-line interface.

    highway-scmpc simulate --config configs/case1.json --out runs/case1 [--format csv]
    highway-scmpc predict  --config configs/case1.json --out runs/case1-predict
    highway-scmpc bench    --seed 1 --scenes 100 --out runs/bench
    highway-scmpc serve    --host 127.0.0.1 --port 8000

Exit codes: 0 success, 1 collision or feasibility violation during a run, 2 invalid
input (usage errors, configuration or track data; problem details JSON on stderr).
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from highway_scmpc.config import ExperimentConfig, apply_env_overrides, load_config
from highway_scmpc.errors import CollisionError, ConfigError, FeasibilityViolation, ScmpcError
from highway_scmpc.simulation import (
    bench, run_closed_loop, run_predict, summarize, write_jsonl, write_outputs,
)
from highway_scmpc.structured_logger import get_logger, setup_structured_logging
from highway_scmpc.version import SERVICE_NAME, get_version

logger = get_logger(__name__)

EXIT_OK, EXIT_RUN_FAILED, EXIT_INVALID = 0, 1, 2


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=os.environ.get('SCMPC_CONFIG'),
                        help='experiment config JSON (default: $SCMPC_CONFIG)')
    common.add_argument('--out', default=os.environ.get('SCMPC_OUT_DIR', 'runs'),
                        help='output directory (default: $SCMPC_OUT_DIR or runs)')
    common.add_argument('--seed', type=int, default=None,
                        help='random seed; overrides the config and $SCMPC_SEED')
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=SERVICE_NAME,
        description='Interaction-aware prediction and scenario MPC on highway scenes')
    parser.add_argument('--version', action='version', version=f'%(prog)s {get_version()}')
    sub = parser.add_subparsers(dest='command', required=True)
    common = _common_parser()

    simulate = sub.add_parser('simulate', parents=[common], help='closed-loop simulation')
    simulate.add_argument('--format', choices=('jsonl', 'csv'), default='jsonl',
                          help='step log format')
    simulate.add_argument('--verify-feasibility', action='store_true',
                          help='re-check the shifted worst-case input at every control step')
    simulate.add_argument('--duration', type=float, default=None,
                          help='simulated seconds (default: simulation.Ts)')

    predict = sub.add_parser('predict', parents=[common],
                             help='prediction fans over a dataset window or scene')
    predict.add_argument('--duration', type=float, default=None)

    bench_cmd = sub.add_parser('bench', parents=[common],
                               help='per-step latency over random scenes')
    bench_cmd.add_argument('--scenes', type=int, default=100)
    bench_cmd.add_argument('--duration', type=float, default=2.0,
                           help='simulated seconds per scene')

    serve = sub.add_parser('serve', parents=[common], help='run the HTTP service')
    serve.add_argument('--host', default=os.environ.get('SCMPC_HOST', '127.0.0.1'))
    serve.add_argument('--port', type=int, default=int(os.environ.get('SCMPC_PORT', 8000)))
    return parser


def _load(args, required: bool = True) -> Optional[ExperimentConfig]:
    if not args.config:
        if required:
            raise ConfigError('--config (or $SCMPC_CONFIG) is required')
        return None
    cfg = apply_env_overrides(load_config(args.config))
    if args.seed is not None:
        cfg.simulation.seed = args.seed
    return cfg


def _print_problem(error: ScmpcError):
    print(json.dumps(error.to_problem(), indent=2, sort_keys=True, default=str),
          file=sys.stderr)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.verify_feasibility:
        cfg.simulation.verify_feasibility = True
    steps = []
    try:
        result = run_closed_loop(cfg, on_step=steps.append, duration=args.duration)
    except (CollisionError, FeasibilityViolation) as e:
        collision = e.forensics if isinstance(e, CollisionError) else None
        summary = summarize(cfg, steps, steps[-1].ego if steps else None, cfg.lanes.geometry(),
                            None, None, False, collision=collision is not None)
        summary['aborted'] = e.to_problem()
        write_outputs(steps, summary, args.out, args.format, collision=collision)
        _print_problem(e)
        return EXIT_RUN_FAILED
    paths = write_outputs(result.steps, result.summary, args.out, args.format)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load(args)
    records = run_predict(cfg, duration=args.duration)
    path = write_jsonl(records, Path(args.out) / 'predictions.jsonl')
    print(json.dumps({'predictions': str(path)}))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load(args, required=False) or ExperimentConfig()
    seed = args.seed if args.seed is not None else cfg.simulation.seed
    report = bench(cfg, scenes=args.scenes, seed=seed, duration=args.duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'bench.json', 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')
    print(json.dumps({'step': report['step'], 'solve': report['solve']}, sort_keys=True))
    return EXIT_OK


def cmd_serve(args) -> int:
    from highway_scmpc.service import create_app

    app = create_app(args.config)
    print(f' * {SERVICE_NAME} starting on http://{args.host}:{args.port}')
    app.run(host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'predict': cmd_predict,
    'bench': cmd_bench,
    'serve': cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse `argv` and run the subcommand; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_structured_logging()
    try:
        return COMMANDS[args.command](args)
    except ScmpcError as e:
        logger.error('Command failed', extra={'command': args.command, 'detail': e.detail})
        _print_problem(e)
        return EXIT_INVALID


if __name__ == '__main__':
    sys.exit(main())
