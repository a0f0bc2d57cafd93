"""
Command-line entry point.

    bbdfml build-pool --profile desk --output-dir outputs
    bbdfml train --profile desk --pool outputs/pool
    bbdfml evaluate --state outputs/runs/<hash>.pt --methods random best_api bidf_mkd
    bbdfml ablate q_sweep --profile desk --values 10 50
    bbdfml export --state outputs/runs/<hash>.pt

Every RunConfig key is also a flag (``--max-iterations 10``, ``--no-use-replay``).
Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 acceptance failure.
"""

import argparse
import logging
import os
import sys
import types
import typing

from config import PROFILES, Config, RunConfig, load_run_config
from services.api_pool import build_pool, load_pool, save_pool
from services.data_sources import build_sources
from services.errors import ConfigurationError, DfmlError, EvaluationPurityError
from services.harness import BASELINES, EvalReport, assert_evaluation_purity, comparison_table, run_baseline
from services.orchestrator import ABLATIONS, export_ablation, export_report, run_ablation
from services.trainer import load_run_state, run_meta_training, save_run_state
from utils.logger import app_logger, set_console_level

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ACCEPTANCE = 4


class AcceptanceError(Exception):
    pass


def _flag_type(annotation):
    """argparse type and nargs for a RunConfig field annotation."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        annotation = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(annotation), typing.get_args(annotation)
    if origin is tuple:
        return {"type": args[0], "nargs": "+"}
    if origin is typing.Literal:
        return {"type": type(args[0]), "choices": list(args)}
    if annotation is bool:
        return {"action": argparse.BooleanOptionalAction}
    return {"type": annotation}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    parser.add_argument("--config", default=None, help="flat JSON file of RunConfig keys")
    group = parser.add_argument_group("run configuration")
    for name, info in RunConfig.model_fields.items():
        if name == "output_dir":
            continue
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, **_flag_type(info.annotation))


def _overrides(args: argparse.Namespace) -> dict:
    values = {name: getattr(args, name, None) for name in RunConfig.model_fields}
    values["output_dir"] = args.output_dir
    return values


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, profile=args.profile, overrides=_overrides(args))


def _pool_for(cfg: RunConfig, pool_dir: str | None):
    train_sources, test_sources = build_sources(cfg)
    if pool_dir:
        pool = load_pool(pool_dir, whitebox=cfg.whitebox)
    else:
        pool = build_pool(cfg.scenario_config(), train_sources, cfg.seed, cfg.pretrain(), whitebox=cfg.whitebox)
    return pool, train_sources, test_sources


def _state_path(cfg: RunConfig, digest: str) -> str:
    return os.path.join(cfg.output_dir, "runs", f"{digest[:12]}.pt")


def cmd_build_pool(args) -> int:
    cfg = _run_config(args)
    pool, _, _ = _pool_for(cfg, None)
    manifest = save_pool(pool, args.pool or os.path.join(cfg.output_dir, "pool"))
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        resume = load_run_state(args.resume)
        cfg = resume.cfg
    else:
        resume = None
        cfg = _run_config(args)
    pool, _, _ = _pool_for(cfg, args.pool)
    state = run_meta_training(cfg, pool, resume=resume)
    path = save_run_state(state, _state_path(cfg, state.config_hash))
    print(path)
    return EXIT_OK


def _check_gap(reports: list[EvalReport], min_gap: float) -> None:
    ours = [r for r in reports if r.method_tag == "bidf_mkd"]
    others = [r for r in reports if r.method_tag not in ("bidf_mkd", "whitebox_fo")]
    if not ours or not others:
        raise AcceptanceError("--min-gap needs bidf_mkd and at least one black-box baseline among --methods")
    for report in ours:
        rivals = [r.mean_accuracy for r in others if r.shots == report.shots]
        gap = report.mean_accuracy - max(rivals, default=0.0)
        if gap < min_gap:
            raise AcceptanceError(
                f"bidf_mkd leads the best baseline by {100 * gap:.2f} points at {report.shots} shot, "
                f"{100 * min_gap:.2f} required"
            )


def cmd_evaluate(args) -> int:
    state = load_run_state(args.state)
    cfg = state.cfg
    pool, _, test_sources = _pool_for(cfg, args.pool)
    assert_evaluation_purity(pool, state.bank, test_sources)

    reports = []
    for shots in args.shots or [cfg.shots]:
        spec = cfg.episode_spec().model_copy(update={"shots": shots})
        for tag in args.methods:
            reused = state if tag == state.method else None
            reports.append(run_baseline(tag, pool, test_sources, spec, cfg, state=reused))

    print(comparison_table(reports, cfg.ways))
    paths = export_report(state, reports, pool=pool)
    print(paths["summary"])
    if args.min_gap is not None:
        _check_gap(reports, args.min_gap)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    values = tuple(args.values) if args.values else None
    if values and args.which not in ("fo_vs_zo", "component_toggle"):
        values = tuple(float(v) if args.which == "lambda_sweep" else int(v) for v in values)
    result = run_ablation(args.which, cfg, values)
    print(result.table())
    paths = export_ablation(result, cfg.output_dir, cfg)
    print(paths["table"])
    return EXIT_OK


def cmd_export(args) -> int:
    state = load_run_state(args.state)
    pool = load_pool(args.pool) if args.pool else None
    paths = export_report(state, pool=pool, output_dir=args.output_dir)
    print(paths["summary"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbdfml", description="Black-box data-free meta-learning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log INFO to the console")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-pool", help="pre-train the API pool and write its manifest")
    _add_config_flags(p)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--pool", default=None, help="manifest directory (default <output-dir>/pool)")
    p.set_defaults(func=cmd_build_pool)

    p = sub.add_parser("train", help="meta-train against a pool")
    _add_config_flags(p)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--pool", default=None, help="load APIs from this manifest directory instead of building them")
    p.add_argument("--resume", default=None, help="continue from a RunState checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="meta-test a trained state and its baselines")
    p.add_argument("--state", required=True)
    p.add_argument("--pool", default=None)
    p.add_argument("--methods", nargs="+", default=["bidf_mkd"], choices=BASELINES)
    p.add_argument("--shots", nargs="+", type=int, default=None)
    p.add_argument("--min-gap", type=float, default=None,
                   help="fail unless bidf_mkd beats every black-box baseline by this accuracy margin")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run one ablation grid")
    p.add_argument("which", choices=ABLATIONS)
    p.add_argument("--values", nargs="+", default=None)
    _add_config_flags(p)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write metrics, sample grids and the summary of a run")
    p.add_argument("--state", required=True)
    p.add_argument("--pool", default=None)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_console_level(logging.INFO)
    app_logger.info(f"bbdfml {args.command} ({Config.check_environment()})")
    try:
        return args.func(args)
    except ConfigurationError as e:
        app_logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AcceptanceError, EvaluationPurityError) as e:
        app_logger.error(f"Acceptance check failed: {e}")
        print(f"acceptance failure: {e}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except DfmlError as e:
        app_logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
