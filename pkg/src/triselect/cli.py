"""Command-line entry point.

    tri-select run --task T --manifest M --images DIR --out DIR [options]
    tri-select synth --config CFG.json --out DIR

Exit codes: 0 success, 2 configuration error, 3 bad input, 4 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, TriSelectError
from .pipeline import PipelineConfig, run_pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tri-select",
                                     description="Three-stage selection of crowdsensed images.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the selection pipeline")
    run.add_argument("--task", required=True, type=Path)
    run.add_argument("--manifest", required=True, type=Path)
    run.add_argument("--images", type=Path, help="root directory for image paths")
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--budget", type=int, default=10)
    run.add_argument("--tau", type=float, default=0.5)
    run.add_argument("--sigma", type=float, default=None,
                     help="view affinity width (default: median pairwise distance)")
    run.add_argument("--sigma-d", type=float, default=0.4)
    run.add_argument("--ratio", type=float, default=0.8)
    run.add_argument("--k-min", type=int, default=None)
    run.add_argument("--k-max", type=int, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--stages", default="123", help="1, 12 or 123")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--plots", action="store_true")
    run.add_argument("--cache", type=Path, default=None, help="descriptor cache directory")

    synth = sub.add_parser("synth", help="write a synthetic scenario")
    synth.add_argument("--config", required=True, type=Path)
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--no-images", action="store_true")
    return parser


def _run(args) -> int:
    cfg = PipelineConfig(task_path=args.task, manifest_path=args.manifest, image_root=args.images,
                         out_dir=args.out, budget=args.budget, tau=args.tau, sigma=args.sigma,
                         sigma_d=args.sigma_d, ratio=args.ratio, k_min=args.k_min,
                         k_max=args.k_max, seed=args.seed, stages=args.stages,
                         threads=args.threads, plots=args.plots, cache_dir=args.cache)
    report = run_pipeline(cfg)
    c = report.counts
    line = f"P={c['P']} P_v={c['P_v']}"
    if "k" in c:
        line += f" k={c['k']}"
    if "P_r" in c:
        line += f" P_r={c['P_r']}"
    print(line)
    return 0


def _synth(args) -> int:
    from .synth import load_config, write_scenario

    try:
        cfg = load_config(args.config)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
    sc = write_scenario(cfg, args.out, render=not args.no_images)
    print(f"wrote {len(sc.records)} records to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which is also our config code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args) if args.command == "run" else _synth(args)
    except TriSelectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
