"""Command-line entry point: reconstruct, synthesize, evaluate.

Exit codes: 0 success, 1 unusable input (missing or malformed files,
bad arguments), 2 numerical failure on valid input.  Progress and
diagnostics go to stderr; machine-readable results go to files only.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import InputError, NumericalError, StageError
from .evaluate import read_pfm, score_depth
from .pipeline import PipelineConfig, _write_json, run, synth

log = logging.getLogger("dynrecon.cli")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; those are input errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="recon",
        description="Piecewise-planar reconstruction of a dynamic scene "
                    "from two frames and their optical flow.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p_run = sub.add_parser(
        "run", help="reconstruct a scene described by a config file")
    p_run.add_argument("--config", required=True,
                       help="pipeline config JSON")

    p_synth = sub.add_parser(
        "synth", help="render a synthetic scene spec into run inputs")
    p_synth.add_argument("--spec", required=True, help="scene spec JSON")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=0,
                         help="texture seed (default 0)")

    p_eval = sub.add_parser(
        "eval", help="score an estimated depth map against ground truth")
    p_eval.add_argument("--est", required=True, help="estimated depth PFM")
    p_eval.add_argument("--gt", required=True, help="ground-truth depth PFM")
    p_eval.add_argument("--out", help="write the metrics JSON here")
    p_eval.add_argument("--lsq", action="store_true",
                        help="least-squares scale alignment instead of "
                             "median-ratio")
    return parser


def _cmd_run(args) -> int:
    config = PipelineConfig.from_json(args.config)
    report = run(config)
    for stage, seconds in report.stage_seconds.items():
        log.info("%-12s %7.3f s", stage, seconds)
    log.info("energy %.6g -> %.6g", report.energies["initial"],
             report.energies["final"])
    if report.mre is not None:
        log.info("MRE %.6f over %d px (scale %.6g)", report.mre.mre,
                 report.mre.pixel_count, report.mre.global_scale)
    log.info("artifacts in %s", report.run_dir)
    return 0


def _cmd_synth(args) -> int:
    for path in synth(args.spec, args.out, seed=args.seed):
        log.info("wrote %s", path)
    return 0


def _cmd_eval(args) -> int:
    est = read_pfm(args.est)
    gt = read_pfm(args.gt)
    if est.shape != gt.shape:
        raise InputError(f"shape mismatch: {args.est} is {est.shape}, "
                         f"{args.gt} is {gt.shape}")
    mask = np.isfinite(gt) & (gt > 0)
    report = score_depth(est, gt, mask,
                         method="lsq" if args.lsq else "median")
    log.info("MRE %.6f over %d px (scale %.6g, %d excluded)", report.mre,
             report.pixel_count, report.global_scale, report.excluded)
    if args.out:
        _write_json(args.out, report.to_dict())
        log.info("wrote %s", args.out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"run": _cmd_run, "synth": _cmd_synth, "eval": _cmd_eval}
    try:
        return handlers[args.command](args)
    except StageError as exc:
        log.error("%s", exc)
        return 1 if isinstance(exc.cause, (InputError, OSError)) else 2
    except (InputError, OSError) as exc:
        log.error("%s", exc)
        return 1
    except NumericalError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
