"""Command-line harness: ``verify``, ``bench``, ``ablate`` and ``report``.

Exit status: 0 when every cell passes, 1 on a verification failure or I/O
error, 2 on a usage error (bad flags, partition violations).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigurationError
from .generator import DEFAULT_TOLERANCE, GenerationConfig, generate, reference_config, verify_stream
from .report import accounting_report, ablation_matrix, run_sweep, strip_timing
from .sp_attention import PipelineVariant

log = logging.getLogger("causal_sp")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid_list(text: str) -> list[tuple[int, int]]:
    grids = []
    for item in text.split(","):
        try:
            h, w = item.lower().split("x")
            grids.append((int(h), int(w)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {item!r}") from None
    return grids


def _variant_list(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in ("baseline", "optimized")]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"variants must be baseline and/or optimized, got {text!r}")
    return names


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--world", type=_int_list, default=[2, 4], help="comma-separated world sizes")
    p.add_argument("--frames-per-block", type=int, default=3)
    p.add_argument("--grid-h", type=int, default=4)
    p.add_argument("--grid-w", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-frames", type=int, default=None)
    p.add_argument("--element-width-bytes", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-sp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="check SP variants against the single-rank reference")
    _shared(verify)
    verify.add_argument("--variants", type=_variant_list, default=["baseline", "optimized"])
    verify.add_argument("--corrupt-start-frame", action="store_true",
                        help="force start_frame=0 for every block (negative control)")
    verify.add_argument("--jobs", type=int, default=1, help="verify cells in parallel")

    bench = sub.add_parser("bench", help="time variants across world sizes and grids")
    _shared(bench)
    bench.add_argument("--variants", type=_variant_list, default=["baseline", "optimized"])
    bench.add_argument("--grids", type=_grid_list, default=None, help="comma-separated HxW grids")
    bench.add_argument("--reps", type=int, default=5)

    ablate = sub.add_parser("ablate", help="run the 2^3 ablation lattice")
    _shared(ablate)

    report = sub.add_parser("report", help="latency accounting from stage timings")
    report.add_argument("--baseline-stages-ms", type=_float_list, default=None)
    report.add_argument("--optimized-stages-ms", type=_float_list, default=None)
    report.add_argument("--calls", type=int, default=None)
    report.add_argument("--baseline-total-s", type=float, default=None)
    report.add_argument("--optimized-total-s", type=float, default=None)
    report.add_argument("--out", default=None)
    report.add_argument("--format", choices=("json",), default="json")
    return parser


def _base_config(args, world_size: int, variant: str = "optimized", **extra) -> GenerationConfig:
    fields = dict(
        frames_per_block=args.frames_per_block,
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        num_blocks=args.blocks,
        layers=args.layers,
        denoise_steps=args.steps,
        batch=args.batch,
        heads=args.heads,
        head_dim=args.head_dim,
        world_size=world_size,
        seed=args.seed,
        variant=variant,
        window_frames=args.window_frames,
        element_width_bytes=args.element_width_bytes,
    )
    fields.update(extra)
    try:
        return GenerationConfig(**fields)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"P={world_size}: {exc}") from None


def _emit(args, payload) -> None:
    if isinstance(payload, str):
        text = payload
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_verify(args) -> int:
    if args.format != "json":
        raise UsageError("verify only emits JSON")
    configs = [
        _base_config(args, p, v, corrupt_start_frame=args.corrupt_start_frame)
        for p in args.world for v in args.variants
    ]
    references = {}

    def run(config: GenerationConfig):
        key = reference_config(config)
        if key not in references:
            references[key] = generate(key)
        return verify_stream(config, args.tolerance, reference=references[key])

    if args.jobs > 1:
        # the shared reference is computed up front so workers only read it
        run(configs[0])
        with ThreadPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(run, configs))
    else:
        reports = [run(c) for c in configs]
    for r in reports:
        log.info("P=%d %s: %s (max dev %.3g)", r.config.world_size, r.config.variant.kind.value,
                 "pass" if r.passed else "FAIL", max(r.block_deviations))
    passed = all(r.passed for r in reports)
    _emit(args, {"cells": [r.to_json() for r in reports], "passed": passed})
    return EXIT_OK if passed else EXIT_FAIL


def cmd_bench(args) -> int:
    grids = args.grids or [(args.grid_h, args.grid_w)]
    configs = []
    for h, w in grids:
        for p in args.world:
            for v in args.variants:
                configs.append(_base_config(args, p, v, grid_h=h, grid_w=w))
    report = run_sweep(configs, reps=args.reps)
    if args.format == "csv":
        _emit(args, report.to_csv())
    else:
        payload = report.to_json()
        if args.no_timing:
            payload = strip_timing(payload)
        _emit(args, payload)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.format != "json":
        raise UsageError("ablate only emits JSON")
    results = []
    for p in args.world:
        base = _base_config(args, p, PipelineVariant.optimized())
        results.append(ablation_matrix(base, args.tolerance))
    payload = {"worlds": results, "passed": all(r["passed"] for r in results)}
    if args.no_timing:
        payload = strip_timing(payload)
    _emit(args, payload)
    return EXIT_OK if payload["passed"] else EXIT_FAIL


def cmd_report(args) -> int:
    kwargs = {}
    if args.baseline_stages_ms is not None:
        kwargs["baseline_stage_ms"] = args.baseline_stages_ms
    if args.optimized_stages_ms is not None:
        kwargs["optimized_stage_ms"] = args.optimized_stages_ms
    if args.calls is not None:
        kwargs["calls"] = args.calls
    if (args.baseline_total_s is None) != (args.optimized_total_s is None):
        raise UsageError("--baseline-total-s and --optimized-total-s go together")
    _emit(args, accounting_report(baseline_total_s=args.baseline_total_s,
                                  optimized_total_s=args.optimized_total_s, **kwargs))
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"causal-sp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"causal-sp {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
