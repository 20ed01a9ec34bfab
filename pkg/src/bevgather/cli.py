"""Command-line entry point: ``bevgather <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional, Sequence

from .aggregation import DepthStack, FeatureStack, transform
from .bench import PIPELINES, BenchVerificationError, run_bench
from .errors import CalibrationError, ConfigurationError, FormatError
from .geometry import DepthBinning, VoxelGrid
from .indexgraph import build_index_graph, coverage_stats, load_index_graph, save_index_graph
from .opgraph import export_graph, lower, validate
from .synthio import load_calibration, load_tensor, save_tensor
from .verify import run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


def _floats(text: str, n: int, what: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    if len(values) != n:
        raise argparse.ArgumentTypeError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    return values


def grid_dims(text: str):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"grid must look like ZxHxW with positive sizes, got {text!r}")
    return dims


def grid_list(text: str):
    return [grid_dims(part) for part in text.split(",") if part]


def int_list(text: str):
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def triple(what):
    return lambda text: _floats(text, 3, what)


def depth_spec(text: str):
    d_min, d_max, bins = _floats(text, 3, "--depth")
    if bins != int(bins):
        raise argparse.ArgumentTypeError(f"--depth: bin count must be an integer, got {bins}")
    return d_min, d_max, int(bins)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevgather",
        description="Index-graph based camera-to-BEV view transformation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-lut", help="build and serialize an index graph (FBLT)")
    p.add_argument("--calib", required=True, help="calibration JSON file")
    p.add_argument("--grid", required=True, type=grid_dims, help="voxel counts ZxHxW")
    p.add_argument("--origin", required=True, type=triple("--origin"),
                   help="grid minimum corner x,y,z in ego meters")
    p.add_argument("--voxel", required=True, type=triple("--voxel"), help="voxel size sx,sy,sz in meters")
    p.add_argument("--depth", required=True, type=depth_spec, help="depth binning dmin,dmax,D")
    p.add_argument("--threads", type=int, default=1, help="worker threads for construction")
    p.add_argument("--out", required=True, help="output FBLT file")

    p = sub.add_parser("transform", help="run the decomposed transform")
    p.add_argument("--lut", required=True, help="FBLT index graph")
    p.add_argument("--features", required=True, help="FBTN feature stack [N, H, W, C]")
    p.add_argument("--depth", help="FBTN depth stack [N, D, H, W]; omit for depth-free mode")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output FBTN volume [Z, H, W, C]")

    p = sub.add_parser("verify", help="randomized bit-exact equivalence suite")
    p.add_argument("--calib", help="calibration JSON; random rigs are used when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("-q", "--quiet", action="store_true", help="only print failures and the summary")

    p = sub.add_parser("bench", help="benchmark the pipelines and write a JSON report plus CSV")
    p.add_argument("--preset", default="ring6", help="rig preset (default ring6)")
    p.add_argument("--grids", type=grid_list, default=[(6, 128, 128)],
                   help="comma-separated ZxHxW list (default 6x128x128)")
    p.add_argument("--channels", type=int_list, default=[32], help="comma-separated channel counts")
    p.add_argument("--pipelines", nargs="+", choices=PIPELINES, default=list(PIPELINES))
    p.add_argument("--depth-bins", type=int, default=60)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--runs", type=int, default=20, help="timed runs per pipeline (median reported)")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON report path; CSV is written alongside")

    p = sub.add_parser("export-graph", help="export the operator graph as JSON")
    p.add_argument("--lut", required=True, help="FBLT index graph")
    p.add_argument("--depth", action="store_true", help="include depth modulation")
    p.add_argument("--out", required=True, help="output JSON file")
    return parser


def cmd_build_lut(args) -> int:
    cams = load_calibration(args.calib)
    grid = VoxelGrid(args.origin, args.voxel, args.grid)
    binning = DepthBinning(*args.depth)
    g = build_index_graph(grid, cams, binning, threads=args.threads)
    save_index_graph(g, args.out)
    stats = coverage_stats(g)
    print(f"wrote {args.out}: {g.num_voxels} voxels, {stats.valid_count} covered, "
          f"per camera {list(stats.per_camera_counts)}, fingerprint {g.fingerprint:#018x}")
    return EXIT_OK


def cmd_transform(args) -> int:
    g = load_index_graph(args.lut)
    features = FeatureStack(load_tensor(args.features))
    depth = DepthStack(load_tensor(args.depth)) if args.depth else None
    volume = transform(features, depth, g, threads=args.threads)
    save_tensor(args.out, volume)
    print(f"wrote {args.out}: volume {list(volume.shape)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cams = load_calibration(args.calib) if args.calib else None

    def report(i, result):
        if not result.ok:
            print(f"case {i} FAILED ({result.case.label}): {result.mismatch}")
        elif not args.quiet:
            print(f"case {i} ok ({result.case.label})")

    results = run_suite(seed=args.seed, cases=args.cases, cams=cams, on_result=report)
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} cases bit-exact")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def cmd_bench(args) -> int:
    try:
        report = run_bench(preset=args.preset, grids=args.grids, channels=args.channels,
                           pipelines=args.pipelines, threads=args.threads, runs=args.runs,
                           warmup=args.warmup, depth_bins=args.depth_bins, seed=args.seed,
                           log=print)
    except BenchVerificationError as exc:
        print(f"verification failed, timings rejected: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    csv_path = report.write(args.out)
    print(f"wrote {args.out} and {csv_path}")
    return EXIT_OK


def cmd_export_graph(args) -> int:
    g = load_index_graph(args.lut)
    graph = lower(g, with_depth=args.depth)
    problems = validate(graph)
    if problems:
        for v in problems:
            print(f"[{v.kind}] node {v.node}: {v.message}", file=sys.stderr)
        return EXIT_VERIFY
    out_dir = os.path.dirname(os.path.abspath(args.out))
    lut_ref = os.path.relpath(os.path.abspath(args.lut), out_dir)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(export_graph(graph, lut_file=lut_ref))
    print(f"wrote {args.out}: {len(graph.nodes)} nodes ({', '.join(graph.kinds())})")
    return EXIT_OK


COMMANDS = {
    "build-lut": cmd_build_lut,
    "transform": cmd_transform,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "export-graph": cmd_export_graph,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (FormatError, CalibrationError, ConfigurationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
