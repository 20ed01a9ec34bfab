"""Benchmark harness contrasting monolithic, decomposed and scatter-accumulate transforms.

Every configuration is verified before it is timed: all pipelines must
reproduce the monolithic output bit for bit, otherwise the configuration is
rejected with :class:`BenchVerificationError`.

The decomposed pipelines are timed with the index graph already built; the
build cost is reported separately as ``build_time_ns``.
"""
from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import threading
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aggregation import FeatureStack, transform
from .errors import ConfigurationError
from .geometry import DepthBinning, VoxelGrid, project_points
from .indexgraph import build_index_graph
from .oracle import MonolithicConfig, _check_inputs, transform_monolithic
from .synthio import RigSpec, StackSpec, make_rig, make_stacks

PIPELINES = ("monolithic", "decomposed", "decomposed+depth", "atomic-scatter-baseline")
REPORT_VERSION = 1
_NO_OWNER = np.iinfo(np.int64).max


class BenchVerificationError(RuntimeError):
    """A pipeline disagreed with the reference; its timings would be meaningless."""


def atomic_scatter_baseline(stack: FeatureStack, cfg: MonolithicConfig, threads: int = 4,
                            chunk: int = 1 << 14, stripe: int = 1 << 12) -> np.ndarray:
    """Produce the depth-free volume by scatter with locked read-modify-write updates.

    Work items are ``(camera, voxel block)`` pairs run on a thread pool. A
    claim pass lowers each cell's owner to the smallest camera index that
    sees it; an accumulate pass then adds each owner's feature into the
    volume. Both passes update shared cells only while holding the lock of
    the cell's stripe (``stripe`` consecutive cells per lock).

    The accumulator starts at -0.0, the exact additive identity, so a cell
    with a single contribution ends bitwise equal to that contribution.
    """
    if cfg.depth_mode:
        raise ConfigurationError("the scatter baseline covers the depth-free transform only")
    _check_inputs(cfg, stack, None)
    grid = cfg.grid
    n = grid.num_voxels
    volume = np.full((n, stack.channels), -0.0, dtype=np.float32)
    owner = np.full(n, _NO_OWNER, dtype=np.int64)
    locks = [threading.Lock() for _ in range(-(-n // stripe))]
    features = stack.data
    items = [(k, s, min(s + chunk, n)) for k in range(len(cfg.cams)) for s in range(0, n, chunk)]
    hits: List[Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = [None] * len(items)

    def stripes(cells):
        if not cells.size:
            return
        ids = cells // stripe
        cuts = np.flatnonzero(np.diff(ids)) + 1
        bounds = np.concatenate(([0], cuts, [cells.size]))
        for a, b in zip(bounds[:-1], bounds[1:]):
            yield int(ids[a]), a, b

    def claim(i):
        k, s, e = items[i]
        proj = project_points(cfg.cams[k], cfg.binning, grid.centers(s, e))
        cells = s + np.flatnonzero(proj.valid)
        hits[i] = (cells, proj.u[proj.valid], proj.v[proj.valid])
        for sid, a, b in stripes(cells):
            with locks[sid]:
                seg = cells[a:b]
                owner[seg] = np.minimum(owner[seg], k)

    def accumulate(i):
        k = items[i][0]
        cells, u, v = hits[i]
        mine = owner[cells] == k
        cells, rows = cells[mine], features[k, v[mine], u[mine]]
        for sid, a, b in stripes(cells):
            with locks[sid]:
                np.add.at(volume, cells[a:b], rows[a:b])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(claim, range(len(items))))
        list(pool.map(accumulate, range(len(items))))
    volume[owner == _NO_OWNER] = 0.0
    return volume.reshape(*grid.dims, stack.channels)


def bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class BenchRecord:
    pipeline: str
    grid: List[int]
    cameras: int
    channels: int
    depth_bins: int
    threads: int
    build_time_ns: Optional[int]
    transform_time_ns: int
    samples_ns: List[int]
    warmup: int
    throughput_voxels_per_s: float
    peak_resident_delta_bytes: Optional[int]


@dataclass
class BenchReport:
    preset: str
    threads: int
    runs: int
    warmup: int
    records: List[BenchRecord] = field(default_factory=list)
    host: Dict[str, object] = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def median(self, pipeline: str, grid: Sequence[int], channels: int) -> int:
        for rec in self.records:
            if rec.pipeline == pipeline and rec.grid == list(grid) and rec.channels == channels:
                return rec.transform_time_ns
        raise KeyError((pipeline, tuple(grid), channels))

    def write(self, path) -> str:
        """Write the JSON report to ``path`` and its CSV flattening next to it; return the CSV path."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        csv_path = os.path.splitext(os.fspath(path))[0] + ".csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.csv_rows():
                writer.writerow(row)
        return csv_path

    def csv_rows(self) -> List[list]:
        rows = []
        for r in self.records:
            rows.append([
                r.pipeline, "x".join(map(str, r.grid)), r.cameras, r.channels, r.depth_bins,
                r.threads, "" if r.build_time_ns is None else r.build_time_ns,
                r.transform_time_ns, r.throughput_voxels_per_s,
                "" if r.peak_resident_delta_bytes is None else r.peak_resident_delta_bytes,
                len(r.samples_ns), ";".join(map(str, r.samples_ns)),
            ])
        return rows


CSV_COLUMNS = ["pipeline", "grid", "cameras", "channels", "depth_bins", "threads",
               "build_time_ns", "transform_time_ns", "throughput_voxels_per_s",
               "peak_resident_delta_bytes", "num_samples", "samples_ns"]


def report_schema() -> dict:
    text = resources.files("bevgather").joinpath("schemas/bench_report.schema.json").read_text()
    return json.loads(text)


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not follow the report schema."""
    import jsonschema

    jsonschema.validate(doc, report_schema())


def bench_grid(dims: Sequence[int], extent: float = 40.0, z_range=(-2.0, 2.0)) -> VoxelGrid:
    """A grid of ``dims`` covering ``[-extent, extent]^2`` around the ego origin."""
    z, h, w = (int(d) for d in dims)
    return VoxelGrid(
        origin=(-extent, -extent, z_range[0]),
        voxel_size=(2 * extent / w, 2 * extent / h, (z_range[1] - z_range[0]) / z),
        dims=(z, h, w),
    )


def time_call(fn: Callable[[], object], runs: int, warmup: int) -> List[int]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return samples


def peak_alloc(fn: Callable[[], object]) -> Optional[int]:
    """Peak bytes allocated during one call, as seen by ``tracemalloc`` (best effort)."""
    if tracemalloc.is_tracing():
        return None
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _host_info(threads: int) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
    }


def run_bench(preset: str = "ring6", grids: Sequence[Sequence[int]] = ((6, 128, 128),),
              channels: Sequence[int] = (32,), pipelines: Sequence[str] = PIPELINES,
              threads: int = 4, runs: int = 20, warmup: int = 3, depth_bins: int = 60,
              image: Tuple[int, int] = (96, 64), seed: int = 0,
              log: Optional[Callable[[str], None]] = None) -> BenchReport:
    """Verify, then time, every pipeline on every ``grid x channels`` configuration."""
    unknown = set(pipelines) - set(PIPELINES)
    if unknown:
        raise ValueError(f"unknown pipelines {sorted(unknown)}; choose from {PIPELINES}")
    if runs < 1 or warmup < 0:
        raise ValueError("need runs >= 1 and warmup >= 0")
    cams = make_rig(RigSpec(preset=preset, image=image))
    binning = DepthBinning(1.0, 61.0, depth_bins)
    report = BenchReport(preset=preset, threads=threads, runs=runs, warmup=warmup,
                         host=_host_info(threads))
    for dims in grids:
        grid = bench_grid(dims)
        t0 = time.perf_counter_ns()
        g = build_index_graph(grid, cams, binning, threads=threads)
        build_ns = time.perf_counter_ns() - t0
        for c in channels:
            features, depth = make_stacks(StackSpec(channels=c, seed=seed), cams, binning)
            plain = MonolithicConfig(grid, cams, binning, depth_mode=False)
            runners = {
                "monolithic": lambda: transform_monolithic(plain, features, threads=threads),
                "decomposed": lambda: transform(features, None, g, threads=threads),
                "decomposed+depth": lambda: transform(features, depth, g, threads=threads),
                "atomic-scatter-baseline": lambda: atomic_scatter_baseline(features, plain, threads=threads),
            }
            expected = {
                "monolithic": transform_monolithic(plain, features),
                "decomposed+depth": transform_monolithic(
                    MonolithicConfig(grid, cams, binning, depth_mode=True), features, depth),
            }
            expected["decomposed"] = expected["atomic-scatter-baseline"] = expected["monolithic"]
            for name in pipelines:
                if not bitwise_equal(runners[name](), expected[name]):
                    raise BenchVerificationError(
                        f"{name} disagrees with the monolithic reference on grid {tuple(dims)}, C={c}")
            for name in pipelines:
                samples = time_call(runners[name], runs, warmup)
                median = int(statistics.median(samples))
                report.records.append(BenchRecord(
                    pipeline=name,
                    grid=list(grid.dims),
                    cameras=len(cams),
                    channels=c,
                    depth_bins=depth_bins,
                    threads=threads,
                    build_time_ns=build_ns if name.startswith("decomposed") else None,
                    transform_time_ns=median,
                    samples_ns=samples,
                    warmup=warmup,
                    throughput_voxels_per_s=grid.num_voxels / (median / 1e9) if median else 0.0,
                    peak_resident_delta_bytes=peak_alloc(runners[name]),
                ))
                if log:
                    log(f"{name:>24} grid={'x'.join(map(str, grid.dims))} C={c}: "
                        f"median {median / 1e6:.2f} ms")
    return report
