"""Randomized equivalence checks: decomposed vs. monolithic vs. interpreted graph."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .aggregation import DepthStack, FeatureStack, transform
from .geometry import CameraModel, DepthBinning, VoxelGrid
from .indexgraph import IndexGraph, build_index_graph
from .opgraph import interpret, lower
from .oracle import MonolithicConfig, transform_monolithic
from .synthio import StackSpec, make_stacks, random_rig, rng_for

CHANNEL_CHOICES = (4, 32, 64)
BIN_CHOICES = (8, 60)


@dataclass
class Case:
    grid: VoxelGrid
    cams: List[CameraModel]
    binning: DepthBinning
    features: FeatureStack
    depth: Optional[DepthStack]
    label: str


@dataclass
class CaseResult:
    case: Case
    mismatch: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.mismatch is None


def random_case(rng: np.random.Generator, cams: Optional[Sequence[CameraModel]] = None,
                max_dims=(8, 128, 128)) -> Case:
    if cams is None:
        image = (int(rng.integers(8, 65)), int(rng.integers(8, 49)))
        cams = random_rig(rng, int(rng.integers(1, 9)), image)
    cams = list(cams)
    dims = tuple(int(rng.integers(1, m + 1)) for m in max_dims)
    reach = float(rng.uniform(5.0, 60.0))
    z_lo, z_hi = float(rng.uniform(-3.0, 0.0)), float(rng.uniform(0.5, 4.0))
    grid = VoxelGrid(
        origin=(-reach + rng.normal(0, 2), -reach + rng.normal(0, 2), z_lo),
        voxel_size=(2 * reach / dims[2], 2 * reach / dims[1], (z_hi - z_lo) / dims[0]),
        dims=dims,
    )
    binning = DepthBinning(float(rng.uniform(0.3, 2.0)), float(rng.uniform(30.0, 80.0)),
                           int(rng.choice(BIN_CHOICES)))
    spec = StackSpec(
        features=str(rng.choice(["random", "coord"])),
        depth=str(rng.choice(["softmax", "softmax", "delta", "ones"])),
        channels=int(rng.choice(CHANNEL_CHOICES)),
        delta_bin=int(rng.integers(0, binning.num_bins)),
        seed=int(rng.integers(0, 2**31)),
    )
    features, depth = make_stacks(spec, cams, binning)
    with_depth = bool(rng.integers(0, 2))
    label = (f"{len(cams)} cams {cams[0].width}x{cams[0].height}, grid {'x'.join(map(str, dims))}, "
             f"C={spec.channels}, D={binning.num_bins}, features={spec.features}, "
             f"depth={spec.depth if with_depth else 'off'}")
    return Case(grid, cams, binning, features, depth if with_depth else None, label)


def first_difference(a: np.ndarray, b: np.ndarray) -> Optional[str]:
    """Describe the first element where two volumes differ bitwise, or ``None``."""
    if a.shape != b.shape:
        return f"shape {a.shape} != {b.shape}"
    diff = np.flatnonzero(a.reshape(-1).view(np.uint32) != b.reshape(-1).view(np.uint32))
    if diff.size == 0:
        return None
    z, y, x, c = np.unravel_index(int(diff[0]), a.shape)
    return (f"voxel (z={z}, y={y}, x={x}) channel {c}: "
            f"{a[z, y, x, c]!r} != {b[z, y, x, c]!r} ({diff.size} elements differ)")


def check_case(case: Case, graph: Optional[IndexGraph] = None) -> CaseResult:
    g = graph if graph is not None else build_index_graph(case.grid, case.cams, case.binning)
    with_depth = case.depth is not None
    decomposed = transform(case.features, case.depth, g, case.grid)
    cfg = MonolithicConfig(case.grid, case.cams, case.binning, depth_mode=with_depth)
    monolithic = transform_monolithic(cfg, case.features, case.depth)
    inputs = {"features": case.features}
    if with_depth:
        inputs["depth"] = case.depth
    interpreted = interpret(lower(g, case.grid, with_depth=with_depth), inputs)
    for name, other in (("monolithic", monolithic), ("opgraph", interpreted)):
        diff = first_difference(decomposed, other)
        if diff is not None:
            return CaseResult(case, f"decomposed vs {name}: {diff}")
    return CaseResult(case)


def run_suite(seed: int = 0, cases: int = 20, cams: Optional[Sequence[CameraModel]] = None,
              on_result: Optional[Callable[[int, CaseResult], None]] = None) -> List[CaseResult]:
    rng = rng_for(seed, 7)
    results = []
    for i in range(cases):
        result = check_case(random_case(rng, cams))
        results.append(result)
        if on_result:
            on_result(i, result)
    return results
