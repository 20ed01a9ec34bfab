"""Monolithic reference transform: projection, selection and lookup fused per call.

No index graph is kept; every call re-projects every voxel center through the
cameras. It shares :func:`~bevgather.geometry.project_points` with the
decomposed path so comparisons isolate the pipeline restructuring.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .aggregation import DepthStack, FeatureStack
from .errors import ConfigurationError
from .geometry import CameraModel, DepthBinning, VoxelGrid, project_points
from .indexgraph import check_rig

_CHUNK = 1 << 16


@dataclass(frozen=True)
class MonolithicConfig:
    grid: VoxelGrid
    cams: Sequence[CameraModel]
    binning: DepthBinning
    depth_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cams", tuple(self.cams))
        check_rig(self.cams)


def _check_inputs(cfg: MonolithicConfig, stack: FeatureStack, depth: Optional[DepthStack]):
    img_h, img_w = cfg.cams[0].image_shape
    n = len(cfg.cams)
    if stack.shape[:3] != (n, img_h, img_w):
        raise ConfigurationError(f"feature stack {stack.shape} does not match {n} cameras "
                                 f"of {img_w}x{img_h} pixels")
    if cfg.depth_mode:
        if depth is None:
            raise ConfigurationError("depth_mode is on but no depth stack was given")
        if depth.shape != (n, cfg.binning.num_bins, img_h, img_w):
            raise ConfigurationError(f"depth stack {depth.shape} does not match the rig")


def _fill(cfg: MonolithicConfig, features: np.ndarray, weights: Optional[np.ndarray],
          out: np.ndarray, start: int, stop: int):
    points = cfg.grid.centers(start, stop)
    taken = np.zeros(stop - start, dtype=bool)
    for k, cam in enumerate(cfg.cams):
        proj = project_points(cam, cfg.binning, points)
        fresh = proj.valid & ~taken
        if not fresh.any():
            continue
        taken |= fresh
        u, v = proj.u[fresh], proj.v[fresh]
        rows = features[k, v, u]
        if weights is not None:
            rows = rows * weights[k, proj.depth_bin[fresh], v, u][:, None]
        out[start:stop][fresh] = rows


def transform_monolithic(cfg: MonolithicConfig, stack: FeatureStack,
                         depth: Optional[DepthStack] = None, threads: int = 1) -> np.ndarray:
    """Return the ``[Z, H, W, C]`` volume computed directly from the camera rig."""
    _check_inputs(cfg, stack, depth)
    weights = depth.data if cfg.depth_mode else None
    n = cfg.grid.num_voxels
    out = np.zeros((n, stack.channels), dtype=np.float32)
    features = stack.data
    if threads > 1:
        step = -(-n // threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda s: _fill(cfg, features, weights, out, s, min(s + step, n)),
                          range(0, n, step)))
    else:
        for s in range(0, n, _CHUNK):
            _fill(cfg, features, weights, out, s, min(s + _CHUNK, n))
    return out.reshape(*cfg.grid.dims, stack.channels)
