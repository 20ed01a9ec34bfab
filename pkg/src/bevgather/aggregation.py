"""Gather -> depth-modulate -> reshape aggregation over a prebuilt index graph.

Both stacks keep their data in a padded flat buffer whose last element (row,
for features) is zero, so invalid voxels are served by the same gather as
valid ones.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .geometry import VoxelGrid
from .indexgraph import IndexGraph


class FeatureStack:
    """Per-camera feature maps ``[N_cam, H_img, W_img, C]``, float32."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"feature stack must be 4-D [N, H, W, C], got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"feature stack has an empty axis: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature stack contains non-finite values")
        n, h, w, c = data.shape
        padded = np.zeros((n * h * w + 1, c), dtype=np.float32)
        padded[:-1] = data.reshape(-1, c)
        padded.setflags(write=False)
        self._padded = padded
        self._shape = (n, h, w, c)

    @property
    def padded(self) -> np.ndarray:
        """Read-only ``[N*H*W + 1, C]`` buffer; the last row is zero."""
        return self._padded

    @property
    def data(self) -> np.ndarray:
        return self._padded[:-1].reshape(self._shape)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self._shape

    @property
    def channels(self) -> int:
        return self._shape[3]

    def __repr__(self):
        return f"FeatureStack(shape={self._shape})"


class DepthStack:
    """Per-pixel depth-bin probabilities ``[N_cam, D, H_img, W_img]``, float32."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"depth stack must be 4-D [N, D, H, W], got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"depth stack has an empty axis: {data.shape}")
        if not np.all((data >= 0) & (data <= 1)):
            raise ValueError("depth probabilities must lie in [0, 1]")
        padded = np.zeros(data.size + 1, dtype=np.float32)
        padded[:-1] = data.reshape(-1)
        padded.setflags(write=False)
        self._padded = padded
        self._shape = data.shape

    @property
    def padded(self) -> np.ndarray:
        """Read-only flat buffer of ``N*D*H*W + 1`` weights; the last one is zero."""
        return self._padded

    @property
    def data(self) -> np.ndarray:
        return self._padded[:-1].reshape(self._shape)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self._shape

    def __repr__(self):
        return f"DepthStack(shape={self._shape})"


def check_features(stack: FeatureStack, g: IndexGraph) -> None:
    n, h, w, _ = stack.shape
    if (n, (h, w)) != (g.num_cams, g.image_shape):
        raise ConfigurationError(
            f"feature stack {stack.shape} does not match the index graph rig "
            f"({g.num_cams} cameras, image {g.image_shape})"
        )


def check_depth(stack: DepthStack, g: IndexGraph) -> None:
    n, d, h, w = stack.shape
    if (n, d, (h, w)) != (g.num_cams, g.num_bins, g.image_shape):
        raise ConfigurationError(
            f"depth stack {stack.shape} does not match the index graph rig "
            f"({g.num_cams} cameras, {g.num_bins} bins, image {g.image_shape})"
        )


def gather_features(stack: FeatureStack, g: IndexGraph) -> np.ndarray:
    """Row ``i`` of the result is the feature vector sampled for voxel ``i``."""
    check_features(stack, g)
    return np.take(stack.padded, g.spatial_index, axis=0)


def gather_depth_weights(stack: DepthStack, g: IndexGraph) -> np.ndarray:
    """``[num_voxels, 1]`` depth weights; 0 for voxels no camera sees."""
    check_depth(stack, g)
    return np.take(stack.padded, g.depth_index).reshape(-1, 1)


def modulate(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or weights.shape != (features.shape[0], 1):
        raise ValueError(
            f"cannot modulate features {features.shape} with weights {weights.shape}"
        )
    return features * weights


def _dims(grid) -> Tuple[int, int, int]:
    if isinstance(grid, VoxelGrid):
        return grid.dims
    dims = tuple(int(d) for d in grid)
    if len(dims) != 3:
        raise ValueError(f"expected (Z, H, W), got {grid!r}")
    return dims


def place(flat: np.ndarray, grid: Union[VoxelGrid, Tuple[int, int, int]]) -> np.ndarray:
    """Reinterpret the voxel-ordered ``[num_voxels, C]`` buffer as ``[Z, H, W, C]``.

    The result is a view of ``flat``; nothing is copied or reordered.
    """
    z, h, w = _dims(grid)
    if flat.ndim != 2 or flat.shape[0] != z * h * w:
        raise ValueError(f"flat buffer {flat.shape} does not hold {z}x{h}x{w} voxels")
    if not flat.flags.c_contiguous:
        raise ValueError("flat buffer must be C-contiguous to reshape without copying")
    return flat.reshape(z, h, w, flat.shape[1])


def transform(features: FeatureStack, depth: Optional[DepthStack], g: IndexGraph,
              grid: Union[VoxelGrid, Tuple[int, int, int], None] = None,
              threads: int = 1) -> np.ndarray:
    """Full decomposed transform; returns the ``[Z, H, W, C]`` volume.

    With ``threads > 1`` the voxel range is split into contiguous blocks that
    are gathered and modulated into disjoint slices of one output buffer.
    """
    check_features(features, g)
    if depth is not None:
        check_depth(depth, g)
    dims = g.dims if grid is None else _dims(grid)
    if dims != g.dims:
        raise ConfigurationError(f"grid dims {dims} do not match the index graph {g.dims}")

    if threads <= 1:
        flat = gather_features(features, g)
        if depth is not None:
            np.multiply(flat, gather_depth_weights(depth, g), out=flat)
        return place(flat, dims)

    n = g.num_voxels
    flat = np.empty((n, features.channels), dtype=np.float32)
    step = -(-n // threads)

    def work(start):
        stop = min(start + step, n)
        block = flat[start:stop]
        np.take(features.padded, g.spatial_index[start:stop], axis=0, out=block)
        if depth is not None:
            weights = np.take(depth.padded, g.depth_index[start:stop]).reshape(-1, 1)
            np.multiply(block, weights, out=block)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, range(0, n, step)))
    return place(flat, dims)
