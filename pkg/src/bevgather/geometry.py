"""Camera models, voxel grids and forward projection of ego-frame points.

Conventions
-----------
Ego frame: meters, arbitrary right-handed frame (x forward, y left, z up for
the presets in :mod:`bevgather.synthio`).

Camera frame: x right, y down, z along the optical axis. ``extrinsic`` maps
ego-frame points into this frame.

Image frame: origin at the top-left corner, ``u`` = column, ``v`` = row.
A continuous coordinate ``u_f`` samples pixel ``floor(u_f)``.

The vectorized kernel :func:`project_points` is the single source of
projection arithmetic; the scalar :func:`project` goes through it, so the
two can never disagree bitwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

# Points with camera-frame depth at or below this are behind the camera.
EPSILON_Z = 1e-6
RIGID_TOL = 1e-5  # orthonormality and |det - 1| bound for extrinsic rotations


def _frozen_array(values, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def rigid_error(transform: np.ndarray) -> Tuple[float, float]:
    """Return ``(max |R^T R - I|, |det R - 1|)`` for a 4x4 rigid transform."""
    rot = transform[:3, :3]
    ortho = float(np.max(np.abs(rot.T @ rot - np.eye(3))))
    return ortho, abs(float(np.linalg.det(rot)) - 1.0)


def rigid_inverse(transform: np.ndarray) -> np.ndarray:
    """Invert a rigid 4x4 transform as ``[R^T, -R^T t]``."""
    rot = transform[:3, :3]
    t = transform[:3, 3]
    out = np.eye(4)
    out[:3, :3] = rot.T
    for i in range(3):
        out[i, 3] = -(rot[0, i] * t[0] + rot[1, i] * t[1] + rot[2, i] * t[2])
    return out


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with zero skew and an ego-to-camera rigid extrinsic."""

    cam_id: int
    intrinsics: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = _frozen_array(self.intrinsics, (3, 3), "intrinsics")
        t = _frozen_array(self.extrinsic, (4, 4), "extrinsic")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsic", t)
        if int(self.cam_id) != self.cam_id or self.cam_id < 0:
            raise ValueError(f"cam_id must be a non-negative integer, got {self.cam_id}")
        object.__setattr__(self, "cam_id", int(self.cam_id))
        for name in ("width", "height"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value}")
            object.__setattr__(self, name, int(value))
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if k[0, 1] != 0 or k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0 or k[2, 2] != 1:
            raise ValueError("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]")
        if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsic last row must be [0, 0, 0, 1]")
        ortho, det = rigid_error(t)
        if ortho >= RIGID_TOL or det > RIGID_TOL:
            raise ValueError(
                f"extrinsic rotation is not orthonormal (|R^T R - I| = {ortho:.3g}, "
                f"|det - 1| = {det:.3g})"
            )

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def image_shape(self) -> Tuple[int, int]:
        """``(height, width)`` in pixels."""
        return self.height, self.width

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            self.cam_id == other.cam_id
            and self.width == other.width
            and self.height == other.height
            and self.intrinsics.tobytes() == other.intrinsics.tobytes()
            and self.extrinsic.tobytes() == other.extrinsic.tobytes()
        )

    def __hash__(self):
        return hash((self.cam_id, self.width, self.height,
                     self.intrinsics.tobytes(), self.extrinsic.tobytes()))


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned voxel volume.

    ``dims`` is ``(Z, H, W)``: cell counts along z, y and x. Voxel ``(z, y, x)``
    has linear index ``z*H*W + y*W + x``, the row-major order of a
    ``[Z, H, W, C]`` volume.
    """

    origin: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]
    dims: Tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        size = tuple(float(v) for v in self.voxel_size)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(size) != 3 or len(dims) != 3:
            raise ValueError("origin, voxel_size and dims must each have 3 components")
        if not all(math.isfinite(v) for v in origin + size):
            raise ValueError("grid origin and voxel size must be finite")
        if min(size) <= 0:
            raise ValueError(f"voxel_size components must be > 0, got {size}")
        if min(dims) < 1:
            raise ValueError(f"dims must all be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "dims", dims)

    @property
    def num_voxels(self) -> int:
        z, h, w = self.dims
        return z * h * w

    def linear_index(self, z: int, y: int, x: int) -> int:
        self._check_index(z, y, x)
        _, h, w = self.dims
        return (z * h + y) * w + x

    def unravel(self, index: int) -> Tuple[int, int, int]:
        if not 0 <= index < self.num_voxels:
            raise ValueError(f"linear index {index} outside [0, {self.num_voxels})")
        _, h, w = self.dims
        return index // (h * w), (index // w) % h, index % w

    def _check_index(self, z, y, x):
        for name, value, limit in zip("zyx", (z, y, x), self.dims):
            if int(value) != value or not 0 <= value < limit:
                raise ValueError(f"voxel index {name}={value} outside [0, {limit})")

    def centers(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Voxel centers for linear indices ``[start, stop)`` as ``[n, 3]`` float64."""
        if stop is None:
            stop = self.num_voxels
        _, h, w = self.dims
        idx = np.arange(start, stop, dtype=np.int64)
        out = np.empty((idx.size, 3), dtype=np.float64)
        for axis, cell in enumerate((idx % w, (idx // w) % h, idx // (h * w))):
            out[:, axis] = self.origin[axis] + (cell + 0.5) * self.voxel_size[axis]
        return out


def voxel_center(grid: VoxelGrid, z: int, y: int, x: int) -> Tuple[float, float, float]:
    """Ego-frame center of voxel ``(z, y, x)``."""
    grid._check_index(z, y, x)
    ox, oy, oz = grid.origin
    sx, sy, sz = grid.voxel_size
    return ox + (x + 0.5) * sx, oy + (y + 0.5) * sy, oz + (z + 0.5) * sz


@dataclass(frozen=True)
class DepthBinning:
    """Uniform depth bins; bin ``k`` covers ``[d_min + k*w, d_min + (k+1)*w)``."""

    d_min: float
    d_max: float
    num_bins: int

    def __post_init__(self):
        object.__setattr__(self, "d_min", float(self.d_min))
        object.__setattr__(self, "d_max", float(self.d_max))
        if int(self.num_bins) != self.num_bins or self.num_bins < 1:
            raise ValueError(f"num_bins must be an integer >= 1, got {self.num_bins}")
        object.__setattr__(self, "num_bins", int(self.num_bins))
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise ValueError("depth range must be finite")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max})")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.num_bins


@dataclass(frozen=True)
class PixelHit:
    cam_id: int
    u: int
    v: int
    depth_bin: int
    cam_depth: Optional[float] = None


class Projection(NamedTuple):
    """Per-point projection result; ``u``, ``v`` and ``depth_bin`` are 0 where invalid."""

    valid: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth_bin: np.ndarray
    cam_depth: np.ndarray


def to_camera_frame(cam: CameraModel, points: np.ndarray):
    """Return camera-frame ``(X, Y, Zc)`` arrays for ego-frame ``points[..., 3]``."""
    t = cam.extrinsic
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return tuple(t[i, 0] * x + t[i, 1] * y + t[i, 2] * z + t[i, 3] for i in range(3))


def image_coords(cam: CameraModel, x, y, zc):
    """Continuous pixel coordinates ``(u_f, v_f)`` of camera-frame points."""
    k = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u_f = k[0, 0] * x / zc + k[0, 2]
        v_f = k[1, 1] * y / zc + k[1, 2]
    return u_f, v_f


def project_points(cam: CameraModel, binning: DepthBinning, points: np.ndarray) -> Projection:
    """Vectorized projection of ego-frame ``points[..., 3]`` through one camera.

    A point is valid when it lies in front of the camera, lands inside the
    image, and its camera-frame depth falls in ``[d_min, d_max)``.
    """
    points = np.asarray(points, dtype=np.float64)
    x, y, zc = to_camera_frame(cam, points)
    u_f, v_f = image_coords(cam, x, y, zc)
    u_fl = np.floor(u_f)
    v_fl = np.floor(v_f)
    valid = (
        (zc > EPSILON_Z)
        & (u_fl >= 0) & (u_fl < cam.width)
        & (v_fl >= 0) & (v_fl < cam.height)
        & (zc >= binning.d_min) & (zc < binning.d_max)
    )
    # floor((Zc - d_min) / w) can round up to D just below d_max
    b_fl = np.minimum(np.floor((zc - binning.d_min) / binning.bin_width), binning.num_bins - 1)
    u = np.where(valid, u_fl, 0).astype(np.int64)
    v = np.where(valid, v_fl, 0).astype(np.int64)
    depth_bin = np.where(valid, b_fl, 0).astype(np.int64)
    return Projection(valid, u, v, depth_bin, zc)


def project(cam: CameraModel, binning: DepthBinning, p_ego: Sequence[float]) -> Optional[PixelHit]:
    """Project one ego-frame point; ``None`` when it misses the camera's frustum."""
    point = np.asarray(p_ego, dtype=np.float64)
    if point.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {point.shape}")
    if not np.all(np.isfinite(point)):
        raise ValueError(f"non-finite point {p_ego!r}")
    proj = project_points(cam, binning, point[None, :])
    if not proj.valid[0]:
        return None
    return PixelHit(
        cam_id=cam.cam_id,
        u=int(proj.u[0]),
        v=int(proj.v[0]),
        depth_bin=int(proj.depth_bin[0]),
        cam_depth=float(proj.cam_depth[0]),
    )
