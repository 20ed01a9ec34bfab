"""Dense voxel-ordered index graph: the precomputed voxel -> (camera, pixel, bin) map.

Entry ``i`` always describes voxel ``i``. Each voxel takes its sample from the
first camera in rig order whose projection is valid; voxels seen by no camera
point at the zero padding slot one past the end of each stack.

Offsets into the stacks:

* features ``[N, H_img, W_img, C]``: ``(cam * H_img + v) * W_img + u``,
  padding slot ``N * H_img * W_img``
* depth ``[N, D, H_img, W_img]``: ``((cam * D + bin) * H_img + v) * W_img + u``,
  padding slot ``N * D * H_img * W_img``

``cam`` is the camera's position in the rig list (its stack slot).
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, FingerprintError, FormatError
from .geometry import CameraModel, DepthBinning, PixelHit, VoxelGrid, project_points

MAGIC = b"FBLT"
VERSION = 1
_HEADER = struct.Struct("<4sH7IQ")
RECORD_DTYPE = np.dtype([
    ("valid", "u1"),
    ("spatial", "<u4"),
    ("depth", "<u4"),
    ("cam", "u1"),
    ("u", "<u2"),
    ("v", "<u2"),
    ("bin", "<u2"),
])
DEFAULT_CHUNK = 1 << 16


def rig_fingerprint(grid: VoxelGrid, cams: Sequence[CameraModel], binning: DepthBinning) -> int:
    """64-bit hash of a canonical little-endian encoding of grid, binning and cameras."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<3d3d3I", *grid.origin, *grid.voxel_size, *grid.dims))
    h.update(struct.pack("<2dI", binning.d_min, binning.d_max, binning.num_bins))
    h.update(struct.pack("<I", len(cams)))
    for cam in cams:
        h.update(struct.pack("<3I", cam.cam_id, cam.width, cam.height))
        h.update(cam.intrinsics.astype("<f8").tobytes())
        h.update(cam.extrinsic.astype("<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class IndexGraph:
    dims: Tuple[int, int, int]
    num_cams: int
    image_shape: Tuple[int, int]
    num_bins: int
    fingerprint: int
    valid: np.ndarray
    cam: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth_bin: np.ndarray
    spatial_index: np.ndarray
    depth_index: np.ndarray

    def __post_init__(self):
        for name in ("valid", "cam", "u", "v", "depth_bin", "spatial_index", "depth_index"):
            arr = getattr(self, name)
            if arr.shape != (self.num_voxels,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({self.num_voxels},)")
            object.__setattr__(self, name, _readonly(arr))

    @property
    def num_voxels(self) -> int:
        z, h, w = self.dims
        return z * h * w

    @property
    def spatial_pad(self) -> int:
        """Offset of the zero row appended to the feature stack."""
        h, w = self.image_shape
        return self.num_cams * h * w

    @property
    def depth_pad(self) -> int:
        h, w = self.image_shape
        return self.num_cams * self.num_bins * h * w

    def entry(self, i: int) -> Optional[PixelHit]:
        if not self.valid[i]:
            return None
        return PixelHit(int(self.cam[i]), int(self.u[i]), int(self.v[i]), int(self.depth_bin[i]))

    def __eq__(self, other):
        if not isinstance(other, IndexGraph):
            return NotImplemented
        header = ("dims", "num_cams", "image_shape", "num_bins", "fingerprint")
        arrays = ("valid", "cam", "u", "v", "depth_bin", "spatial_index", "depth_index")
        return all(getattr(self, k) == getattr(other, k) for k in header) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays
        )

    __hash__ = None


def check_rig(cams: Sequence[CameraModel]) -> Tuple[int, int]:
    """Validate a camera list for stacking; return the shared ``(height, width)``."""
    if len(cams) == 0:
        raise ValueError("at least one camera is required")
    shapes = {cam.image_shape for cam in cams}
    if len(shapes) != 1:
        raise ConfigurationError(f"all cameras must share one image extent, got {sorted(shapes)}")
    return shapes.pop()


def first_hits(grid: VoxelGrid, cams: Sequence[CameraModel], binning: DepthBinning,
               start: int, stop: int):
    """Resolve voxels ``[start, stop)`` to their first valid camera.

    Returns ``(cam, u, v, depth_bin)`` arrays with ``cam == -1`` for voxels no
    camera sees. Every call recomputes the projections.
    """
    points = grid.centers(start, stop)
    n = stop - start
    cam = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n, dtype=np.int64)
    v = np.zeros(n, dtype=np.int64)
    depth_bin = np.zeros(n, dtype=np.int64)
    pending = np.arange(n)
    for slot, camera in enumerate(cams):
        if pending.size == 0:
            break
        proj = project_points(camera, binning, points[pending])
        hit = pending[proj.valid]
        cam[hit] = slot
        u[hit] = proj.u[proj.valid]
        v[hit] = proj.v[proj.valid]
        depth_bin[hit] = proj.depth_bin[proj.valid]
        pending = pending[~proj.valid]
    return cam, u, v, depth_bin


def _chunks(total: int, size: int):
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def build_index_graph(grid: VoxelGrid, cams: Sequence[CameraModel], binning: DepthBinning,
                      threads: int = 1, chunk: int = DEFAULT_CHUNK) -> IndexGraph:
    """Build the dense index graph for ``grid`` seen by ``cams``.

    Voxels are processed in independent chunks, optionally on a thread pool;
    the result does not depend on ``threads`` or ``chunk``.
    """
    img_h, img_w = check_rig(cams)
    n_vox = grid.num_voxels
    n_cam = len(cams)
    n_bins = binning.num_bins
    cam = np.empty(n_vox, dtype=np.int64)
    u = np.empty(n_vox, dtype=np.int64)
    v = np.empty(n_vox, dtype=np.int64)
    depth_bin = np.empty(n_vox, dtype=np.int64)

    def work(bounds):
        s, e = bounds
        cam[s:e], u[s:e], v[s:e], depth_bin[s:e] = first_hits(grid, cams, binning, s, e)

    ranges = _chunks(n_vox, max(1, int(chunk)))
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for bounds in ranges:
            work(bounds)

    valid = cam >= 0
    slot = np.where(valid, cam, 0)
    spatial = np.where(valid, (slot * img_h + v) * img_w + u, n_cam * img_h * img_w)
    depth = np.where(valid, ((slot * n_bins + depth_bin) * img_h + v) * img_w + u,
                     n_cam * n_bins * img_h * img_w)
    return IndexGraph(
        dims=grid.dims,
        num_cams=n_cam,
        image_shape=(img_h, img_w),
        num_bins=n_bins,
        fingerprint=rig_fingerprint(grid, cams, binning),
        valid=valid,
        cam=slot,
        u=u,
        v=v,
        depth_bin=depth_bin,
        spatial_index=spatial,
        depth_index=depth,
    )


@dataclass(frozen=True)
class CoverageStats:
    valid_count: int
    per_camera_counts: Tuple[int, ...]


def coverage_stats(g: IndexGraph) -> CoverageStats:
    counts = np.bincount(g.cam[g.valid], minlength=g.num_cams)
    return CoverageStats(int(np.count_nonzero(g.valid)), tuple(int(c) for c in counts))


def serialize_index_graph(g: IndexGraph) -> bytes:
    if g.num_cams > 0xFF or max(g.image_shape) > 0xFFFF or g.num_bins > 0xFFFF:
        raise FormatError("rig too large for the FBLT field widths")
    if g.depth_pad > 0xFFFFFFFF:
        raise FormatError("stack offsets exceed 32 bits")
    z, h, w = g.dims
    img_h, img_w = g.image_shape
    header = _HEADER.pack(MAGIC, VERSION, z, h, w, g.num_cams, img_h, img_w,
                          g.num_bins, g.fingerprint)
    rec = np.zeros(g.num_voxels, dtype=RECORD_DTYPE)
    rec["valid"] = g.valid
    rec["spatial"] = g.spatial_index
    rec["depth"] = g.depth_index
    rec["cam"] = g.cam
    rec["u"] = g.u
    rec["v"] = g.v
    rec["bin"] = g.depth_bin
    return header + rec.tobytes()


def deserialize_index_graph(data: bytes, rig: Optional[Tuple[VoxelGrid, Sequence[CameraModel], DepthBinning]] = None,
                            strict: bool = True) -> IndexGraph:
    """Parse an FBLT byte stream.

    When ``rig`` is given as ``(grid, cams, binning)`` the stored fingerprint
    is checked against it: a mismatch raises :class:`FingerprintError` when
    ``strict``, otherwise it only warns.
    """
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated FBLT header ({len(data)} bytes)")
    magic, version, z, h, w, n_cam, img_h, img_w, n_bins, fingerprint = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported FBLT version {version}")
    if min(z, h, w, n_cam, img_h, img_w, n_bins) < 1:
        raise FormatError("FBLT header has a zero dimension")
    n_vox = z * h * w
    body = data[_HEADER.size:]
    if len(body) != n_vox * RECORD_DTYPE.itemsize:
        raise FormatError(
            f"FBLT body has {len(body)} bytes, expected {n_vox * RECORD_DTYPE.itemsize}"
        )
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    valid = rec["valid"].astype(bool)
    if np.any(rec["valid"] > 1):
        raise FormatError("validity flags must be 0 or 1")
    g = IndexGraph(
        dims=(z, h, w),
        num_cams=n_cam,
        image_shape=(img_h, img_w),
        num_bins=n_bins,
        fingerprint=fingerprint,
        valid=valid,
        cam=rec["cam"].astype(np.int64),
        u=rec["u"].astype(np.int64),
        v=rec["v"].astype(np.int64),
        depth_bin=rec["bin"].astype(np.int64),
        spatial_index=rec["spatial"].astype(np.int64),
        depth_index=rec["depth"].astype(np.int64),
    )
    _check_consistency(g)
    if rig is not None:
        expected = rig_fingerprint(*rig)
        if expected != fingerprint:
            msg = (f"index graph fingerprint {fingerprint:#018x} does not match the "
                   f"current rig ({expected:#018x}); rebuild the LUT")
            if strict:
                raise FingerprintError(msg)
            warnings.warn(msg, stacklevel=2)
    return g


def _check_consistency(g: IndexGraph):
    img_h, img_w = g.image_shape
    ok = g.valid
    if np.any(g.cam[ok] >= g.num_cams) or np.any(g.u[ok] >= img_w) or np.any(g.v[ok] >= img_h) \
            or np.any(g.depth_bin[ok] >= g.num_bins):
        raise FormatError("entry fields outside the rig extents")
    spatial = np.where(ok, (g.cam * img_h + g.v) * img_w + g.u, g.spatial_pad)
    depth = np.where(ok, ((g.cam * g.num_bins + g.depth_bin) * img_h + g.v) * img_w + g.u,
                     g.depth_pad)
    if not (np.array_equal(spatial, g.spatial_index) and np.array_equal(depth, g.depth_index)):
        raise FormatError("stored offsets disagree with the stored entries")


def save_index_graph(g: IndexGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_index_graph(g))


def load_index_graph(path, rig=None, strict: bool = True) -> IndexGraph:
    with open(path, "rb") as fh:
        return deserialize_index_graph(fh.read(), rig=rig, strict=strict)
