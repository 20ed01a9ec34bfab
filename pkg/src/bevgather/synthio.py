"""Synthetic rigs and stacks, plus calibration and tensor file I/O.

Randomness comes from numpy's ``Generator(PCG64(...))``, seeded explicitly;
its output stream is stable across platforms and numpy releases, so every
generator here is reproducible from its seed.

Coordinate-encoded feature stacks hold, at ``(cam, v, u, c)``, the value
``float32((((cam * H + v) * W + u) * C + c) mod 2**24)``. Every such value
is an exactly representable integer, so a gathered row can be checked
against the closed form without tolerance.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .aggregation import DepthStack, FeatureStack
from .errors import CalibrationError, FormatError
from .geometry import RIGID_TOL, CameraModel, DepthBinning, rigid_error, rigid_inverse

CALIBRATION_TOL = RIGID_TOL
ENCODE_MODULUS = 1 << 24

TENSOR_MAGIC = b"FBTN"
TENSOR_VERSION = 1
_TENSOR_HEAD = struct.Struct("<4sHB")


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([int(seed), int(stream)]))


# ---------------------------------------------------------------- rigs

def rotation_matrix(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Ego-to-camera rotation for a camera looking along ``yaw`` (radians, about +z).

    Positive ``pitch`` tilts the optical axis down; ``roll`` spins the image
    about the optical axis. Rows are the camera's right, down and forward
    axes expressed in the ego frame.
    """
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right0 = np.array([sy, -cy, 0.0])
    down0 = np.cross(forward, right0)
    cr, sr = math.cos(roll), math.sin(roll)
    right = cr * right0 + sr * down0
    down = -sr * right0 + cr * down0
    return np.stack([right, down, forward])


def axis_angle(vec: np.ndarray) -> np.ndarray:
    """Rotation matrix for rotation vector ``vec`` (Rodrigues)."""
    theta = float(np.linalg.norm(vec))
    if theta == 0.0:
        return np.eye(3)
    k = vec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def make_extrinsic(rotation: np.ndarray, center: Sequence[float]) -> np.ndarray:
    """Ego-to-camera transform for a camera at ego-frame position ``center``."""
    out = np.eye(4)
    out[:3, :3] = rotation
    c = np.asarray(center, dtype=np.float64)
    for i in range(3):
        out[i, 3] = -(rotation[i, 0] * c[0] + rotation[i, 1] * c[1] + rotation[i, 2] * c[2])
    return out


def pinhole(width: int, height: int, hfov_deg: float) -> np.ndarray:
    f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    return np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])


PRESETS = {
    # yaw angles in degrees, cameras at the ego origin
    "ring6": (0.0, 60.0, 120.0, 180.0, 240.0, 300.0),
    "front": (0.0,),
}


@dataclass(frozen=True)
class RigSpec:
    """Recipe for a camera rig.

    ``preset`` names a layout in :data:`PRESETS`, or is ``None`` to use the
    explicit ``cameras``. A non-``None`` ``seed`` jitters every camera's
    orientation and position by small Gaussian perturbations.
    """

    preset: Optional[str] = "ring6"
    cameras: Optional[Tuple[CameraModel, ...]] = None
    image: Tuple[int, int] = (96, 64)
    hfov_deg: float = 70.0
    seed: Optional[int] = None
    rot_jitter_deg: float = 0.5
    trans_jitter: float = 0.05


def make_rig(spec: RigSpec = RigSpec()) -> List[CameraModel]:
    if spec.preset is None:
        if not spec.cameras:
            raise ValueError("RigSpec needs a preset or an explicit camera list")
        base = list(spec.cameras)
    else:
        if spec.preset not in PRESETS:
            raise ValueError(f"unknown rig preset {spec.preset!r}; choose from {sorted(PRESETS)}")
        width, height = spec.image
        k = pinhole(width, height, spec.hfov_deg)
        base = [
            CameraModel(i, k, make_extrinsic(rotation_matrix(math.radians(yaw)), (0.0, 0.0, 0.0)),
                        width, height)
            for i, yaw in enumerate(PRESETS[spec.preset])
        ]
    if spec.seed is None:
        return base
    rng = rng_for(spec.seed)
    out = []
    for cam in base:
        rot = cam.extrinsic[:3, :3]
        center = rigid_inverse(cam.extrinsic)[:3, 3]
        jitter = axis_angle(rng.normal(0.0, math.radians(spec.rot_jitter_deg), 3))
        center = center + rng.normal(0.0, spec.trans_jitter, 3)
        out.append(CameraModel(cam.cam_id, cam.intrinsics, make_extrinsic(jitter @ rot, center),
                               cam.width, cam.height))
    return out


def random_rig(rng: np.random.Generator, num_cams: int, image: Tuple[int, int]) -> List[CameraModel]:
    """Cameras with random heading, mild tilt and roll, and offsets around the origin."""
    width, height = image
    cams = []
    base_yaw = rng.uniform(0, 2 * math.pi)
    for i in range(num_cams):
        yaw = base_yaw + 2 * math.pi * i / num_cams + rng.normal(0, 0.2)
        rot = rotation_matrix(yaw, rng.uniform(-0.15, 0.15), rng.uniform(-0.05, 0.05))
        center = (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 2.0))
        k = pinhole(width, height, rng.uniform(50, 110))
        cams.append(CameraModel(i, k, make_extrinsic(rot, center), width, height))
    return cams


# ---------------------------------------------------------------- stacks

@dataclass(frozen=True)
class StackSpec:
    """Recipe for a feature/depth stack pair.

    ``features``: ``"constant"`` (every value ``value``), ``"coord"``
    (coordinate-encoded, see module docstring) or ``"random"`` (uniform in
    [-1, 1)). ``depth``: ``"ones"``, ``"zeros"``, ``"softmax"`` (random
    logits normalized over bins) or ``"delta"`` (1 at bin ``delta_bin``).
    """

    features: str = "random"
    depth: str = "softmax"
    channels: int = 32
    value: float = 1.0
    delta_bin: int = 0
    seed: int = 0


def coordinate_value(cam, u, v, c, shape: Tuple[int, int, int, int]):
    """Closed-form value of a coordinate-encoded stack of ``shape`` [N, H, W, C]."""
    _, h, w, ch = shape
    code = (((np.asarray(cam, dtype=np.int64) * h + v) * w + u) * ch + c) % ENCODE_MODULUS
    return np.asarray(code, dtype=np.float32)


def make_features(spec: StackSpec, num_cams: int, image_shape: Tuple[int, int]) -> FeatureStack:
    h, w = image_shape
    shape = (num_cams, h, w, spec.channels)
    if spec.features == "constant":
        data = np.full(shape, spec.value, dtype=np.float32)
    elif spec.features == "coord":
        n, y, x, c = np.indices(shape, sparse=True)
        data = coordinate_value(n, x, y, c, shape)
    elif spec.features == "random":
        data = rng_for(spec.seed, 0).uniform(-1.0, 1.0, shape).astype(np.float32)
    else:
        raise ValueError(f"unknown feature generator {spec.features!r}")
    return FeatureStack(data)


def make_depth(spec: StackSpec, num_cams: int, num_bins: int, image_shape: Tuple[int, int]) -> DepthStack:
    h, w = image_shape
    shape = (num_cams, num_bins, h, w)
    if spec.depth == "ones":
        data = np.ones(shape, dtype=np.float32)
    elif spec.depth == "zeros":
        data = np.zeros(shape, dtype=np.float32)
    elif spec.depth == "softmax":
        logits = rng_for(spec.seed, 1).normal(0.0, 2.0, shape)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        data = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    elif spec.depth == "delta":
        if not 0 <= spec.delta_bin < num_bins:
            raise ValueError(f"delta_bin {spec.delta_bin} outside [0, {num_bins})")
        data = np.zeros(shape, dtype=np.float32)
        data[:, spec.delta_bin] = 1.0
    else:
        raise ValueError(f"unknown depth generator {spec.depth!r}")
    return DepthStack(data)


def make_stacks(spec: StackSpec, rig: Sequence[CameraModel],
                binning: DepthBinning) -> Tuple[FeatureStack, DepthStack]:
    image_shape = rig[0].image_shape
    return (make_features(spec, len(rig), image_shape),
            make_depth(spec, len(rig), binning.num_bins, image_shape))


# ---------------------------------------------------------------- calibration

def _matrix(values, shape, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != shape[0] * shape[1]:
        raise CalibrationError(f"{what} needs {shape[0] * shape[1]} numbers, got {arr.size}")
    return arr.reshape(shape)


def camera_from_dict(entry: dict) -> CameraModel:
    try:
        direction = entry.get("direction", "ego_to_cam")
        k = _matrix(entry["intrinsics"], (3, 3), "intrinsics")
        t = _matrix(entry["extrinsic"], (4, 4), "extrinsic")
        if direction not in ("ego_to_cam", "cam_to_ego"):
            raise CalibrationError(f"unknown extrinsic direction {direction!r}")
        ortho, det = rigid_error(t)
        if not (ortho < CALIBRATION_TOL and det <= CALIBRATION_TOL):
            raise CalibrationError(
                f"camera {entry.get('cam_id')}: rotation is not orthonormal with det +1 "
                f"(|R^T R - I| = {ortho:.3g}, |det - 1| = {det:.3g})"
            )
        if direction == "cam_to_ego":
            t = rigid_inverse(t)
        return CameraModel(entry["cam_id"], k, t, entry["width"], entry["height"])
    except KeyError as exc:
        raise CalibrationError(f"calibration entry is missing {exc}") from None
    except CalibrationError:
        raise
    except (TypeError, ValueError) as exc:
        raise CalibrationError(str(exc)) from None


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "cam_id": cam.cam_id,
        "intrinsics": cam.intrinsics.reshape(-1).tolist(),
        "extrinsic": cam.extrinsic.reshape(-1).tolist(),
        "direction": "ego_to_cam",
        "width": cam.width,
        "height": cam.height,
    }


def dumps_calibration(cams: Sequence[CameraModel]) -> str:
    return json.dumps({"cameras": [camera_to_dict(c) for c in cams]}, indent=2)


def loads_calibration(text: str) -> List[CameraModel]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"calibration is not valid JSON: {exc}") from None
    entries = doc["cameras"] if isinstance(doc, dict) and "cameras" in doc else doc
    if not isinstance(entries, list) or not entries:
        raise CalibrationError("calibration must list at least one camera")
    return [camera_from_dict(e) for e in entries]


def save_calibration(path, cams: Sequence[CameraModel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_calibration(cams))
        fh.write("\n")


def load_calibration(path) -> List[CameraModel]:
    with open(path, encoding="utf-8") as fh:
        return loads_calibration(fh.read())


# ---------------------------------------------------------------- tensors

def encode_tensor(array) -> bytes:
    if isinstance(array, (FeatureStack, DepthStack)):
        array = array.data
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        raise ValueError(f"FBTN stores float32 only, got {arr.dtype}")
    if arr.ndim > 0xFF:
        raise ValueError("tensor rank exceeds 255")
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < _TENSOR_HEAD.size:
        raise FormatError("truncated FBTN header")
    magic, version, rank = _TENSOR_HEAD.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported FBTN version {version}")
    offset = _TENSOR_HEAD.size + 4 * rank
    if len(data) < offset:
        raise FormatError("truncated FBTN dims")
    dims = struct.unpack_from(f"<{rank}I", data, _TENSOR_HEAD.size)
    count = math.prod(dims)
    if len(data) - offset != 4 * count:
        raise FormatError(f"FBTN header declares {dims} ({4 * count} bytes) but the payload "
                          f"has {len(data) - offset} bytes")
    arr = np.frombuffer(data, dtype="<f4", offset=offset, count=count)
    return arr.astype(np.float32).reshape(dims)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
