import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevgather.errors import ConfigurationError, FingerprintError, FormatError
from bevgather.geometry import CameraModel, DepthBinning, PixelHit, VoxelGrid
from bevgather.indexgraph import (build_index_graph, coverage_stats, deserialize_index_graph,
                                  rig_fingerprint, serialize_index_graph)
from bevgather.synthio import RigSpec, make_rig, random_rig, rng_for
from bruteforce import bf_index
from conftest import RING_BINNING, RING_GRID, toy_camera

BINNING = DepthBinning(1.0, 61.0, 60)
# In front of the identity toy camera and inside its 640x480 image.
FRONT_GRID = VoxelGrid((-2.0, -1.5, 10.0), (0.5, 0.5, 1.0), (3, 6, 8))
BEHIND_GRID = VoxelGrid((-5.0, -5.0, -20.0), (1.0, 1.0, 1.0), (4, 10, 10))


def test_grid_behind_camera_is_all_invalid():
    g = build_index_graph(BEHIND_GRID, [toy_camera()], BINNING)
    assert not g.valid.any()
    assert np.all(g.spatial_index == 640 * 480)
    assert np.all(g.depth_index == 60 * 640 * 480)
    assert coverage_stats(g).valid_count == 0
    assert coverage_stats(g).per_camera_counts == (0,)


def test_full_frustum_toy_grid_is_fully_covered():
    g = build_index_graph(FRONT_GRID, [toy_camera()], BINNING)
    stats = coverage_stats(g)
    assert stats.valid_count == FRONT_GRID.num_voxels
    assert stats.per_camera_counts == (FRONT_GRID.num_voxels,)


def test_duplicate_camera_never_wins(ring_rig):
    front = ring_rig[0]
    twin = CameraModel(1, front.intrinsics, front.extrinsic, front.width, front.height)
    single = build_index_graph(RING_GRID, [front], BINNING)
    double = build_index_graph(RING_GRID, [front, twin], BINNING)
    assert single.valid.any()
    for name in ("valid", "cam", "u", "v", "depth_bin"):
        assert np.array_equal(getattr(single, name), getattr(double, name))
    assert np.all(double.cam[double.valid] == 0)
    ok = single.valid
    assert np.array_equal(single.spatial_index[ok], double.spatial_index[ok])
    assert np.array_equal(single.depth_index[ok], double.depth_index[ok])


def test_ring_rig_matches_bruteforce(ring_rig, ring_graph):
    expected = bf_index(RING_GRID, ring_rig, RING_BINNING)
    got = [None if not ring_graph.valid[i] else
           (int(ring_graph.cam[i]), int(ring_graph.u[i]), int(ring_graph.v[i]), int(ring_graph.depth_bin[i]))
           for i in range(ring_graph.num_voxels)]
    assert got == expected
    counts = [0] * len(ring_rig)
    for hit in expected:
        if hit is not None:
            counts[hit[0]] += 1
    stats = coverage_stats(ring_graph)
    assert stats.valid_count == sum(counts) > 0
    assert stats.per_camera_counts == tuple(counts)
    assert all(c > 0 for c in counts)


def test_offsets_follow_documented_layout(ring_graph):
    h, w = ring_graph.image_shape
    d = ring_graph.num_bins
    for i in np.flatnonzero(ring_graph.valid)[::97]:
        hit = ring_graph.entry(int(i))
        assert isinstance(hit, PixelHit)
        assert ring_graph.spatial_index[i] == (hit.cam_id * h + hit.v) * w + hit.u
        assert ring_graph.depth_index[i] == ((hit.cam_id * d + hit.depth_bin) * h + hit.v) * w + hit.u
    assert ring_graph.entry(int(np.flatnonzero(~ring_graph.valid)[0])) is None


def test_build_is_independent_of_threads_and_chunking(ring_rig, ring_graph):
    reference = serialize_index_graph(ring_graph)
    for threads, chunk in [(1, 1), (4, 7), (3, 1000), (8, 1 << 20)]:
        g = build_index_graph(RING_GRID, ring_rig, RING_BINNING, threads=threads, chunk=chunk)
        assert serialize_index_graph(g) == reference


def test_camera_order_is_semantic(ring_rig, ring_graph):
    reordered = build_index_graph(RING_GRID, ring_rig[::-1], RING_BINNING)
    # same union coverage, different winners where frusta overlap
    assert np.array_equal(reordered.valid, ring_graph.valid)
    assert not np.array_equal(reordered.spatial_index, ring_graph.spatial_index)
    assert reordered.fingerprint != ring_graph.fingerprint


def test_construction_errors():
    with pytest.raises(ValueError):
        build_index_graph(FRONT_GRID, [], BINNING)
    with pytest.raises(ConfigurationError):
        build_index_graph(FRONT_GRID, [toy_camera(0), toy_camera(1, width=320)], BINNING)


def test_serialization_roundtrip(ring_rig, ring_graph):
    blob = serialize_index_graph(ring_graph)
    assert len(blob) == 4 + 2 + 7 * 4 + 8 + 16 * ring_graph.num_voxels
    back = deserialize_index_graph(blob, rig=(RING_GRID, ring_rig, RING_BINNING))
    assert back == ring_graph
    assert serialize_index_graph(back) == blob


def test_corrupt_magic_is_rejected(ring_graph):
    blob = bytearray(serialize_index_graph(ring_graph))
    blob[0:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        deserialize_index_graph(bytes(blob))


def test_bad_version_and_truncation_are_rejected(ring_graph):
    blob = serialize_index_graph(ring_graph)
    with pytest.raises(FormatError):
        deserialize_index_graph(blob[:-1])
    with pytest.raises(FormatError):
        deserialize_index_graph(blob[:10])
    bumped = bytearray(blob)
    bumped[4] = 2
    with pytest.raises(FormatError, match="version"):
        deserialize_index_graph(bytes(bumped))


def test_inconsistent_offsets_are_rejected(ring_graph):
    blob = bytearray(serialize_index_graph(ring_graph))
    i = int(np.flatnonzero(ring_graph.valid)[0])
    pos = 42 + 16 * i + 1  # spatial offset field of record i
    blob[pos] ^= 1
    with pytest.raises(FormatError, match="offsets"):
        deserialize_index_graph(bytes(blob))


def _perturbed(rig):
    cams = list(rig)
    ext = cams[2].extrinsic.copy()
    ext[1, 3] += 0.01
    cams[2] = CameraModel(cams[2].cam_id, cams[2].intrinsics, ext, cams[2].width, cams[2].height)
    return cams


def test_fingerprint_mismatch_detected(ring_rig, ring_graph):
    blob = serialize_index_graph(ring_graph)
    perturbed = _perturbed(ring_rig)
    assert rig_fingerprint(RING_GRID, perturbed, RING_BINNING) != ring_graph.fingerprint
    with pytest.raises(FingerprintError):
        deserialize_index_graph(blob, rig=(RING_GRID, perturbed, RING_BINNING))
    with pytest.warns(UserWarning, match="fingerprint"):
        g = deserialize_index_graph(blob, rig=(RING_GRID, perturbed, RING_BINNING), strict=False)
    assert g == ring_graph


def test_fingerprint_covers_grid_and_binning(ring_rig):
    base = rig_fingerprint(RING_GRID, ring_rig, RING_BINNING)
    assert base == rig_fingerprint(RING_GRID, make_rig(RigSpec()), RING_BINNING)
    moved = VoxelGrid((-40.0, -40.0, -2.5), RING_GRID.voxel_size, RING_GRID.dims)
    assert rig_fingerprint(moved, ring_rig, RING_BINNING) != base
    assert rig_fingerprint(RING_GRID, ring_rig, DepthBinning(1.0, 61.0, 59)) != base


def test_graph_arrays_are_immutable(ring_graph):
    with pytest.raises(ValueError):
        ring_graph.spatial_index[0] = 1


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 6), st.integers(1, 24),
       st.integers(1, 24), st.integers(1, 60))
@settings(max_examples=60, deadline=None)
def test_offsets_always_in_bounds(seed, n_cams, z, h, w, bins):
    rng = rng_for(seed)
    cams = random_rig(rng, n_cams, (int(rng.integers(4, 40)), int(rng.integers(4, 30))))
    grid = VoxelGrid((-20.0, -20.0, -2.0), (40.0 / w, 40.0 / h, 4.0 / z), (z, h, w))
    g = build_index_graph(grid, cams, DepthBinning(0.5, 30.0, bins))
    assert g.spatial_index.min() >= 0 and g.spatial_index.max() <= g.spatial_pad
    assert g.depth_index.min() >= 0 and g.depth_index.max() <= g.depth_pad
    assert np.all((g.spatial_index == g.spatial_pad) == ~g.valid)
    assert np.all((g.depth_index == g.depth_pad) == ~g.valid)
    assert sum(coverage_stats(g).per_camera_counts) == coverage_stats(g).valid_count
