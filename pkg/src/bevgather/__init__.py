"""Camera-to-BEV view transformation as a precomputed index graph plus gather/multiply/reshape."""
from .aggregation import (DepthStack, FeatureStack, gather_depth_weights, gather_features,
                          modulate, place, transform)
from .errors import CalibrationError, ConfigurationError, FingerprintError, FormatError
from .geometry import (CameraModel, DepthBinning, PixelHit, VoxelGrid, project, project_points,
                       voxel_center)
from .indexgraph import (IndexGraph, build_index_graph, coverage_stats, deserialize_index_graph,
                         serialize_index_graph)
from .opgraph import OpGraph, OpNode, export_graph, interpret, lower, parse_graph, validate
from .oracle import MonolithicConfig, transform_monolithic

__version__ = "0.1.0"
