import dataclasses

import numpy as np
import pytest

from bevgather.aggregation import transform
from bevgather.errors import FingerprintError, FormatError
from bevgather.indexgraph import build_index_graph, save_index_graph
from bevgather.opgraph import (WHITELIST, GraphValidationError, OpGraph, OpNode, export_graph,
                               interpret, lower, parse_graph, validate)
from conftest import GOLDEN, RING_BINNING, RING_GRID

DEPTH_KINDS = ["INPUT", "INPUT", "CONST_INDEX", "CONST_INDEX", "GATHER", "GATHER", "MUL", "RESHAPE", "OUTPUT"]
PLAIN_KINDS = ["INPUT", "CONST_INDEX", "GATHER", "RESHAPE", "OUTPUT"]


def replace_node(graph, node_id, **changes):
    nodes = [dataclasses.replace(n, **changes) if n.id == node_id else n for n in graph.nodes]
    return OpGraph(nodes, graph.inputs, graph.output)


def test_lowered_structure(ring_graph):
    with_depth = lower(ring_graph, RING_GRID)
    assert with_depth.kinds() == DEPTH_KINDS
    assert [n.id for n in with_depth.nodes] == list(range(9))
    assert with_depth.output == 8
    assert lower(ring_graph, with_depth=False).kinds() == PLAIN_KINDS
    assert set(with_depth.kinds()) <= WHITELIST
    assert "MATMUL" not in WHITELIST
    with pytest.raises(ValueError):
        lower(ring_graph, (4, 50, 49))


@pytest.mark.parametrize("with_depth", [True, False])
def test_lowered_graph_validates_clean(ring_graph, with_depth):
    assert validate(lower(ring_graph, with_depth=with_depth)) == []


def test_unknown_operator_is_a_single_whitelist_violation(ring_graph):
    graph = replace_node(lower(ring_graph), 6, kind="CUSTOM")
    found = validate(graph)
    assert [(v.kind, v.node) for v in found] == [("whitelist", 6)]
    with pytest.raises(GraphValidationError):
        interpret(graph, {})


def test_out_of_range_index_is_a_bounds_violation(ring_graph):
    graph = lower(ring_graph)
    bad = np.array(ring_graph.spatial_index)
    bad[0] = ring_graph.spatial_pad + 1  # one past the padded feature table
    found = validate(replace_node(graph, 2, value=bad))
    assert [(v.kind, v.node) for v in found] == [("bounds", 4)]
    negative = np.array(ring_graph.spatial_index)
    negative[-1] = -1
    assert [v.kind for v in validate(replace_node(graph, 2, value=negative))] == ["bounds"]


def test_structural_violations(ring_graph):
    graph = lower(ring_graph)
    forward = replace_node(graph, 4, inputs=(0, 7))
    assert "dag" in [v.kind for v in validate(forward)]
    dangling = replace_node(graph, 4, inputs=(0, 42))
    assert [v.kind for v in validate(dangling)] == ["dag"]
    no_output = OpGraph(graph.nodes[:-1], graph.inputs, 7)
    assert [v.kind for v in validate(no_output)] == ["output"]
    wrong_arity = replace_node(graph, 6, inputs=(4,))
    assert [v.kind for v in validate(wrong_arity)] == ["arity"]
    undeclared = OpGraph(graph.nodes, graph.inputs[:1], graph.output)
    assert "input" in [v.kind for v in validate(undeclared)]
    flat_weights = replace_node(graph, 3, value=ring_graph.depth_index)  # [V] cannot broadcast with [V, C]
    assert [(v.kind, v.node) for v in validate(flat_weights)] == [("shape", 6)]
    two_wildcards = replace_node(graph, 7, attrs={"shape": [4, -1, 50, -1]})
    assert [v.kind for v in validate(two_wildcards)] == ["shape"]


@pytest.mark.parametrize("with_depth", [True, False])
def test_interpret_matches_transform(ring_graph, ring_stacks, with_depth):
    feats, depth = ring_stacks
    graph = lower(ring_graph, with_depth=with_depth)
    inputs = {"features": feats, "depth": depth} if with_depth else {"features": feats}
    out = interpret(graph, inputs)
    assert out.shape == (*RING_GRID.dims, feats.channels)
    assert out.tobytes() == transform(feats, depth if with_depth else None, ring_graph).tobytes()


def test_interpret_checks_inputs(ring_graph, ring_stacks):
    feats, depth = ring_stacks
    graph = lower(ring_graph)
    with pytest.raises(ValueError, match="missing"):
        interpret(graph, {"features": feats})
    with pytest.raises(ValueError, match="dtype"):
        interpret(graph, {"features": feats.padded.astype(np.float64), "depth": depth})
    with pytest.raises(ValueError, match="shape"):
        interpret(graph, {"features": feats.padded[:-1], "depth": depth})


def test_export_is_deterministic_and_parses_back(ring_rig, ring_graph):
    graph = lower(ring_graph)
    text = export_graph(graph)
    rebuilt = build_index_graph(RING_GRID, ring_rig, RING_BINNING)
    assert export_graph(lower(rebuilt)) == text
    back = parse_graph(text, source=ring_graph)
    assert back == graph
    assert export_graph(back) == text


def test_depth_free_export_has_no_multiply(ring_graph):
    text = export_graph(lower(ring_graph, with_depth=False))
    assert '"MUL"' not in text and '"depth"' not in text


def test_parse_from_files(tmp_path, ring_graph, ring_stacks):
    save_index_graph(ring_graph, tmp_path / "ring.fblt")
    text = export_graph(lower(ring_graph), lut_file="ring.fblt")
    back = parse_graph(text, base_dir=str(tmp_path))
    assert back == lower(ring_graph)
    feats, depth = ring_stacks
    assert interpret(back, {"features": feats, "depth": depth}).tobytes() == \
        transform(feats, depth, ring_graph).tobytes()


def test_parse_rejects_bad_text(ring_rig, ring_graph):
    text = export_graph(lower(ring_graph))
    with pytest.raises(FormatError):
        parse_graph("{not json", source=ring_graph)
    with pytest.raises(FormatError):
        parse_graph(text.replace('"version": 1', '"version": 9'), source=ring_graph)
    with pytest.raises(FormatError):
        parse_graph(text)  # no file and no source for the constants
    other = build_index_graph(RING_GRID, ring_rig[::-1], RING_BINNING)
    with pytest.raises(FingerprintError):
        parse_graph(text, source=other)


def test_matches_golden_export(ring_graph):
    golden = (GOLDEN / "ring6_graph_depth.json").read_text()
    assert export_graph(lower(ring_graph)) == golden


def test_node_equality_covers_values():
    a = OpNode(0, "CONST_INDEX", attrs={"shape": [2]}, value=np.array([1, 2]))
    assert a == OpNode(0, "CONST_INDEX", attrs={"shape": [2]}, value=np.array([1, 2]))
    assert a != OpNode(0, "CONST_INDEX", attrs={"shape": [2]}, value=np.array([1, 3]))
    assert a != OpNode(0, "CONST_INDEX", attrs={"shape": [2]})
