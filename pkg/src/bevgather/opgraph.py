"""Stage-2 aggregation as an explicit operator graph over a fixed primitive set.

A lowered graph uses only constants, ``GATHER``, ``MUL`` and ``RESHAPE``
between its ``INPUT`` and ``OUTPUT`` nodes. :func:`validate` checks that
property together with the DAG structure and the bounds of every constant
index; :func:`interpret` executes a validated graph with numpy.

The textual form is JSON. Constant tensors are not inlined; each constant
node carries a ``ref`` naming the FBLT (index) or FBTN (tensor) file and
field that hold its values.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FingerprintError, FormatError
from .geometry import VoxelGrid
from .indexgraph import IndexGraph, load_index_graph

GRAPH_VERSION = 1
WHITELIST = frozenset({"INPUT", "OUTPUT", "CONST_INDEX", "CONST_TENSOR", "GATHER", "MUL", "RESHAPE"})
_ARITY = {"INPUT": 0, "CONST_INDEX": 0, "CONST_TENSOR": 0, "GATHER": 2, "MUL": 2,
          "RESHAPE": 1, "OUTPUT": 1}
_CONST = ("CONST_INDEX", "CONST_TENSOR")


@dataclass(frozen=True, eq=False)
class OpNode:
    id: int
    kind: str
    inputs: Tuple[int, ...] = ()
    attrs: Mapping = field(default_factory=dict)
    value: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        # JSON-normal attrs so parsed and constructed graphs compare equal
        object.__setattr__(self, "attrs", json.loads(json.dumps(dict(self.attrs))))
        if self.value is not None:
            value = np.array(self.value)
            value.setflags(write=False)
            object.__setattr__(self, "value", value)

    def __eq__(self, other):
        if not isinstance(other, OpNode):
            return NotImplemented
        if (self.id, self.kind, self.inputs, self.attrs) != (other.id, other.kind, other.inputs, other.attrs):
            return False
        if self.value is None or other.value is None:
            return self.value is None and other.value is None
        return self.value.dtype == other.value.dtype and np.array_equal(self.value, other.value)

    __hash__ = None


@dataclass(frozen=True)
class InputSpec:
    """Declared graph input; ``-1`` in ``shape`` marks a dimension fixed only at run time."""

    name: str
    shape: Tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))


@dataclass(frozen=True)
class OpGraph:
    nodes: Tuple[OpNode, ...]
    inputs: Tuple[InputSpec, ...]
    output: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def kinds(self) -> List[str]:
        return [n.kind for n in self.nodes]


@dataclass(frozen=True)
class Violation:
    kind: str  # whitelist | dag | output | arity | input | bounds | shape
    node: Optional[int]
    message: str


class GraphValidationError(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        lines = "; ".join(f"[{v.kind}] node {v.node}: {v.message}" for v in self.violations)
        super().__init__(f"operator graph failed validation: {lines}")


def _fingerprint_hex(g: IndexGraph) -> str:
    return f"{g.fingerprint:#018x}"


def lower(g: IndexGraph, grid: Union[VoxelGrid, Tuple[int, int, int], None] = None,
          with_depth: bool = True) -> OpGraph:
    """Express the decomposed transform for ``g`` as an :class:`OpGraph`."""
    dims = g.dims if grid is None else (grid.dims if isinstance(grid, VoxelGrid) else tuple(grid))
    if tuple(dims) != g.dims:
        raise ValueError(f"grid dims {dims} do not match the index graph {g.dims}")
    ref = {"format": "FBLT", "fingerprint": _fingerprint_hex(g)}
    inputs = [InputSpec("features", (g.spatial_pad + 1, -1))]
    nodes = [OpNode(0, "INPUT", attrs={"name": "features"})]
    if with_depth:
        inputs.append(InputSpec("depth", (g.depth_pad + 1,)))
        nodes.append(OpNode(1, "INPUT", attrs={"name": "depth"}))
    spatial = len(nodes)
    nodes.append(OpNode(spatial, "CONST_INDEX", attrs={
        "name": "spatial_index", "shape": [g.num_voxels], "dtype": "int64",
        "ref": dict(ref, field="spatial_index")}, value=g.spatial_index))
    if with_depth:
        nodes.append(OpNode(spatial + 1, "CONST_INDEX", attrs={
            "name": "depth_index", "shape": [g.num_voxels, 1], "dtype": "int64",
            "ref": dict(ref, field="depth_index")}, value=g.depth_index.reshape(-1, 1)))
    feat = len(nodes)
    nodes.append(OpNode(feat, "GATHER", (0, spatial), {"axis": 0}))
    last = feat
    if with_depth:
        nodes.append(OpNode(feat + 1, "GATHER", (1, spatial + 1), {"axis": 0}))
        nodes.append(OpNode(feat + 2, "MUL", (feat, feat + 1)))
        last = feat + 2
    nodes.append(OpNode(last + 1, "RESHAPE", (last,), {"shape": [*g.dims, -1]}))
    nodes.append(OpNode(last + 2, "OUTPUT", (last + 1,), {"name": "bev"}))
    return OpGraph(tuple(nodes), tuple(inputs), last + 2)


def _broadcast(a, b):
    """Numpy-style broadcast of two shapes of equal rank; ``-1`` is taken as compatible."""
    if len(a) != len(b):
        return None
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        elif x == -1 or y == -1:
            out.append(max(x, y))
        else:
            return None
    return tuple(out)


def validate(graph: OpGraph) -> List[Violation]:
    """Return every violation found; an empty list means the graph may be executed."""
    out: List[Violation] = []
    declared = {spec.name: spec for spec in graph.inputs}
    position = {}
    for pos, node in enumerate(graph.nodes):
        if node.id in position:
            out.append(Violation("dag", node.id, "duplicate node id"))
        position.setdefault(node.id, pos)

    shapes: Dict[int, Optional[Tuple[int, ...]]] = {}
    byid = {n.id: n for n in graph.nodes}
    for pos, node in enumerate(graph.nodes):
        shapes[node.id] = None
        if node.kind not in WHITELIST:
            out.append(Violation("whitelist", node.id, f"operator {node.kind!r} is not whitelisted"))
            continue
        linked = True
        for src in node.inputs:
            if src not in position:
                out.append(Violation("dag", node.id, f"input {src} does not exist"))
                linked = False
            elif position[src] >= pos:
                out.append(Violation("dag", node.id, f"input {src} is not computed before use"))
                linked = False
        if len(node.inputs) != _ARITY[node.kind]:
            out.append(Violation("arity", node.id,
                                 f"{node.kind} takes {_ARITY[node.kind]} inputs, got {len(node.inputs)}"))
            continue
        if not linked:
            continue
        in_shapes = [shapes[i] for i in node.inputs]

        if node.kind == "INPUT":
            spec = declared.get(node.attrs.get("name"))
            if spec is None:
                out.append(Violation("input", node.id, f"undeclared input {node.attrs.get('name')!r}"))
            else:
                shapes[node.id] = spec.shape
        elif node.kind in _CONST:
            if node.value is None:
                out.append(Violation("shape", node.id, "constant has no value"))
            else:
                shapes[node.id] = node.value.shape
                if node.kind == "CONST_INDEX" and not np.issubdtype(node.value.dtype, np.integer):
                    out.append(Violation("shape", node.id, "index constant must be integer"))
        elif node.kind == "GATHER":
            data, index = in_shapes
            axis = int(node.attrs.get("axis", 0))
            src = byid[node.inputs[1]]
            if data is None or index is None:
                continue
            if not 0 <= axis < len(data):
                out.append(Violation("shape", node.id, f"axis {axis} outside data rank {len(data)}"))
                continue
            limit = data[axis]
            if src.kind == "CONST_INDEX" and src.value is not None and src.value.size and limit >= 0:
                lo, hi = int(src.value.min()), int(src.value.max())
                if lo < 0 or hi >= limit:
                    out.append(Violation("bounds", node.id,
                                         f"index constant {src.id} spans [{lo}, {hi}] but "
                                         f"node {node.inputs[0]} has {limit} entries on axis {axis}"))
            shapes[node.id] = data[:axis] + index + data[axis + 1:]
        elif node.kind == "MUL":
            a, b = in_shapes
            if a is not None and b is not None:
                shapes[node.id] = _broadcast(a, b)
                if shapes[node.id] is None:
                    out.append(Violation("shape", node.id, f"cannot broadcast {a} with {b}"))
        elif node.kind == "RESHAPE":
            target = tuple(int(d) for d in node.attrs.get("shape", ()))
            src_shape = in_shapes[0]
            shapes[node.id] = target
            if target.count(-1) > 1:
                out.append(Violation("shape", node.id, "reshape target has more than one -1"))
            elif src_shape is not None and -1 not in src_shape:
                size, known = int(np.prod(src_shape)), int(np.prod([d for d in target if d != -1]))
                fits = size == known if -1 not in target else known and size % known == 0
                if not fits:
                    out.append(Violation("shape", node.id, f"cannot reshape {src_shape} to {target}"))
        else:  # OUTPUT
            shapes[node.id] = in_shapes[0]

    outputs = [n.id for n in graph.nodes if n.kind == "OUTPUT"]
    if len(outputs) != 1:
        out.append(Violation("output", None, f"graph needs exactly one OUTPUT node, found {len(outputs)}"))
    elif graph.output != outputs[0]:
        out.append(Violation("output", graph.output, f"declared output is not the OUTPUT node {outputs[0]}"))
    return out


def _unwrap(value):
    return value.padded if hasattr(value, "padded") else np.asarray(value)


def interpret(graph: OpGraph, inputs: Mapping[str, object]) -> np.ndarray:
    """Execute ``graph`` in node order.

    ``inputs`` maps declared input names to arrays; :class:`FeatureStack` and
    :class:`DepthStack` are accepted and contribute their padded buffers.
    """
    violations = validate(graph)
    if violations:
        raise GraphValidationError(violations)
    declared = {spec.name: spec for spec in graph.inputs}
    values: Dict[int, np.ndarray] = {}
    for node in graph.nodes:
        args = [values[i] for i in node.inputs]
        if node.kind == "INPUT":
            name = node.attrs["name"]
            if name not in inputs:
                raise ValueError(f"missing graph input {name!r}")
            arr = _unwrap(inputs[name])
            spec = declared[name]
            if arr.ndim != len(spec.shape) or any(d not in (-1, s) for d, s in zip(spec.shape, arr.shape)):
                raise ValueError(f"input {name!r} has shape {arr.shape}, declared {spec.shape}")
            if arr.dtype != np.dtype(spec.dtype):
                raise ValueError(f"input {name!r} has dtype {arr.dtype}, declared {spec.dtype}")
            values[node.id] = arr
        elif node.kind in _CONST:
            values[node.id] = node.value
        elif node.kind == "GATHER":
            values[node.id] = np.take(args[0], args[1], axis=int(node.attrs.get("axis", 0)))
        elif node.kind == "MUL":
            values[node.id] = np.multiply(args[0], args[1])
        elif node.kind == "RESHAPE":
            values[node.id] = args[0].reshape(node.attrs["shape"])
        else:
            values[node.id] = args[0]
    return values[graph.output]


def _node_doc(node: OpNode, lut_file: Optional[str]) -> dict:
    attrs = dict(node.attrs)
    if node.kind in _CONST:
        ref = dict(attrs.get("ref", {}))
        if lut_file is not None and ref.get("format") == "FBLT":
            ref["file"] = lut_file
        attrs["ref"] = ref
    return {"id": node.id, "kind": node.kind, "inputs": list(node.inputs), "attrs": attrs}


def export_graph(graph: OpGraph, lut_file: Optional[str] = None) -> str:
    """Deterministic JSON text for ``graph``.

    ``lut_file`` is recorded in the ``ref`` of FBLT-backed constants so the
    text can be parsed back against that file.
    """
    doc = {
        "version": GRAPH_VERSION,
        "inputs": [{"name": s.name, "shape": list(s.shape), "dtype": s.dtype} for s in graph.inputs],
        "nodes": [_node_doc(n, lut_file) for n in graph.nodes],
        "output": graph.output,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


Resolver = Callable[[dict], np.ndarray]


def _resolver(source, base_dir) -> Resolver:
    cache: Dict[str, IndexGraph] = {}

    def from_graph(g: IndexGraph, ref: dict) -> np.ndarray:
        if ref.get("fingerprint") not in (None, _fingerprint_hex(g)):
            raise FingerprintError(f"graph constant was exported for {ref['fingerprint']}, "
                                   f"index graph is {_fingerprint_hex(g)}")
        if ref.get("field") not in ("spatial_index", "depth_index"):
            raise FormatError(f"unknown FBLT field {ref.get('field')!r}")
        return getattr(g, ref["field"])

    def resolve(ref: dict) -> np.ndarray:
        fmt = ref.get("format")
        if fmt == "FBLT":
            if isinstance(source, IndexGraph):
                return from_graph(source, ref)
            if not ref.get("file"):
                raise FormatError("FBLT constant has no file reference")
            path = os.path.join(base_dir, ref["file"])
            if path not in cache:
                cache[path] = load_index_graph(path)
            return from_graph(cache[path], ref)
        if fmt == "FBTN":
            from .synthio import load_tensor

            return load_tensor(os.path.join(base_dir, ref["file"]))
        raise FormatError(f"unknown constant format {fmt!r}")

    return source if callable(source) else resolve


def parse_graph(text: str, source: Union[IndexGraph, Resolver, None] = None,
                base_dir: str = ".") -> OpGraph:
    """Parse :func:`export_graph` output back into an :class:`OpGraph`.

    Constant values come from ``source``: an :class:`IndexGraph`, a callable
    mapping a ``ref`` dict to an array, or (default) the files named in the
    refs, resolved relative to ``base_dir``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"graph text is not valid JSON: {exc}") from None
    if doc.get("version") != GRAPH_VERSION:
        raise FormatError(f"unsupported graph version {doc.get('version')!r}")
    resolve = _resolver(source, base_dir)
    nodes = []
    for entry in doc["nodes"]:
        value = None
        attrs = entry.get("attrs", {})
        if entry["kind"] in _CONST:
            value = np.asarray(resolve(attrs["ref"]))
            if "shape" in attrs:
                value = value.reshape(attrs["shape"])
            if "dtype" in attrs:
                value = value.astype(attrs["dtype"], copy=False)
            if attrs.get("ref", {}).get("format") == "FBLT":
                attrs = dict(attrs, ref={k: v for k, v in attrs["ref"].items() if k != "file"})
        nodes.append(OpNode(entry["id"], entry["kind"], entry.get("inputs", ()), attrs, value))
    inputs = tuple(InputSpec(s["name"], s["shape"], s.get("dtype", "float32")) for s in doc["inputs"])
    return OpGraph(tuple(nodes), inputs, doc["output"])
