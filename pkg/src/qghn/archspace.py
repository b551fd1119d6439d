"""CNN computation graphs: sampling, virtual edges, shapes and dataset files.

Graphs are small mobile-style CNNs (depthwise-separable blocks, residual
adds, concat branches, pooling) over a fixed 13-op vocabulary. Node lists
are kept in topological order; every split of a dataset is generated from
child seeds of one master seed.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

OPS = (
    "Input",
    "Conv",
    "DWConv",
    "BatchNorm",
    "ReLU",
    "ReLU6",
    "MaxPool",
    "AvgPool",
    "GlobalAvgPool",
    "Add",
    "Concat",
    "Linear",
    "Output",
)
OP_INDEX = {op: i for i, op in enumerate(OPS)}
PARAM_OPS = ("Conv", "DWConv", "BatchNorm", "Linear")
ACTIVATIONS = ("ReLU", "ReLU6")
BLOCKS = ("conv", "dwsep", "residual", "concat", "pool")

DATASET_FORMAT = "qghn-archgraph"
DATASET_VERSION = 1


class GraphError(ValueError):
    """A graph violates a structural invariant."""

    def __init__(self, msg: str, node_id: Optional[int] = None):
        self.node_id = node_id
        super().__init__(msg if node_id is None else f"node {node_id}: {msg}")


class ShapeError(GraphError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class Split(str, enum.Enum):
    TRAIN = "train"
    ID_TEST = "id"
    OOD_DEEP = "deep"
    OOD_WIDE = "wide"
    OOD_BNFREE = "bnfree"

    @classmethod
    def parse(cls, s: str) -> "Split":
        aliases = {"test": "id", "idtest": "id", "bn-free": "bnfree", "bn_free": "bnfree"}
        s = s.strip().lower()
        return cls(aliases.get(s, s))


@dataclass
class OpNode:
    id: int
    op: str
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.op not in OP_INDEX:
            raise GraphError(f"unknown op {self.op!r}", self.id)


@dataclass
class ArchGraph:
    nodes: list
    edges: list
    virtual_edges: list = field(default_factory=list)
    split: Split = Split.TRAIN
    graph_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.split = Split(self.split)
        self.edges = [tuple(e) for e in self.edges]
        self.virtual_edges = [tuple(e) for e in self.virtual_edges]

    def node(self, node_id: int) -> OpNode:
        return self.nodes[self.position[node_id]]

    @property
    def position(self) -> dict:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def predecessors(self) -> dict:
        """node id -> list of source ids, in edge-list order."""
        preds = {n.id: [] for n in self.nodes}
        for s, d in self.edges:
            preds[d].append(s)
        return preds

    def successors(self) -> dict:
        succ = {n.id: [] for n in self.nodes}
        for s, d in self.edges:
            succ[s].append(d)
        return succ

    def count(self, op: str) -> int:
        return sum(n.op == op for n in self.nodes)

    def validate(self, s_max: Optional[int] = None) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node ids")
        pos = self.position
        inputs = [n.id for n in self.nodes if n.op == "Input"]
        outputs = [n.id for n in self.nodes if n.op == "Output"]
        if len(inputs) != 1 or len(outputs) != 1:
            raise GraphError(f"need exactly one Input and one Output, got {len(inputs)}/{len(outputs)}")
        for s, d in self.edges:
            if s not in pos or d not in pos:
                raise GraphError(f"edge ({s}, {d}) references unknown node")
            if pos[s] >= pos[d]:
                raise GraphError(f"edge ({s}, {d}) breaks topological node order", d)
        if len(set(self.edges)) != len(self.edges):
            raise GraphError("duplicate edges")
        preds, succ = self.predecessors(), self.successors()
        for n in self.nodes:
            k = len(preds[n.id])
            if n.op == "Input":
                if k:
                    raise GraphError("Input has predecessors", n.id)
            elif n.op in ("Add", "Concat"):
                if k < 2:
                    raise GraphError(f"{n.op} needs >= 2 inputs", n.id)
            elif k != 1:
                raise GraphError(f"{n.op} needs exactly 1 input, got {k}", n.id)
            if n.op != "Output" and not succ[n.id]:
                raise GraphError("dangling node (only Output may be a sink)", n.id)
            if n.op == "Output" and succ[n.id]:
                raise GraphError("Output has successors", n.id)
        reach = _bfs_distances(succ, inputs[0])
        for n in self.nodes:
            if n.id not in reach:
                raise GraphError("unreachable from Input", n.id)
        if self.split is Split.OOD_BNFREE and self.count("BatchNorm"):
            raise GraphError("BN-free graph contains BatchNorm")
        real = set(self.edges)
        for u, v, d in self.virtual_edges:
            if (u, v) in real:
                raise GraphError(f"virtual edge ({u}, {v}) duplicates a real edge")
            if d < 2 or (s_max is not None and d > s_max):
                raise GraphError(f"virtual edge ({u}, {v}) has distance {d}")

    def to_record(self) -> dict:
        return {
            "graph_id": self.graph_id,
            "seed": self.seed,
            "split": self.split.value,
            "nodes": [[n.id, n.op, n.attrs] for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "virtual_edges": [list(e) for e in self.virtual_edges],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ArchGraph":
        nodes = [OpNode(int(i), op, dict(attrs)) for i, op, attrs in rec["nodes"]]
        return cls(
            nodes=nodes,
            edges=[(int(s), int(d)) for s, d in rec["edges"]],
            virtual_edges=[(int(s), int(d), int(k)) for s, d, k in rec["virtual_edges"]],
            split=Split(rec["split"]),
            graph_id=int(rec["graph_id"]),
            seed=int(rec["seed"]),
        )


@dataclass
class GenConfig:
    """Knobs of the architecture space.

    ``block_probs`` weights the block kinds the sampler grows a body from
    (plain conv, depthwise-separable, residual, concat branch, pooling).
    """

    depth: tuple = (6, 14)
    width: tuple = (8, 64)
    deep_depth: tuple = (18, 30)
    wide_width: tuple = (96, 256)
    kernel_sizes: tuple = (1, 3)
    block_probs: dict = field(
        default_factory=lambda: {"conv": 0.3, "dwsep": 0.25, "residual": 0.25, "concat": 0.1, "pool": 0.1}
    )
    relu6_prob: float = 0.3
    stride2_prob: float = 0.3
    stem_stride: int = 2
    max_downsamples: int = 3
    classes: int = 10
    image_size: int = 32
    s_max: int = 10
    counts: dict = field(
        default_factory=lambda: {"train": 1000, "id": 100, "deep": 100, "wide": 100, "bnfree": 100}
    )
    seed: int = 0

    def __post_init__(self):
        self.depth = tuple(self.depth)
        self.width = tuple(self.width)
        self.deep_depth = tuple(self.deep_depth)
        self.wide_width = tuple(self.wide_width)
        self.kernel_sizes = tuple(self.kernel_sizes)

    def validate(self) -> None:
        for name in ("depth", "width", "deep_depth", "wide_width"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.depth[0] < 5:
            raise ValueError("depth must allow at least 5 nodes (Input, Conv, GAP, Linear, Output)")
        if self.width[0] < 1:
            raise ValueError("width must be positive")
        if self.deep_depth[0] <= self.depth[1]:
            raise ValueError("deep_depth must lie strictly above depth")
        if self.wide_width[0] <= self.width[1]:
            raise ValueError("wide_width must lie strictly above width")
        if not set(self.kernel_sizes) <= {1, 3, 5} or not self.kernel_sizes:
            raise ValueError("kernel_sizes must be a non-empty subset of {1, 3, 5}")
        if set(self.block_probs) - set(BLOCKS):
            raise ValueError(f"unknown block kinds {set(self.block_probs) - set(BLOCKS)}")
        if any(p < 0 for p in self.block_probs.values()) or not math.isclose(
            sum(self.block_probs.values()), 1.0, abs_tol=1e-9
        ):
            raise ValueError("block_probs must be non-negative and sum to 1")
        if self.s_max < 2:
            raise ValueError("s_max must be >= 2")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if set(self.counts) - {s.value for s in Split}:
            raise ValueError(f"unknown splits in counts: {set(self.counts)}")

    def to_dict(self) -> dict:
        return {
            "depth": list(self.depth),
            "width": list(self.width),
            "deep_depth": list(self.deep_depth),
            "wide_width": list(self.wide_width),
            "kernel_sizes": list(self.kernel_sizes),
            "block_probs": dict(self.block_probs),
            "relu6_prob": self.relu6_prob,
            "stride2_prob": self.stride2_prob,
            "stem_stride": self.stem_stride,
            "max_downsamples": self.max_downsamples,
            "classes": self.classes,
            "image_size": self.image_size,
            "s_max": self.s_max,
            "counts": dict(self.counts),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = cls().to_dict().keys()
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)


class _Builder:
    """Appends nodes in topological order while tracking channels/spatial size."""

    def __init__(self, rng: np.random.Generator, bn: bool, act: str):
        self.rng = rng
        self.bn = bn
        self.act = act
        self.nodes: list = []
        self.edges: list = []

    def add(self, op: str, srcs: Iterable[int], **attrs) -> int:
        nid = len(self.nodes)
        self.nodes.append(OpNode(nid, op, attrs))
        self.edges.extend((s, nid) for s in srcs)
        return nid

    def conv_unit(self, src, op, k, stride, out, with_act=True) -> int:
        if op == "DWConv":
            x = self.add(op, [src], kernel=k, stride=stride, out_channels=out, groups=out)
        else:
            x = self.add(op, [src], kernel=k, stride=stride, out_channels=out)
        if self.bn:
            x = self.add("BatchNorm", [x])
        if with_act:
            x = self.add(self.act, [x])
        return x


def _block_size(kind: str, bn: bool) -> int:
    b = int(bn)
    return {
        "conv": 2 + b,
        "dwsep": 4 + 2 * b,
        "residual": 5 + 2 * b,
        "concat": 5 + 2 * b,
        "pool": 1,
    }[kind]


def _bands(cfg: GenConfig, split: Split) -> tuple:
    depth = cfg.deep_depth if split is Split.OOD_DEEP else cfg.depth
    width = cfg.wide_width if split is Split.OOD_WIDE else cfg.width
    return depth, width


def sample_graph(cfg: GenConfig, split, seed: int, graph_id: int = 0) -> ArchGraph:
    """Sample one graph for ``split``; a pure function of ``(cfg, split, seed)``.

    The node count is drawn from the split's depth band and hit exactly:
    blocks are only chosen when they fit the remaining budget, and a
    1x1 conv fills whatever is left.
    """
    cfg.validate()
    split = Split(split)
    rng = np.random.default_rng(seed)
    (dlo, dhi), (wlo, whi) = _bands(cfg, split)
    target = int(rng.integers(dlo, dhi + 1))
    bn = split is not Split.OOD_BNFREE
    act = "ReLU6" if rng.random() < cfg.relu6_prob else "ReLU"
    b = _Builder(rng, bn, act)

    width = int(rng.integers(wlo, whi + 1))
    spatial = cfg.image_size
    downs_left = cfg.max_downsamples

    def take_stride(p: float) -> int:
        nonlocal spatial, downs_left
        if downs_left > 0 and spatial >= 4 and rng.random() < p:
            downs_left -= 1
            spatial = (spatial + 1) // 2
            width_up()
            return 2
        return 1

    def width_up():
        nonlocal width
        width = min(2 * width, whi)

    x = b.add("Input", [])
    budget = target - 4  # Input, GlobalAvgPool, Linear, Output

    stem_stride = 1
    if cfg.stem_stride == 2 and downs_left > 0:
        downs_left -= 1
        spatial = (spatial + 1) // 2
        stem_stride = 2
    k_stem = 3 if 3 in cfg.kernel_sizes else max(cfg.kernel_sizes)
    stem_full = _block_size("conv", bn)
    if budget >= stem_full:
        x = b.conv_unit(x, "Conv", k_stem, stem_stride, width)
        budget -= stem_full
    elif budget >= 2:
        x = b.add("Conv", [x], kernel=k_stem, stride=stem_stride, out_channels=width)
        x = b.add(act, [x])
        budget -= 2
    else:
        x = b.add("Conv", [x], kernel=k_stem, stride=stem_stride, out_channels=width)
        budget -= 1
    channels = width

    kinds = [k for k in BLOCKS if cfg.block_probs.get(k, 0.0) > 0]
    weights = np.array([cfg.block_probs[k] for k in kinds], dtype=np.float64)
    ksizes = list(cfg.kernel_sizes)
    while budget > 0:
        allowed = [
            i
            for i, k in enumerate(kinds)
            if _block_size(k, bn) <= budget and not (k == "pool" and (downs_left == 0 or spatial < 4))
        ]
        kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
        if kinds.index(kind) not in allowed:
            # oversized draw: fall back to a fitting non-pool block, else the filler
            fits = [i for i in allowed if kinds[i] != "pool"]
            if not fits:
                x = b.add("Conv", [x], kernel=1, stride=1, out_channels=channels)
                budget -= 1
                if budget >= 1:
                    x = b.add(act, [x])
                    budget -= 1
                continue
            p = weights[fits] / weights[fits].sum()
            kind = kinds[fits[int(rng.choice(len(fits), p=p))]]
        budget -= _block_size(kind, bn)
        if kind == "conv":
            k = int(rng.choice(ksizes))
            s = take_stride(cfg.stride2_prob)
            x = b.conv_unit(x, "Conv", k, s, width)
            channels = width
        elif kind == "dwsep":
            k = int(rng.choice([k for k in ksizes if k > 1] or ksizes))
            s = take_stride(cfg.stride2_prob)
            x = b.conv_unit(x, "DWConv", k, s, channels)
            x = b.conv_unit(x, "Conv", 1, 1, width)
            channels = width
        elif kind == "residual":
            k = int(rng.choice(ksizes))
            skip = x
            y = b.conv_unit(x, "Conv", k, 1, channels)
            y = b.conv_unit(y, "Conv", k, 1, channels, with_act=False)
            x = b.add("Add", [skip, y])
            x = b.add(act, [x])
        elif kind == "concat":
            c1 = max(1, width // 2)
            c2 = max(1, width - c1)
            k = int(rng.choice([k for k in ksizes if k > 1] or ksizes))
            y1 = b.conv_unit(x, "Conv", 1, 1, c1)
            y2 = b.conv_unit(x, "Conv", k, 1, c2)
            x = b.add("Concat", [y1, y2])
            channels = c1 + c2
        else:
            op = "MaxPool" if rng.random() < 0.5 else "AvgPool"
            take_stride(1.0)
            x = b.add(op, [x], kernel=3, stride=2)

    x = b.add("GlobalAvgPool", [x])
    x = b.add("Linear", [x], out_channels=cfg.classes)
    b.add("Output", [x])
    g = ArchGraph(b.nodes, b.edges, [], split, graph_id, seed)
    g = add_virtual_edges(g, cfg.s_max)
    g.validate(cfg.s_max)
    return g


def _bfs_distances(succ: dict, src: int) -> dict:
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in succ[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def add_virtual_edges(g: ArchGraph, s_max: int) -> ArchGraph:
    """Copy of ``g`` with a virtual edge ``(u, v, d)`` for every directed
    shortest-path distance ``2 <= d <= s_max``."""
    succ = g.successors()
    virtual = []
    for n in g.nodes:
        for v, d in _bfs_distances(succ, n.id).items():
            if 2 <= d <= s_max:
                virtual.append((n.id, v, d))
    pos = g.position
    virtual.sort(key=lambda e: (pos[e[0]], pos[e[1]]))
    return ArchGraph(list(g.nodes), list(g.edges), virtual, g.split, g.graph_id, g.seed)


@dataclass
class NodeShape:
    out: tuple
    params: dict = field(default_factory=dict)


def _conv_out(size: int, k: int, s: int) -> int:
    return (size + 2 * (k // 2) - k) // s + 1


def infer_shapes(g: ArchGraph, input_shape: tuple = (3, 32, 32)) -> dict:
    """Output shape (C, H, W) -- or (features,) after Linear -- and
    parameter shapes per node id."""
    preds = g.predecessors()
    shapes: dict = {}
    for n in g.nodes:
        ins = [shapes[p].out for p in preds[n.id]]
        a = n.attrs
        if n.op == "Input":
            shapes[n.id] = NodeShape(tuple(input_shape))
            continue
        if not ins:
            raise ShapeError("missing input", n.id)
        x = ins[0]
        if n.op in ("Conv", "DWConv"):
            if len(x) != 3:
                raise ShapeError(f"{n.op} expects (C,H,W) input, got {x}", n.id)
            c, h, w = x
            k, s = a["kernel"], a["stride"]
            if n.op == "DWConv":
                out_c = c
                if a.get("out_channels", c) != c:
                    raise ShapeError(f"DWConv out_channels {a['out_channels']} != in {c}", n.id)
                params = {"weight": (c, 1, k, k)}
            else:
                out_c = a["out_channels"]
                params = {"weight": (out_c, c, k, k)}
            oh, ow = _conv_out(h, k, s), _conv_out(w, k, s)
            if oh < 1 or ow < 1:
                raise ShapeError(f"spatial size collapsed to {(oh, ow)}", n.id)
            shapes[n.id] = NodeShape((out_c, oh, ow), params)
        elif n.op == "BatchNorm":
            shapes[n.id] = NodeShape(x, {"gain": (x[0],), "bias": (x[0],)})
        elif n.op in ACTIVATIONS:
            shapes[n.id] = NodeShape(x)
        elif n.op in ("MaxPool", "AvgPool"):
            c, h, w = x
            k, s = a.get("kernel", 3), a.get("stride", 2)
            shapes[n.id] = NodeShape((c, _conv_out(h, k, s), _conv_out(w, k, s)))
        elif n.op == "GlobalAvgPool":
            shapes[n.id] = NodeShape((x[0], 1, 1))
        elif n.op == "Add":
            if any(s != x for s in ins):
                raise ShapeError(f"Add inputs disagree: {ins}", n.id)
            shapes[n.id] = NodeShape(x)
        elif n.op == "Concat":
            if any(len(s) != 3 or s[1:] != x[1:] for s in ins):
                raise ShapeError(f"Concat spatial dims disagree: {ins}", n.id)
            shapes[n.id] = NodeShape((sum(s[0] for s in ins),) + tuple(x[1:]))
        elif n.op == "Linear":
            features = int(np.prod(x))
            shapes[n.id] = NodeShape((a["out_channels"],), {"weight": (a["out_channels"], features)})
        elif n.op == "Output":
            shapes[n.id] = NodeShape(x)
    return shapes


def generate_dataset(cfg: GenConfig) -> list:
    """All splits listed in ``cfg.counts``; each graph gets a child seed of ``cfg.seed``."""
    cfg.validate()
    graphs = []
    seen = set()
    gid = 0
    for split in Split:
        count = int(cfg.counts.get(split.value, 0))
        children = np.random.SeedSequence([cfg.seed, list(Split).index(split)]).spawn(count)
        for child in children:
            a, b = child.generate_state(2, dtype=np.uint32)
            seed = (int(a) << 31) ^ int(b)
            if seed in seen:
                raise RuntimeError(f"seed collision at graph {gid}")
            seen.add(seed)
            graphs.append(sample_graph(cfg, split, seed, gid))
            gid += 1
    return graphs


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_dataset(graphs: list) -> bytes:
    """One JSON record per line behind a versioned header; empty in, empty out."""
    if not graphs:
        return b""
    lines = [_dump({"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(graphs)})]
    lines += [_dump(g.to_record()) for g in graphs]
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_dataset(data: bytes) -> list:
    if not data:
        return []
    text = data.decode("utf-8")
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    else:
        raise DatasetFormatError(len(lines), "record not newline-terminated (truncated stream?)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"bad header: {exc}") from None
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(1, f"not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(1, f"unsupported version {header.get('version')}")
    graphs = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            graphs.append(ArchGraph.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(i, f"malformed record: {exc}") from None
    if len(graphs) != header.get("count"):
        raise DatasetFormatError(
            len(lines) + 1, f"expected {header.get('count')} records, found {len(graphs)} (truncated?)"
        )
    return graphs


def save_dataset(graphs: list, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_dataset(graphs))


def load_dataset(path) -> list:
    with open(path, "rb") as f:
        return deserialize_dataset(f.read())


def by_split(graphs: list, split) -> list:
    split = Split(split)
    return [g for g in graphs if g.split is split]
