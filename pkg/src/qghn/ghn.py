"""Graph hypernetwork: node embeddings -> gated message passing -> parameter decoders.

Encoding runs ``passes`` rounds of a forward sweep (sources to sink) and a
backward sweep (sink to sources). In each sweep a node aggregates messages
from already-updated neighbours -- weight 1 over real edges, 1/d over
virtual edges of shortest-path distance d -- and updates its state with a
GRU cell. Nodes sharing a topological level are updated together.

Decoding produces a fixed base tensor per parameter role and fits it to the
target shape by cyclic tiling (or leading-index slicing), then rescales it.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archspace import OP_INDEX, OPS, ArchGraph, infer_shapes
from .qcnn import ParamSet, fan_in

CKPT_MAGIC = b"QGHN-CKPT\n"
CKPT_VERSION = 1


class GhnConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class GhnConfig:
    hidden_dim: int = 32
    passes: int = 1
    base_shape: tuple = (64, 64, 3, 3)

    def __post_init__(self):
        self.base_shape = tuple(int(v) for v in self.base_shape)
        if self.hidden_dim <= 0:
            raise GhnConfigError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.passes <= 0:
            raise GhnConfigError(f"passes must be positive, got {self.passes}")
        if len(self.base_shape) != 4 or min(self.base_shape) <= 0:
            raise GhnConfigError(f"base_shape must be 4 positive ints, got {self.base_shape}")
        if self.base_shape[2] != self.base_shape[3] or self.base_shape[2] < 3:
            raise GhnConfigError("base kernel must be square with k >= 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_shape"] = list(self.base_shape)
        return d


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 - 1) * bound)


class _Mlp(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class GhnModel(nn.Module):
    def __init__(self, cfg: GhnConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        co, ci, k, _ = cfg.base_shape
        self.embed = nn.Parameter(torch.empty(len(OPS), h))
        self.msg_fwd = _Mlp(h, h, h)
        self.msg_bwd = _Mlp(h, h, h)
        self.gru = nn.GRUCell(h, h)
        self.heads = nn.ModuleDict(
            {
                "conv": _Mlp(h, h, co * ci * k * k),
                "dwconv": _Mlp(h, h, co * k * k),
                "linear": _Mlp(h, h, co * ci),
                "bn_gain": _Mlp(h, h, co),
                "bn_bias": _Mlp(h, h, co),
            }
        )

    def tensors(self) -> list:
        """(name, tensor) pairs in a fixed order."""
        return list(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def init_ghn(cfg: GhnConfig, seed: int = 0) -> GhnModel:
    """Fresh model; weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if not isinstance(cfg, GhnConfig):
        cfg = GhnConfig(**cfg)
    model = GhnModel(cfg)
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.tensors():
        if name == "embed":
            _uniform_(p, 1.0, gen)
        elif name.startswith("gru."):
            _uniform_(p, 1.0 / math.sqrt(cfg.hidden_dim), gen)
        elif p.dim() == 2:
            _uniform_(p, 1.0 / math.sqrt(p.shape[1]), gen)
        else:
            # bias: fan_in of the owning layer
            owner = dict(model.named_parameters())[name[: -len("bias")] + "weight"]
            _uniform_(p, 1.0 / math.sqrt(owner.shape[1]), gen)
    return model


def _levels(n: int, edges: list) -> list:
    """Group node positions by longest-path depth over position-indexed ``edges``."""
    depth = [0] * n
    for s, d in sorted(edges, key=lambda e: e[1]):
        depth[d] = max(depth[d], depth[s] + 1)
    out: dict = {}
    for i, d in enumerate(depth):
        out.setdefault(d, []).append(i)
    return [out[d] for d in sorted(out)]


def _adjacency(g: ArchGraph, dtype) -> tuple:
    """Dense message weights ``A[dst, src]`` and the position-indexed real edges."""
    pos = g.position
    n = len(g.nodes)
    a = torch.zeros(n, n, dtype=dtype)
    real = [(pos[s], pos[d]) for s, d in g.edges]
    for s, d in real:
        a[d, s] += 1.0
    for s, d, dist in g.virtual_edges:
        a[pos[d], pos[s]] += 1.0 / dist
    return a, real


def encode(ghn: GhnModel, g: ArchGraph) -> torch.Tensor:
    """Node states ``(len(g.nodes), hidden_dim)`` in node-list order."""
    dtype = ghn.embed.dtype
    n = len(g.nodes)
    ops = torch.tensor([OP_INDEX[nd.op] for nd in g.nodes])
    h = ghn.embed.index_select(0, ops)
    a, real = _adjacency(g, dtype)
    fwd_levels = _levels(n, real)
    bwd_levels = [[n - 1 - i for i in lv] for lv in _levels(n, [(n - 1 - d, n - 1 - s) for s, d in real])]
    at = a.t()
    for _ in range(ghn.cfg.passes):
        for adj, levels, msg in ((a, fwd_levels, ghn.msg_fwd), (at, bwd_levels, ghn.msg_bwd)):
            for lv in levels:
                idx = torch.tensor(lv)
                rows = adj.index_select(0, idx)
                m = rows @ msg(h) if rows.any() else torch.zeros(len(lv), h.shape[1], dtype=dtype)
                h = h.index_copy(0, idx, ghn.gru(m, h.index_select(0, idx)))
    return h


def fit_shape(t: torch.Tensor, shape: tuple) -> torch.Tensor:
    """Slice (leading indices) or cyclically tile every axis of ``t`` to ``shape``."""
    for dim, target in enumerate(shape):
        base = t.shape[dim]
        if target != base:
            t = t.index_select(dim, torch.arange(target) % base)
    return t


def _rms_normalize(w: torch.Tensor, target_rms: float) -> torch.Tensor:
    rms = torch.sqrt(torch.mean(w * w) + 1e-30)
    return w * (target_rms / rms)


def decode_params(ghn: GhnModel, states: torch.Tensor, g: ArchGraph, input_shape=(3, 32, 32)) -> ParamSet:
    co, ci, k, _ = ghn.cfg.base_shape
    shapes = infer_shapes(g, input_shape)
    pos = g.position
    tensors = {}
    for n in g.nodes:
        roles = shapes[n.id].params
        if not roles:
            continue
        hv = states[pos[n.id]]
        out = {}
        if n.op in ("Conv", "DWConv"):
            shape = roles["weight"]
            if shape[2] > k:
                raise GhnConfigError(f"node {n.id}: kernel {shape[2]} exceeds decoder base kernel {k}")
            if n.op == "Conv":
                raw = ghn.heads["conv"](hv).view(co, ci, k, k)
            else:
                raw = ghn.heads["dwconv"](hv).view(co, 1, k, k)
            out["weight"] = _rms_normalize(fit_shape(raw, shape), math.sqrt(2.0 / fan_in(shape)))
        elif n.op == "Linear":
            shape = roles["weight"]
            raw = ghn.heads["linear"](hv).view(co, ci)
            out["weight"] = _rms_normalize(fit_shape(raw, shape), math.sqrt(2.0 / fan_in(shape)))
        elif n.op == "BatchNorm":
            (c,) = roles["gain"]
            gain = fit_shape(ghn.heads["bn_gain"](hv), (c,))
            bias = fit_shape(ghn.heads["bn_bias"](hv), (c,))
            out["gain"] = gain - gain.mean() + 1.0
            out["bias"] = bias - bias.mean()
        tensors[n.id] = out
    return ParamSet(tensors, source="predicted")


def predict_parameters(ghn: GhnModel, g: ArchGraph, input_shape=(3, 32, 32)) -> ParamSet:
    return decode_params(ghn, encode(ghn, g), g, input_shape)


def paramset_checksum(p: ParamSet) -> str:
    h = hashlib.sha256()
    for (nid, role), t in p.items():
        h.update(f"{nid}:{role}:{tuple(t.shape)}".encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoint files ---------------------------------------------------------
#
#   QGHN-CKPT\n
#   <one-line JSON header>\n
#   <payload: little-endian float32 tensors, back to back>
#
# The header carries version, GhnConfig, a manifest entry per tensor
# (name, shape, offset, nbytes), free-form metadata and the payload sha256.


def _to_le_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(path, ghn: GhnModel, extra: Optional[dict] = None, meta: Optional[dict] = None) -> str:
    """Write model tensors plus optional ``extra`` named tensors; returns the file sha256."""
    entries = [(f"model.{n}", t) for n, t in ghn.tensors()]
    entries += [(f"extra.{n}", t) for n, t in sorted((extra or {}).items())]
    payload = io.BytesIO()
    manifest = []
    for name, t in entries:
        b = _to_le_bytes(t)
        manifest.append({"name": name, "shape": list(t.shape), "offset": payload.tell(), "nbytes": len(b)})
        payload.write(b)
    data = payload.getvalue()
    header = {
        "version": CKPT_VERSION,
        "dtype": "<f4",
        "config": ghn.cfg.to_dict(),
        "tensors": manifest,
        "meta": meta or {},
        "payload_bytes": len(data),
        "payload_sha256": hashlib.sha256(data).hexdigest(),
    }
    blob = CKPT_MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + data
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple:
    """Returns ``(ghn, extra_tensors, meta)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = blob.find(b"\n", len(CKPT_MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(CKPT_MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} is incompatible with reader version {CKPT_VERSION}"
        )
    data = blob[end + 1 :]
    if len(data) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(data)} bytes, header says {header['payload_bytes']} (truncated?)")
    if hashlib.sha256(data).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    ghn = GhnModel(GhnConfig(**header["config"]))
    params = dict(ghn.tensors())
    extra = {}
    seen = set()
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.float32))
        name = e["name"]
        if name.startswith("model."):
            key = name[len("model.") :]
            if key not in params or tuple(params[key].shape) != tuple(e["shape"]):
                raise CheckpointError(f"{path}: unexpected tensor {name} {e['shape']}")
            with torch.no_grad():
                params[key].copy_(t)
            seen.add(key)
        else:
            extra[name[len("extra.") :]] = t
    if seen != set(params):
        raise CheckpointError(f"{path}: missing tensors {sorted(set(params) - seen)}")
    return ghn, extra, header["meta"]


def save_ghn(ghn: GhnModel, path) -> str:
    return save_checkpoint(path, ghn)


def load_ghn(path) -> GhnModel:
    return load_checkpoint(path)[0]


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
