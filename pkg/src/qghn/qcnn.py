"""Run an ArchGraph as a CNN with simulated quantization.

Quantization points:

* weights of Conv / DWConv / Linear go through the weight quantizer;
* a node's output goes through the activation quantizer once, unless every
  consumer is a BatchNorm or an activation (the fused conv-bn-relu chain is
  quantized after the activation), or the node is Input, Linear (logits)
  or Output.

BatchNorm always normalizes with the statistics of the current batch, in
training and evaluation alike: predicted networks have no running stats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .archspace import ACTIVATIONS, ArchGraph, infer_shapes
from .quantsim import QuantMode, QuantScheme, fake_quant, noise_quant

BN_EPS = 1e-5


class NonFiniteActivation(FloatingPointError):
    def __init__(self, node_id: int, graph_id: Optional[int] = None):
        self.node_id = node_id
        self.graph_id = graph_id
        where = f"graph {graph_id} " if graph_id is not None else ""
        super().__init__(f"{where}node {node_id}: non-finite activation")


class ParamShapeError(ValueError):
    pass


@dataclass
class ParamSet:
    """Parameter tensors keyed by node id, then role ("weight", "gain", "bias")."""

    tensors: dict
    source: str = "predicted"
    meta: dict = field(default_factory=dict)

    def items(self):
        for nid in sorted(self.tensors):
            for role in sorted(self.tensors[nid]):
                yield (nid, role), self.tensors[nid][role]

    def numel(self) -> int:
        return sum(t.numel() for _, t in self.items())

    def check(self, g: ArchGraph, input_shape=(3, 32, 32)) -> None:
        shapes = infer_shapes(g, input_shape)
        expected = {nid: s.params for nid, s in shapes.items() if s.params}
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            orphan = sorted(set(self.tensors) - set(expected))
            raise ParamShapeError(f"param nodes mismatch: missing {missing}, orphan {orphan}")
        for nid, roles in expected.items():
            got = self.tensors[nid]
            if set(got) != set(roles):
                raise ParamShapeError(f"node {nid}: roles {sorted(got)} != {sorted(roles)}")
            for role, shape in roles.items():
                if tuple(got[role].shape) != tuple(shape):
                    raise ParamShapeError(
                        f"node {nid} {role}: shape {tuple(got[role].shape)} != {tuple(shape)}"
                    )


def fan_in(shape) -> int:
    return int(math.prod(shape[1:]))


def random_params(g: ArchGraph, seed: int, input_shape=(3, 32, 32), dtype=torch.float32) -> ParamSet:
    """He-normal weights, unit BN gain and zero bias."""
    gen = torch.Generator().manual_seed(seed)
    tensors = {}
    for nid, s in infer_shapes(g, input_shape).items():
        if not s.params:
            continue
        roles = {}
        for role, shape in s.params.items():
            if role == "weight":
                std = math.sqrt(2.0 / fan_in(shape))
                roles[role] = torch.randn(shape, generator=gen, dtype=dtype) * std
            elif role == "gain":
                roles[role] = torch.ones(shape, dtype=dtype)
            else:
                roles[role] = torch.zeros(shape, dtype=dtype)
        tensors[nid] = roles
    return ParamSet(tensors, source="random")


def activation_quant_points(g: ArchGraph) -> set:
    succ = g.successors()
    fused = {"BatchNorm", *ACTIVATIONS}
    points = set()
    for n in g.nodes:
        if n.op in ("Input", "Linear", "Output"):
            continue
        consumers = [g.node(s).op for s in succ[n.id]]
        if consumers and all(op in fused for op in consumers):
            continue
        points.add(n.id)
    return points


class _Quantizer:
    def __init__(self, scheme: QuantScheme, generator: Optional[torch.Generator]):
        self.scheme = scheme
        self.generator = generator

    def _apply(self, x, bits):
        mode = self.scheme.mode
        if mode is QuantMode.SIMQUANT:
            return fake_quant(x, bits)
        if mode is QuantMode.NOISEQUANT:
            return noise_quant(x, bits, self.generator)
        return x

    def weight(self, w):
        return self._apply(w, self.scheme.weight_bits)

    def act(self, x):
        return self._apply(x, self.scheme.act_bits)


def forward_cnn(
    g: ArchGraph,
    p: ParamSet,
    batch: torch.Tensor,
    scheme: QuantScheme,
    generator: Optional[torch.Generator] = None,
    trace: Optional[dict] = None,
) -> torch.Tensor:
    """Logits ``(N, classes)`` of ``g`` run with parameters ``p``.

    If ``trace`` is a dict it is filled with each node's (detached) output
    and the set of activation quantization points under key ``"qpoints"``.
    """
    p.check(g, tuple(batch.shape[1:]))
    preds = g.predecessors()
    qpoints = activation_quant_points(g)
    q = _Quantizer(scheme, generator)
    outs: dict = {}
    for n in g.nodes:
        a = n.attrs
        ins = [outs[s] for s in preds[n.id]]
        try:
            prm = p.tensors.get(n.id)
            if n.op == "Input":
                y = batch
            elif n.op == "Conv":
                k = a["kernel"]
                y = F.conv2d(ins[0], q.weight(prm["weight"]), stride=a["stride"], padding=k // 2)
            elif n.op == "DWConv":
                k = a["kernel"]
                y = F.conv2d(
                    ins[0], q.weight(prm["weight"]), stride=a["stride"], padding=k // 2, groups=ins[0].shape[1]
                )
            elif n.op == "BatchNorm":
                y = F.batch_norm(ins[0], None, None, prm["gain"], prm["bias"], training=True, eps=BN_EPS)
            elif n.op == "ReLU":
                y = F.relu(ins[0])
            elif n.op == "ReLU6":
                y = F.relu6(ins[0])
            elif n.op == "MaxPool":
                k = a.get("kernel", 3)
                y = F.max_pool2d(ins[0], k, a.get("stride", 2), padding=k // 2)
            elif n.op == "AvgPool":
                k = a.get("kernel", 3)
                y = F.avg_pool2d(ins[0], k, a.get("stride", 2), padding=k // 2, count_include_pad=False)
            elif n.op == "GlobalAvgPool":
                y = ins[0].mean(dim=(2, 3), keepdim=True)
            elif n.op == "Add":
                y = ins[0]
                for t in ins[1:]:
                    y = y + t
            elif n.op == "Concat":
                y = torch.cat(ins, dim=1)
            elif n.op == "Linear":
                y = ins[0].flatten(1) @ q.weight(prm["weight"]).t()
            elif n.op == "Output":
                y = ins[0]
            else:  # pragma: no cover - OpNode rejects unknown ops
                raise ValueError(n.op)
        except (RuntimeError, KeyError, TypeError) as exc:
            raise ParamShapeError(f"node {n.id} ({n.op}): {exc}") from exc
        if not torch.isfinite(y).all():
            raise NonFiniteActivation(n.id, g.graph_id)
        if n.id in qpoints:
            y = q.act(y)
        outs[n.id] = y
        if trace is not None:
            trace[n.id] = y.detach()
    if trace is not None:
        trace["qpoints"] = qpoints
    return outs[_output_id(g)]


def _output_id(g: ArchGraph) -> int:
    return next(n.id for n in g.nodes if n.op == "Output")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="mean")


def loss_and_grad(g, p: ParamSet, batch, labels, scheme: QuantScheme, generator=None):
    """Mean cross-entropy and its gradient w.r.t. every tensor of ``p``.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``p.tensors``.
    """
    leaves = {
        nid: {role: t.detach().clone().requires_grad_(True) for role, t in roles.items()}
        for nid, roles in p.tensors.items()
    }
    loss = cross_entropy(forward_cnn(g, ParamSet(leaves, p.source), batch, scheme, generator), labels)
    flat = [t for _, t in ParamSet(leaves).items()]
    grads = torch.autograd.grad(loss, flat, allow_unused=True)
    out: dict = {}
    for ((nid, role), t), gr in zip(ParamSet(leaves).items(), grads):
        out.setdefault(nid, {})[role] = torch.zeros_like(t) if gr is None else gr
    return float(loss.detach()), out
