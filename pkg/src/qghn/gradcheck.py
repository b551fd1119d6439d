"""Central finite-difference checks of analytic gradients (float64, no quantization).

The finite differences only ever call the forward pass; they never touch
autograd, so they are an independent oracle for the backward pass.

ReLU, ReLU6 and max-pooling are piecewise linear. A stencil ``x +- eps``
that straddles a kink measures a blend of two slopes, so each probe is
also evaluated at ``eps / 2``: on a smooth stretch both central differences
agree to O(eps^2), across a kink they do not. Such coordinates are
redrawn and counted in ``kinks``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .archspace import ArchGraph
from .ghn import GhnModel, predict_parameters
from .qcnn import cross_entropy, forward_cnn, loss_and_grad, random_params
from .quantsim import FLOAT_SCHEME

FD_EPS = 1e-3
# relative error is measured against max(|analytic|, |fd|, floor) so that
# coordinates with (near) zero gradient compare on an absolute scale
REL_FLOOR = 1e-6
SMOOTH_TOL = 1e-4


@dataclass
class Probe:
    where: str
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), REL_FLOOR)
        return abs(self.analytic - self.numeric) / denom


@dataclass
class GradReport:
    probes: list = field(default_factory=list)
    kinks: int = 0

    @property
    def worst(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)


def _central(loss: Callable[[], float], flat: torch.Tensor, i: int, eps: float) -> float:
    orig = float(flat[i])
    flat[i] = orig + eps
    up = loss()
    flat[i] = orig - eps
    down = loss()
    flat[i] = orig
    return (up - down) / (2 * eps)


def _probe(loss, flat, i, eps):
    """FD slope at ``flat[i]``, or None when the stencil crosses a kink."""
    full = _central(loss, flat, i, eps)
    half = _central(loss, flat, i, eps / 2)
    if abs(full - half) > SMOOTH_TOL * max(abs(full), abs(half), REL_FLOOR):
        return None
    return full


def _batch(seed: int, input_shape, n: int, classes: int):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((n,) + tuple(input_shape), generator=gen, dtype=torch.float64)
    y = torch.randint(0, classes, (n,), generator=gen)
    return x, y


def _classes(g: ArchGraph) -> int:
    return next(n.attrs["out_channels"] for n in g.nodes if n.op == "Linear")


def check_cnn_gradients(
    g: ArchGraph, seed: int = 0, n_coords: int = 5, input_shape=(3, 16, 16), batch: int = 4, eps: float = FD_EPS
) -> GradReport:
    """Compare ``loss_and_grad`` with central differences at ``n_coords`` random parameter entries."""
    p = random_params(g, seed, input_shape, dtype=torch.float64)
    x, y = _batch(seed + 1, input_shape, batch, _classes(g))
    _, grads = loss_and_grad(g, p, x, y, FLOAT_SCHEME)

    def loss() -> float:
        with torch.no_grad():
            return float(cross_entropy(forward_cnn(g, p, x, FLOAT_SCHEME), y))

    keys = [k for k, _ in p.items()]
    gen = torch.Generator().manual_seed(seed + 2)
    rep = GradReport()
    while len(rep.probes) < n_coords and rep.kinks < 10 * n_coords:
        nid, role = keys[int(torch.randint(len(keys), (1,), generator=gen))]
        t = p.tensors[nid][role]
        i = int(torch.randint(t.numel(), (1,), generator=gen))
        fd = _probe(loss, t.view(-1), i, eps)
        if fd is None:
            rep.kinks += 1
            continue
        rep.probes.append(Probe(f"node {nid} {role}[{i}]", float(grads[nid][role].view(-1)[i]), fd))
    return rep


def check_ghn_gradients(
    ghn: GhnModel, g: ArchGraph, seed: int = 0, n_coords: int = 5, input_shape=(3, 8, 8), batch: int = 4, eps: float = FD_EPS
) -> GradReport:
    """Same check through predict_parameters -> forward_cnn, w.r.t. hypernetwork tensors.

    ``ghn`` should be in float64 (``ghn.double()``).
    """
    x, y = _batch(seed + 1, input_shape, batch, _classes(g))

    def loss_t() -> torch.Tensor:
        return cross_entropy(forward_cnn(g, predict_parameters(ghn, g, input_shape), x, FLOAT_SCHEME), y)

    def loss() -> float:
        return float(loss_t())

    ghn.zero_grad()
    loss_t().backward()
    # sample among entries the graph actually reaches (nonzero gradient)
    live = [(n, t) for n, t in ghn.tensors() if t.grad is not None and t.grad.abs().max() > 0]
    gen = torch.Generator().manual_seed(seed + 2)
    rep = GradReport()
    with torch.no_grad():
        while len(rep.probes) < n_coords and rep.kinks < 10 * n_coords:
            name, t = live[int(torch.randint(len(live), (1,), generator=gen))]
            nz = torch.nonzero(t.grad.view(-1)).view(-1)
            i = int(nz[int(torch.randint(len(nz), (1,), generator=gen))])
            fd = _probe(loss, t.view(-1), i, eps)
            if fd is None:
                rep.kinks += 1
                continue
            rep.probes.append(Probe(f"{name}[{i}]", float(t.grad.view(-1)[i]), fd))
    ghn.zero_grad()
    return rep
