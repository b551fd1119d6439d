"""Bitwidth-specific quantization-aware training of the hypernetwork.

Each step predicts parameters for a meta-batch of graphs, runs every
predicted CNN under the run's quantization scheme on one image batch,
averages the cross-entropies and takes one Adam step on the GHN. The GHN
itself always runs in float; only the predicted CNNs are quantized.

All randomness (graph order, image order, quantization noise) is derived
from ``(seed, epoch, step)``, so a run resumed from an epoch checkpoint
follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .archspace import ArchGraph
from .data import ImageDataset
from .ghn import GhnModel, load_checkpoint, predict_parameters, save_checkpoint
from .qcnn import NonFiniteActivation, cross_entropy, forward_cnn
from .quantsim import QuantMode, QuantScheme

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, train_log: "TrainLog"):
        super().__init__(msg)
        self.train_log = train_log


@dataclass
class TrainConfig:
    scheme: QuantScheme
    epochs: int = 10
    meta_batch: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 1
    max_nan_steps: int = 3
    allow_unstable: bool = False

    def __post_init__(self):
        if isinstance(self.scheme, dict):
            self.scheme = QuantScheme.from_dict(self.scheme)
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if self.epochs < 0 or self.meta_batch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, meta_batch >= 1 and batch_size >= 1 required")
        s = self.scheme
        if s.mode is QuantMode.SIMQUANT and min(s.weight_bits, s.act_bits) <= 2 and not self.allow_unstable:
            raise ValueError(
                f"SimQuant at {s.label} is known to be unstable; use NoiseQuant or set allow_unstable"
            )

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "epochs": self.epochs,
            "meta_batch": self.meta_batch,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "max_nan_steps": self.max_nan_steps,
            "allow_unstable": self.allow_unstable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with bias correction over a fixed, ordered list of tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)  # (name, tensor)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m.mul_(self.b1).add_(g, alpha=1 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))

    def state_tensors(self) -> dict:
        out = {f"adam.m.{n}": t for n, t in self.m.items()}
        out.update({f"adam.v.{n}": t for n, t in self.v.items()})
        return out

    def load_state(self, tensors: dict, t: int) -> None:
        self.t = t
        for n in self.m:
            self.m[n].copy_(tensors[f"adam.m.{n}"])
            self.v[n].copy_(tensors[f"adam.v.{n}"])


def clip_grad_norm(grads: dict, max_norm: float) -> tuple:
    """Scale ``grads`` in place to global L2 norm <= ``max_norm``; returns (norm, clipped)."""
    total = math.sqrt(sum(float(torch.sum(g.double() ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
        return total, True
    return total, False


@dataclass
class StepResult:
    loss: float
    grad_norm: float = float("nan")
    clipped: bool = False
    failed: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def train_step(
    ghn: GhnModel,
    opt: Adam,
    graphs: list,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    generator: Optional[torch.Generator] = None,
) -> StepResult:
    """One optimizer update from the mean cross-entropy over ``graphs``.

    Graphs whose forward produces a non-finite activation or loss are
    reported in ``failed`` and the update is skipped.
    """
    for p in ghn.parameters():
        p.grad = None
    losses, failed = [], []
    for g in graphs:
        try:
            logits = forward_cnn(g, predict_parameters(ghn, g, tuple(images.shape[1:])), images, cfg.scheme, generator)
            loss = cross_entropy(logits, labels)
        except NonFiniteActivation:
            failed.append(g.graph_id)
            continue
        if not torch.isfinite(loss):
            failed.append(g.graph_id)
            continue
        (loss / len(graphs)).backward()
        losses.append(float(loss.detach()))
    if failed:
        for p in ghn.parameters():
            p.grad = None
        return StepResult(float("nan"), failed=failed)
    grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in ghn.tensors()}
    norm, clipped = clip_grad_norm(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        return StepResult(float("nan"), norm, failed=[g.graph_id for g in graphs])
    opt.step(grads)
    for p in ghn.parameters():
        p.grad = None
    return StepResult(float(np.mean(losses)), norm, clipped)


@dataclass
class TrainLog:
    """Append-only training records; one JSON object per line on disk."""

    scheme: Optional[QuantScheme] = None
    records: list = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def steps(self) -> list:
        return [r for r in self.records if r["kind"] == "step"]

    def epochs(self) -> list:
        return [r for r in self.records if r["kind"] == "epoch"]

    def losses(self) -> list:
        return [r["loss"] for r in self.steps()]

    def summary(self) -> dict:
        steps = self.steps()
        ep = [r["mean_loss"] for r in self.epochs()]
        nan_steps = sum(1 for r in steps if r["failed"])
        finite = [x for x in ep if x is not None and math.isfinite(x)]
        return {
            "scheme": self.scheme.label if self.scheme else None,
            "mode": self.scheme.mode.value if self.scheme else None,
            "steps": len(steps),
            "nan_steps": nan_steps,
            "aborted": any(r["kind"] == "abort" for r in self.records),
            "first_epoch_loss": finite[0] if finite else None,
            "last_epoch_loss": finite[-1] if finite else None,
            "loss_decreased": bool(len(finite) >= 2 and finite[-1] < finite[0]),
        }

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "header", "scheme": self.scheme.to_dict() if self.scheme else None}) + "\n")
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path) as f:
            lines = [json.loads(x) for x in f if x.strip()]
        head = lines[0]
        scheme = QuantScheme.from_dict(head["scheme"]) if head.get("scheme") else None
        return cls(scheme, lines[1:])


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0] >> 1)


def _image_batch(data: ImageDataset, order: np.ndarray, step: int, size: int):
    n = len(order)
    idx = order[(np.arange(size) + step * size) % n]
    idx_t = torch.from_numpy(idx)
    return data.train_x.index_select(0, idx_t), data.train_y.index_select(0, idx_t)


def _save(path, ghn, opt, cfg, epoch, step, train_log, extra_meta):
    meta = {
        "scheme": cfg.scheme.to_dict(),
        "train_config": cfg.to_dict(),
        "train_state": {"epoch": epoch, "global_step": step, "adam_t": opt.t},
        "train_summary": train_log.summary(),
        "train_records": [{k: v for k, v in r.items() if k != "wall_time"} for r in train_log.records],
        **(extra_meta or {}),
    }
    return save_checkpoint(path, ghn, extra=opt.state_tensors(), meta=meta)


def qat_finetune(
    ghn: GhnModel,
    graphs: list,
    data: ImageDataset,
    cfg: TrainConfig,
    ckpt_path=None,
    resume_from=None,
    extra_meta: Optional[dict] = None,
    on_epoch: Optional[Callable[[int, GhnModel], Optional[dict]]] = None,
) -> tuple:
    """Train ``ghn`` on ``graphs`` (the training split) for ``cfg.epochs`` epochs.

    Returns ``(ghn, train_log)``. When ``resume_from`` names a checkpoint the
    model, optimizer state and epoch counter are restored from it and
    training continues from the next epoch. ``on_epoch`` may return a dict
    that is stored as the epoch's eval snapshot.
    """
    cfg.validate()
    if not graphs and cfg.epochs:
        raise ValueError("no training graphs")
    train_log = TrainLog(cfg.scheme)
    opt = Adam(ghn.tensors(), cfg.lr, cfg.betas, cfg.eps)
    start_epoch, global_step = 0, 0
    if resume_from is not None:
        loaded, extra, meta = load_checkpoint(resume_from)
        if QuantScheme.from_dict(meta["scheme"]) != cfg.scheme:
            raise ValueError("resume checkpoint was trained with a different scheme")
        with torch.no_grad():
            for (_, p), (_, q) in zip(ghn.tensors(), loaded.tensors()):
                p.copy_(q)
        st = meta["train_state"]
        opt.load_state(extra, st["adam_t"])
        start_epoch, global_step = st["epoch"], st["global_step"]
        train_log.records = list(meta.get("train_records", []))

    n_graphs = len(graphs)
    steps_per_epoch = max(1, n_graphs // cfg.meta_batch)
    consecutive_nan = 0
    shape = tuple(data.train_x.shape[1:])
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(_derive_seed(cfg.seed, epoch, 0)).permutation(n_graphs)
        img_order = np.random.default_rng(_derive_seed(cfg.seed, epoch, 1)).permutation(data.train_x.shape[0])
        ep_losses, ep_failed = [], 0
        for j in range(steps_per_epoch):
            members = [graphs[i] for i in order[j * cfg.meta_batch : (j + 1) * cfg.meta_batch]]
            x, y = _image_batch(data, img_order, j, cfg.batch_size)
            gen = torch.Generator().manual_seed(_derive_seed(cfg.seed, epoch, j, 2))
            t0 = time.perf_counter()
            res = train_step(ghn, opt, members, x, y, cfg, gen)
            train_log.append(
                {
                    "kind": "step",
                    "epoch": epoch,
                    "step": global_step,
                    "loss": res.loss if res.ok else None,
                    "grad_norm": res.grad_norm if math.isfinite(res.grad_norm) else None,
                    "clipped": res.clipped,
                    "failed": res.failed,
                    "wall_time": time.perf_counter() - t0,
                }
            )
            global_step += 1
            if res.ok:
                consecutive_nan = 0
                ep_losses.append(res.loss)
            else:
                ep_failed += 1
                consecutive_nan += 1
                log.warning("step %d aborted: non-finite loss for graphs %s", global_step - 1, res.failed)
                if consecutive_nan > cfg.max_nan_steps:
                    train_log.append(
                        {
                            "kind": "abort",
                            "epoch": epoch,
                            "step": global_step - 1,
                            "reason": f"{consecutive_nan} consecutive non-finite steps",
                            "graphs": res.failed,
                        }
                    )
                    if ckpt_path is not None:
                        _save(ckpt_path, ghn, opt, cfg, epoch, global_step, train_log, extra_meta)
                    raise TrainingDiverged(
                        f"aborted at step {global_step - 1}: {consecutive_nan} consecutive non-finite steps "
                        f"(last graphs {res.failed})",
                        train_log,
                    )
        rec = {
            "kind": "epoch",
            "epoch": epoch,
            "mean_loss": float(np.mean(ep_losses)) if ep_losses else None,
            "failed_steps": ep_failed,
            "eval": None,
        }
        if on_epoch is not None:
            rec["eval"] = on_epoch(epoch, ghn)
        train_log.append(rec)
        log.info("epoch %d: mean loss %s (%d failed steps)", epoch, rec["mean_loss"], ep_failed)
        done = epoch + 1
        if ckpt_path is not None and (done % max(1, cfg.checkpoint_every) == 0 or done == cfg.epochs):
            _save(ckpt_path, ghn, opt, cfg, done, global_step, train_log, extra_meta)
    return ghn, train_log
