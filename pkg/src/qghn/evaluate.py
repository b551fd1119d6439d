"""Accuracy of predicted parameters on test graphs, and summary statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .archspace import GraphError
from .ghn import GhnConfigError, GhnModel, predict_parameters
from .qcnn import NonFiniteActivation, ParamShapeError, forward_cnn
from .quantsim import QuantMode, QuantScheme, QuantizationError

EVAL_BATCH_SIZE = 64


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties are broken toward the lower class index: a class outranks the label
    if its logit is larger, or equal with a smaller index.
    """
    if logits.shape[0] == 0:
        return 0.0
    return float(topk_hits(logits, labels, k).float().mean())


def topk_hits(logits: torch.Tensor, labels: torch.Tensor, k: int) -> torch.Tensor:
    true = logits.gather(1, labels.view(-1, 1))
    idx = torch.arange(logits.shape[1]).view(1, -1)
    ahead = (logits > true) | ((logits == true) & (idx < labels.view(-1, 1)))
    return ahead.sum(dim=1) < k


def eval_scheme_for(scheme: QuantScheme) -> QuantScheme:
    """Evaluation always applies real quantization: noise is a training surrogate."""
    if scheme.mode is QuantMode.NOISEQUANT:
        return scheme.with_mode(QuantMode.SIMQUANT)
    return scheme


@dataclass
class GraphResult:
    graph_id: int
    split: str
    top1: Optional[float]
    top5: Optional[float]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def evaluate_graph(ghn: GhnModel, g, images, labels, scheme: QuantScheme, batch_size=EVAL_BATCH_SIZE, generator=None):
    hits1 = hits5 = 0
    k5 = 5
    with torch.no_grad():
        p = predict_parameters(ghn, g, tuple(images.shape[1:]))
        for i in range(0, images.shape[0], batch_size):
            logits = forward_cnn(g, p, images[i : i + batch_size], scheme, generator)
            y = labels[i : i + batch_size]
            if not torch.isfinite(logits).all():
                raise NonFiniteActivation(-1, g.graph_id)
            hits1 += int(topk_hits(logits, y, 1).sum())
            hits5 += int(topk_hits(logits, y, k5).sum())
    n = images.shape[0]
    return hits1 / n, hits5 / n


def evaluate_split(
    ghn: GhnModel,
    graphs: list,
    dataset,
    scheme: QuantScheme,
    eval_batches: Optional[int] = None,
    batch_size: int = EVAL_BATCH_SIZE,
) -> list:
    """Per-graph top-1/top-5 on the test images (or their first ``eval_batches`` batches).

    Graphs that fail (non-finite activations, shape problems) are kept in
    the result with ``error`` set rather than dropped.
    """
    scheme = eval_scheme_for(scheme)
    x, y = dataset.test_x, dataset.test_y
    if eval_batches is not None:
        x, y = x[: eval_batches * batch_size], y[: eval_batches * batch_size]
    out = []
    for g in graphs:
        try:
            t1, t5 = evaluate_graph(ghn, g, x, y, scheme, batch_size)
            out.append(GraphResult(g.graph_id, g.split.value, t1, t5))
        except (NonFiniteActivation, ParamShapeError, GraphError, GhnConfigError, QuantizationError) as exc:
            out.append(GraphResult(g.graph_id, g.split.value, None, None, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class Stat:
    mean: float
    sem: float
    max: float
    n: int
    single: bool = False


def summarize_values(values) -> Stat:
    """Mean, standard error (n-1 std / sqrt n) and max of accuracies in [0, 1], as percentages."""
    xs = [float(v) for v in values]
    n = len(xs)
    if n == 0:
        raise ValueError("cannot summarize zero values")
    mean = math.fsum(xs) / n
    if n == 1:
        return Stat(100.0 * mean, 0.0, 100.0 * xs[0], 1, single=True)
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    return Stat(100.0 * mean, 100.0 * math.sqrt(var) / math.sqrt(n), 100.0 * max(xs), n)


@dataclass
class EvalEntry:
    """One (row, split) cell pair of the report: top-1 and top-5 stats."""

    row: str
    split: str
    top1: Optional[Stat]
    top5: Optional[Stat]
    n_graphs: int
    n_failed: int
    variant: str = "ok"  # "ok": failures excluded; "all": failures scored 0
    meta: dict = field(default_factory=dict)

    def to_records(self) -> list:
        recs = []
        for metric, st in (("top1", self.top1), ("top5", self.top5)):
            recs.append(
                {
                    "row": self.row,
                    "split": self.split,
                    "metric": metric,
                    "variant": self.variant,
                    "mean": None if st is None else st.mean,
                    "sem": None if st is None else st.sem,
                    "max": None if st is None else st.max,
                    "n": 0 if st is None else st.n,
                    "single": False if st is None else st.single,
                    "n_graphs": self.n_graphs,
                    "n_failed": self.n_failed,
                    **({"meta": self.meta} if self.meta else {}),
                }
            )
        return recs


def summarize(results: list, row: str, split: str, variant: str = "ok") -> EvalEntry:
    ok = [r for r in results if not r.failed]
    failed = len(results) - len(ok)
    if variant == "ok":
        t1 = [r.top1 for r in ok]
        t5 = [r.top5 for r in ok]
    elif variant == "all":
        t1 = [0.0 if r.failed else r.top1 for r in results]
        t5 = [0.0 if r.failed else r.top5 for r in results]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return EvalEntry(
        row,
        split,
        summarize_values(t1) if t1 else None,
        summarize_values(t5) if t5 else None,
        len(results),
        failed,
        variant,
    )
