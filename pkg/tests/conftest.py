import pytest
import torch
from hypothesis import settings

from qghn.archspace import ArchGraph, GenConfig, OpNode, add_virtual_edges

torch.set_num_threads(1)
settings.register_profile("default", deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list = []


def build_graph(ops, edges, split="train", s_max=10, graph_id=0):
    """``ops`` is a list of (op, attrs) in topological order; ids are positions."""
    nodes = [OpNode(i, op, dict(attrs)) for i, (op, attrs) in enumerate(ops)]
    g = ArchGraph(nodes, edges, [], split, graph_id, 0)
    return add_virtual_edges(g, s_max)


def chain_graph(ops):
    return build_graph(ops, [(i, i + 1) for i in range(len(ops) - 1)])


def tiny_cnn(classes=10, width=4, k=3, bn=True, act="ReLU"):
    """Input -> Conv -> [BN] -> act -> GAP -> Linear -> Output."""
    ops = [("Input", {}), ("Conv", {"kernel": k, "stride": 1, "out_channels": width})]
    if bn:
        ops.append(("BatchNorm", {}))
    ops += [(act, {}), ("GlobalAvgPool", {}), ("Linear", {"out_channels": classes}), ("Output", {})]
    return chain_graph(ops)


def five_node_cnn(classes=4, width=3):
    return chain_graph(
        [
            ("Input", {}),
            ("Conv", {"kernel": 3, "stride": 1, "out_channels": width}),
            ("GlobalAvgPool", {}),
            ("Linear", {"out_channels": classes}),
            ("Output", {}),
        ]
    )


@pytest.fixture
def small_cfg():
    return GenConfig(
        depth=(6, 10),
        width=(4, 12),
        deep_depth=(12, 18),
        wide_width=(16, 24),
        classes=4,
        counts={"train": 8, "id": 3, "deep": 2, "wide": 2, "bnfree": 3},
        seed=1,
    )


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
