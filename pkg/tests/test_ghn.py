import math
import random

import pytest
import torch

from qghn.archspace import ArchGraph, GenConfig, OpNode, Split, add_virtual_edges, infer_shapes, sample_graph
from qghn.ghn import (
    CheckpointError,
    GhnConfig,
    GhnConfigError,
    decode_params,
    encode,
    fit_shape,
    init_ghn,
    load_checkpoint,
    load_ghn,
    paramset_checksum,
    predict_parameters,
    save_checkpoint,
    save_ghn,
)
from qghn.gradcheck import check_ghn_gradients
from qghn.qcnn import fan_in, forward_cnn
from qghn.quantsim import FLOAT_SCHEME, QuantScheme

from conftest import chain_graph, five_node_cnn

CFG = GenConfig(width=(8, 32), wide_width=(48, 96), classes=4)
DEFAULT_PARAM_COUNT = 1_391_168


@pytest.fixture(scope="module")
def ghn():
    return init_ghn(GhnConfig(), seed=0)


def graphs(n, seed0=0):
    return [sample_graph(CFG, list(Split)[i % 5], seed0 + i, graph_id=i) for i in range(n)]


def relabel(g: ArchGraph, rng: random.Random):
    """Same graph with shuffled node ids, listed in a random topological order."""
    ids = [n.id for n in g.nodes]
    new_ids = ids[:]
    rng.shuffle(new_ids)
    remap = dict(zip(ids, new_ids))
    preds = g.predecessors()
    indeg = {u: len(preds[u]) for u in ids}
    succ = g.successors()
    ready = [u for u in ids if indeg[u] == 0]
    order = []
    while ready:
        u = ready.pop(rng.randrange(len(ready)))
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    nodes = [OpNode(remap[u], g.node(u).op, dict(g.node(u).attrs)) for u in order]
    # keep each node's incoming edges in the same relative order (Concat order matters)
    edges = [(remap[s], remap[d]) for s, d in g.edges]
    h = ArchGraph(nodes, edges, [], g.split, g.graph_id, g.seed)
    return add_virtual_edges(h, 10), remap


# -- init ------------------------------------------------------------------------


def test_init_deterministic(ghn):
    assert init_ghn(GhnConfig(), seed=0).checksum() == ghn.checksum()
    assert init_ghn(GhnConfig(), seed=1).checksum() != ghn.checksum()
    assert ghn.num_parameters() == DEFAULT_PARAM_COUNT


@pytest.mark.parametrize(
    "kw", [{"hidden_dim": 0}, {"passes": 0}, {"base_shape": (64, 64, 1, 1)}, {"base_shape": (64, 64, 3)}]
)
def test_bad_config_rejected(kw):
    with pytest.raises(GhnConfigError):
        GhnConfig(**kw)


def test_parameter_order_stable(ghn):
    names = [n for n, _ in ghn.tensors()]
    assert names == [n for n, _ in init_ghn(GhnConfig(), seed=3).tensors()]
    assert names[0] == "embed"


# -- encoder ---------------------------------------------------------------------


def test_single_node_state_is_updated_embedding(ghn):
    g = ArchGraph([OpNode(0, "Input")], [])
    h = encode(ghn, g)
    e = ghn.embed[0:1]
    zero = torch.zeros_like(e)
    expect = ghn.gru(zero, ghn.gru(zero, e))
    assert torch.equal(h, expect)


def test_permutation_equivariance():
    g64 = init_ghn(GhnConfig(hidden_dim=16, base_shape=(16, 16, 3, 3)), seed=2).double()
    rng = random.Random(0)
    for g in graphs(10, seed0=500):
        h, remap = relabel(g, rng)
        assert [n.id for n in h.nodes] != [n.id for n in g.nodes]
        a, b = encode(g64, g), encode(g64, h)
        pos_h = h.position
        for i, n in enumerate(g.nodes):
            assert torch.allclose(a[i], b[pos_h[remap[n.id]]], rtol=0, atol=1e-12)
        # hence the decoded tensors agree node by node
        pa, pb = predict_parameters(g64, g), predict_parameters(g64, h)
        for (nid, role), t in pa.items():
            assert torch.allclose(t, pb.tensors[remap[nid]][role], rtol=0, atol=1e-10)


def test_virtual_edges_change_states(ghn):
    g = chain_graph([("Input", {}), ("ReLU", {}), ("ReLU", {}), ("Output", {})])
    bare = ArchGraph(list(g.nodes), list(g.edges), [], g.split)
    assert g.virtual_edges
    assert not torch.allclose(encode(ghn, g), encode(ghn, bare))


def test_more_passes_change_states():
    g = graphs(1)[0]
    one = init_ghn(GhnConfig(hidden_dim=16, passes=1), 0)
    two = init_ghn(GhnConfig(hidden_dim=16, passes=2), 0)
    assert one.checksum() == two.checksum()
    assert not torch.allclose(encode(one, g), encode(two, g))


# -- tiling and normalization --------------------------------------------------------


def test_fit_shape_identity_tiling_slicing():
    base = torch.randn(64, 64, 3, 3)
    assert fit_shape(base, (64, 64, 3, 3)) is base
    tiled = fit_shape(base, (128, 64, 3, 3))
    assert torch.equal(tiled[64:], tiled[:64]) and torch.equal(tiled[:64], base)
    odd = fit_shape(base, (150, 3, 1, 1))
    assert torch.equal(odd[128:], base[:22, :3, :1, :1])
    assert torch.equal(fit_shape(base, (5, 7, 1, 1)), base[:5, :7, :1, :1])
    wide = fit_shape(torch.arange(4.0), (10,))
    assert wide.tolist() == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]


def test_decoded_tensors_are_normalized(ghn):
    for g in graphs(30):
        p = predict_parameters(ghn, g)
        for (nid, role), t in p.items():
            op = g.node(nid).op
            if role == "weight":
                rms = torch.sqrt(torch.mean(t.double() ** 2)).item()
                assert rms == pytest.approx(math.sqrt(2.0 / fan_in(t.shape)), rel=1e-6), (op, t.shape)
            elif role == "gain":
                assert t.double().mean().item() == pytest.approx(1.0, abs=1e-6)
            else:
                assert t.double().mean().item() == pytest.approx(0.0, abs=1e-6)


def test_base_shape_decode_has_no_tiling(ghn):
    g = chain_graph(
        [
            ("Input", {}),
            ("Conv", {"kernel": 3, "stride": 1, "out_channels": 64}),
            ("Conv", {"kernel": 3, "stride": 1, "out_channels": 64}),
            ("GlobalAvgPool", {}),
            ("Linear", {"out_channels": 4}),
            ("Output", {}),
        ]
    )
    states = encode(ghn, g)
    p = decode_params(ghn, states, g)
    raw = ghn.heads["conv"](states[2]).view(64, 64, 3, 3)
    w = p.tensors[2]["weight"]
    ratio = w / raw
    assert torch.allclose(ratio, ratio.flatten()[0].expand_as(ratio), rtol=1e-5)


def test_kernel_larger_than_base_rejected(ghn):
    g = chain_graph(
        [
            ("Input", {}),
            ("Conv", {"kernel": 5, "stride": 1, "out_channels": 8}),
            ("GlobalAvgPool", {}),
            ("Linear", {"out_channels": 4}),
            ("Output", {}),
        ]
    )
    with pytest.raises(GhnConfigError, match="kernel 5"):
        predict_parameters(ghn, g)


# -- prediction ------------------------------------------------------------------------


def test_prediction_deterministic_and_shaped(ghn):
    a, b = graphs(2)
    pa1, pa2, pb = predict_parameters(ghn, a), predict_parameters(ghn, a), predict_parameters(ghn, b)
    assert paramset_checksum(pa1) == paramset_checksum(pa2)
    pa1.check(a)
    pb.check(b)
    shapes_a = {k: tuple(t.shape) for k, t in pa1.items()}
    shapes_b = {k: tuple(t.shape) for k, t in pb.items()}
    assert shapes_a != shapes_b
    assert shapes_a == {(nid, r): s for nid, ns in infer_shapes(a).items() for r, s in ns.params.items()}


def test_predicted_networks_run_on_many_graphs(ghn):
    x = torch.randn(4, 3, 32, 32)
    with torch.no_grad():
        for g in graphs(100, seed0=10_000):
            p = predict_parameters(ghn, g)
            logits = forward_cnn(g, p, x, QuantScheme(4, 4))
            assert logits.shape == (4, 4) and torch.isfinite(logits).all()


def test_decoded_tensors_finite_on_1000_graphs(ghn):
    cfg = GenConfig(classes=10)
    with torch.no_grad():
        for i in range(1000):
            g = sample_graph(cfg, list(Split)[i % 5], 50_000 + i)
            for _, t in predict_parameters(ghn, g).items():
                assert torch.isfinite(t).all()


def test_composition_gradients_match_finite_differences():
    ghn64 = init_ghn(GhnConfig(hidden_dim=16), seed=0).double()
    rep = check_ghn_gradients(ghn64, five_node_cnn(), seed=0)
    assert len(rep.probes) == 5
    assert rep.worst < 1e-3, rep.probes


def test_float_forward_through_prediction_unquantized(ghn):
    g = graphs(1)[0]
    x = torch.randn(4, 3, 32, 32)
    with torch.no_grad():
        p = predict_parameters(ghn, g)
        assert torch.equal(forward_cnn(g, p, x, FLOAT_SCHEME), forward_cnn(g, p, x, FLOAT_SCHEME))


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip(ghn, tmp_path):
    path = tmp_path / "m.ckpt"
    sha = save_ghn(ghn, path)
    back = load_ghn(path)
    assert back.checksum() == ghn.checksum()
    for g in graphs(5):
        assert paramset_checksum(predict_parameters(back, g)) == paramset_checksum(predict_parameters(ghn, g))
    assert save_ghn(back, tmp_path / "again.ckpt") == sha


def test_checkpoint_extra_tensors_and_meta(ghn, tmp_path):
    path = tmp_path / "m.ckpt"
    extra = {"adam.m.embed": torch.ones(3, 2)}
    save_checkpoint(path, ghn, extra=extra, meta={"epoch": 4})
    _, ex, meta = load_checkpoint(path)
    assert torch.equal(ex["adam.m.embed"], extra["adam.m.embed"]) and meta == {"epoch": 4}


def test_truncated_checkpoint_rejected(ghn, tmp_path):
    path = tmp_path / "m.ckpt"
    save_ghn(ghn, path)
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_ghn(path)
    path.write_bytes(data[:20])
    with pytest.raises(CheckpointError):
        load_ghn(path)


def test_checkpoint_version_mismatch(ghn, tmp_path):
    path = tmp_path / "m.ckpt"
    save_ghn(ghn, path)
    data = path.read_bytes().replace(b'"version":1', b'"version":2', 1)
    path.write_bytes(data)
    with pytest.raises(CheckpointError, match="incompatible"):
        load_ghn(path)


def test_corrupt_checkpoint_rejected(ghn, tmp_path):
    path = tmp_path / "m.ckpt"
    save_ghn(ghn, path)
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_ghn(path)
    path.write_bytes(b"PK\x03\x04" + bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_ghn(path)
