import numpy as np
import pytest

from cuclgen.frontend import (
    KIND_ACT,
    ActParams,
    ComputeGraph,
    ConvParams,
    OpNode,
    parse_net,
)
from cuclgen.graphopt import (
    CycleDetected,
    IncompatibleFormats,
    VariantFormats,
    alloc_plan,
    fuse_activations,
    insert_conversions,
    schedule,
)
from cuclgen.ndarray import DimsSpec

NET_CONV_RELU_POOL = """
input: "data"
input_dim: 1
input_dim: 3
input_dim: 8
input_dim: 8
layer { name: "conv1" type: "Convolution" bottom: "data" top: "c1"
  convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
layer { name: "relu1" type: "ReLU" bottom: "c1" top: "r1" }
layer { name: "pool1" type: "Pooling" bottom: "r1" top: "p1"
  pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
"""


def synth_graph(edges_spec, nodes):
    """Structural graph of Activation nodes for schedule/alloc testing."""
    g = ComputeGraph()
    dims = DimsSpec.row_major(["k"], [4])
    for e in edges_spec:
        g.edges[e] = dims
    for name, ins, outs in nodes:
        g.nodes.append(OpNode(name, KIND_ACT, ActParams(), tuple(ins), tuple(outs)))
    g.recompute_endpoints()
    return g


def test_fuse_conv_relu_pool():
    g = parse_net(NET_CONV_RELU_POOL)
    fused = fuse_activations(g)
    names = [n.name for n in fused.nodes]
    assert "relu1" not in names
    conv = fused.node("conv1")
    assert conv.fused_activation == "relu"
    assert conv.outputs == ("r1",)  # takes over the activation's output edge
    assert "c1" not in fused.edges


def test_fuse_no_activations_is_identity():
    g = parse_net(NET_CONV_RELU_POOL.replace('layer { name: "relu1" type: "ReLU" bottom: "c1" top: "r1" }',
                                             "").replace('bottom: "r1"', 'bottom: "c1"'))
    fused = fuse_activations(g)
    assert [n.name for n in fused.nodes] == [n.name for n in g.nodes]
    assert all(n.fused_activation is None for n in fused.nodes)


def test_fuse_blocked_by_second_consumer():
    text = NET_CONV_RELU_POOL + """
layer { name: "conv2" type: "Convolution" bottom: "c1" top: "c2"
  convolution_param { num_output: 2 kernel_size: 1 } }
"""
    g = parse_net(text)
    fused = fuse_activations(g)
    # c1 feeds both relu1 and conv2: fusing would change what conv2 reads
    assert fused.node("conv1").fused_activation is None
    assert any(n.name == "relu1" for n in fused.nodes)


def test_fuse_blocked_when_edge_is_sink():
    text = """
input: "data"
input_dim: 1
input_dim: 1
input_dim: 4
input_dim: 4
layer { name: "conv1" type: "Convolution" bottom: "data" top: "c1"
  convolution_param { num_output: 1 kernel_size: 1 } }
layer { name: "relu1" type: "ReLU" bottom: "c1" top: "r1" }
"""
    g = parse_net(text)
    g.sinks = ["c1", "r1"]  # caller wants the pre-activation edge too
    fused = fuse_activations(g)
    assert fused.node("conv1").fused_activation is None


def test_schedule_chain_and_diamond():
    g = synth_graph(["e0", "e1", "e2", "e3"], [("a", ["e0"], ["e1"]), ("b", ["e1"], ["e2"]), ("c", ["e2"], ["e3"])])
    assert schedule(g) == ["a", "b", "c"]

    g = synth_graph(
        ["s", "ab", "ac", "bd", "cd", "d_out"],
        [
            ("a", ["s"], ["ab", "ac"]),
            ("b", ["ab"], ["bd"]),
            ("c", ["ac"], ["cd"]),
            ("d", ["bd", "cd"], ["d_out"]),
        ],
    )
    assert schedule(g) == ["a", "b", "c", "d"]  # declaration-order tie-break


def test_schedule_detects_cycle():
    g = synth_graph(["x", "y"], [("a", ["x"], ["y"]), ("b", ["y"], ["x"])])
    with pytest.raises(CycleDetected):
        schedule(g)


def _random_dag(rng, n_nodes):
    edges_spec = [f"src{i}" for i in range(2)] + [f"e{i}" for i in range(n_nodes)]
    nodes = []
    avail = ["src0", "src1"]
    for i in range(n_nodes):
        k = int(rng.integers(1, min(3, len(avail)) + 1))
        ins = list(rng.choice(avail, size=k, replace=False))
        out = f"e{i}"
        nodes.append((f"n{i}", ins, [out]))
        avail.append(out)
    order = list(range(n_nodes))
    rng.shuffle(order)
    return synth_graph(edges_spec, [nodes[i] for i in order])


def test_schedule_random_dags_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(50):
        g = _random_dag(rng, int(rng.integers(1, 13)))
        order = schedule(g)
        assert sorted(order) == sorted(n.name for n in g.nodes)
        pos = {name: i for i, name in enumerate(order)}
        for n in g.nodes:
            for e in n.inputs:
                prod = g.producer_of(e)
                if prod is not None:
                    assert pos[prod.name] < pos[n.name]


def test_alloc_plan_single_conv():
    from cuclgen.frontend import conv_graph

    g = conv_graph(
        ConvParams(ksz=11, stride=4, pad=0, out_chans=96),
        DimsSpec.row_major(("img", "chan", "y", "x"), (5, 3, 227, 227)),
    )
    plan = alloc_plan(g)
    by_edge = {e: n for e, (_, n) in plan.entries.items()}
    assert by_edge["data"] == 772_935
    assert by_edge["conv_filts"] == 34_848
    assert by_edge["conv_bias"] == 96
    assert by_edge["conv_out"] == 1_452_000
    ids = [bid for bid, _ in plan.entries.values()]
    assert len(set(ids)) == len(ids)  # no aliasing


def test_alloc_plan_empty_graph():
    g = ComputeGraph()
    assert alloc_plan(g).entries == {}


def test_alloc_plan_fused_graph_drops_edge():
    g = parse_net(NET_CONV_RELU_POOL)
    before = alloc_plan(g)
    after = alloc_plan(fuse_activations(g))
    assert "c1" in before.entries and "c1" not in after.entries
    assert len(after.entries) == len(before.entries) - 1


def test_insert_conversions_pads_channels():
    g = parse_net(NET_CONV_RELU_POOL)
    filts = g.edges["conv1_filts"]
    want = DimsSpec.row_major(("in_chan", "y", "x", "out_chan"), (3, 3, 3, 8))
    g2 = insert_conversions(g, {"conv1": VariantFormats(inputs={"conv1_filts": want}, output=None)})
    conv = g2.node("conv1")
    assert conv.inputs[1] == "conv1_filts__for_conv1"
    assert g2.edges[conv.inputs[1]] == want
    assert g2.edges["conv1_filts"] == filts  # original edge intact
    cv = g2.node("conv1__cv_in1")
    assert cv.inputs == ("conv1_filts",)


def test_insert_conversions_canonical_noop():
    g = parse_net(NET_CONV_RELU_POOL)
    g2 = insert_conversions(g, {"conv1": VariantFormats(inputs={}, output=None)})
    assert [n.name for n in g2.nodes] == [n.name for n in g.nodes]


def test_insert_conversions_two_consumers_two_nodes():
    text = NET_CONV_RELU_POOL + """
layer { name: "conv2" type: "Convolution" bottom: "c1" top: "c2"
  convolution_param { num_output: 2 kernel_size: 1 } }
layer { name: "conv3" type: "Convolution" bottom: "c1" top: "c3"
  convolution_param { num_output: 2 kernel_size: 1 } }
"""
    g = parse_net(text)
    fmt_a = DimsSpec.row_major(("img", "y", "x", "chan"), (1, 8, 8, 8))
    fmt_b = DimsSpec.row_major(("chan", "img", "y", "x"), (4, 1, 8, 8))
    g2 = insert_conversions(
        g,
        {
            "conv2": VariantFormats(inputs={"c1": fmt_a}, output=None),
            "conv3": VariantFormats(inputs={"c1": fmt_b}, output=None),
        },
    )
    assert g2.edges["c1__for_conv2"] == fmt_a
    assert g2.edges["c1__for_conv3"] == fmt_b


def test_insert_conversions_incompatible_names():
    g = parse_net(NET_CONV_RELU_POOL)
    bad = DimsSpec.row_major(("weird", "names"), (1, 1))
    with pytest.raises(IncompatibleFormats):
        insert_conversions(g, {"conv1": VariantFormats(inputs={"conv1_filts": bad}, output=None)})
