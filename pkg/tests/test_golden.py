"""Emitted source must match the reviewed golden files byte for byte."""

import os

import pytest

from cuclgen.backend import emit_source
from cuclgen.cucl import CUDA, DYNAMIC, OPENCL, STATIC
from cuclgen.frontend import KIND_CONVERT, ConvParams, ConvertParams, OpNode, conv_graph, parse_net
from cuclgen.ndarray import DimsSpec
from cuclgen.variants import DEFAULT_TUNE, VARIANTS, TuneParams

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def golden(name: str) -> str:
    with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8") as f:
        return f.read()


def first_layer_conv():
    g = conv_graph(
        ConvParams(ksz=11, stride=4, pad=0, out_chans=96),
        DimsSpec.row_major(("img", "chan", "y", "x"), (5, 3, 227, 227)),
    )
    return g.node("conv"), g.edges


@pytest.mark.parametrize("dialect,fname", [(OPENCL, "conv_simple_first_layer.opencl.c"), (CUDA, "conv_simple_first_layer.cuda.c")])
def test_conv_simple_first_layer(dialect, fname):
    node, edges = first_layer_conv()
    inst = VARIANTS["conv_simple"].generate(node, edges, DEFAULT_TUNE, STATIC)
    text = emit_source(inst, dialect)
    assert text == golden(fname)
    if dialect == OPENCL:
        assert "get_local_id(0)" in text and "55" in text


def test_conv_simple_dynamic_has_meta_no_spatial_constants():
    node, edges = first_layer_conv()
    inst = VARIANTS["conv_simple"].generate(node, edges, DEFAULT_TUNE, DYNAMIC)
    text = emit_source(inst, OPENCL)
    assert text == golden("conv_simple_first_layer_dynamic.opencl.c")
    assert "meta->" in text
    for spatial in ("227", "3025", "290400", "55"):
        assert spatial not in text.replace("b5_ic3_y227_x227", "")


@pytest.mark.parametrize("dialect,fname", [(OPENCL, "conv_tiled_3x3.opencl.c"), (CUDA, "conv_tiled_3x3.cuda.c")])
def test_conv_tiled_golden(dialect, fname):
    g = conv_graph(
        ConvParams(ksz=3, stride=1, pad=1, out_chans=16),
        DimsSpec.row_major(("img", "chan", "y", "x"), (1, 8, 14, 14)),
    )
    t = TuneParams(mnt=(2, 2), mnb=(4, 4), kb=2, vw=2, use_local_filts=True, use_local_in=True)
    inst = VARIANTS["conv_tiled"].generate(g.node("conv"), g.edges, t, STATIC)
    assert emit_source(inst, dialect) == golden(fname)


def test_conv_fc_golden():
    g = conv_graph(ConvParams(ksz=6, out_chans=64), DimsSpec.row_major(("img", "chan", "y", "x"), (5, 32, 6, 6)))
    inst = VARIANTS["conv_fc"].generate(g.node("conv"), g.edges, DEFAULT_TUNE, STATIC)
    assert emit_source(inst, OPENCL) == golden("conv_fc.opencl.c")


def test_conv_1x1_golden():
    g = conv_graph(ConvParams(ksz=1, out_chans=32), DimsSpec.row_major(("img", "chan", "y", "x"), (1, 64, 7, 7)))
    inst = VARIANTS["conv_1x1"].generate(g.node("conv"), g.edges, DEFAULT_TUNE, STATIC)
    assert emit_source(inst, OPENCL) == golden("conv_1x1.opencl.c")


def test_pool_activation_xpose_goldens():
    g = parse_net(
        'input: "data"\ninput_dim: 1\ninput_dim: 4\ninput_dim: 8\ninput_dim: 8\n'
        'layer { name: "p" type: "Pooling" bottom: "data" top: "o" '
        "pooling_param { pool: MAX kernel_size: 3 stride: 2 } }"
    )
    inst = VARIANTS["pool_max"].generate(g.node("p"), g.edges, DEFAULT_TUNE, STATIC)
    assert emit_source(inst, OPENCL) == golden("pool_max.opencl.c")

    g = parse_net(
        'input: "data"\ninput_dim: 1\ninput_dim: 4\ninput_dim: 8\ninput_dim: 8\n'
        'layer { name: "r" type: "ReLU" bottom: "data" top: "o" }'
    )
    inst = VARIANTS["activation"].generate(g.node("r"), g.edges, DEFAULT_TUNE, STATIC)
    assert emit_source(inst, OPENCL) == golden("activation.opencl.c")

    src_spec = DimsSpec.row_major(("out_chan", "in_chan", "y", "x"), (16, 8, 3, 3))
    dst_spec = DimsSpec.row_major(("in_chan", "y", "x", "out_chan"), (8, 3, 3, 32))
    cvn = OpNode("cv", KIND_CONVERT, ConvertParams(dst_spec), ("a",), ("b",))
    inst = VARIANTS["xpose"].generate(cvn, {"a": src_spec, "b": dst_spec}, DEFAULT_TUNE, STATIC)
    assert emit_source(inst, OPENCL) == golden("xpose_pad_transpose.opencl.c")
