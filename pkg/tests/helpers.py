"""Shared test utilities: random convolution cases and variant execution."""

from __future__ import annotations

import numpy as np

from cuclgen.frontend import ConvParams, conv_graph
from cuclgen.ndarray import DimsSpec
from cuclgen.oracle import compare, tolerance_for
from cuclgen.runner import (
    conv_reduction_terms,
    execute_node,
    node_reference,
    node_test_inputs,
)
from cuclgen.variants import VARIANTS, TuneParams


def random_conv_case(rng: np.random.Generator, max_flops: int = 2_000_000):
    """A small, internally consistent convolution: params + input dims."""
    while True:
        ksz = int(rng.choice([1, 1, 2, 3, 3, 5]))
        stride = int(rng.choice([1, 1, 2]))
        pad = int(rng.integers(0, ksz))
        ic = int(rng.integers(1, 7))
        oc = int(rng.integers(1, 13))
        b = int(rng.integers(1, 3))
        oy = int(rng.integers(1, 7))
        ox = int(rng.integers(1, 7))
        in_y = (oy - 1) * stride + ksz - 2 * pad
        in_x = (ox - 1) * stride + ksz - 2 * pad
        if in_y < 1 or in_x < 1:
            continue
        in_y += int(rng.integers(0, stride))
        in_x += int(rng.integers(0, stride))
        p = ConvParams(ksz=ksz, stride=stride, pad=pad, out_chans=oc)
        flops = 2 * ksz * ksz * ic * oc * oy * ox * b
        if flops <= max_flops:
            dims = DimsSpec.row_major(("img", "chan", "y", "x"), (b, ic, in_y, in_x))
            return p, dims


def random_tile_params(rng: np.random.Generator) -> TuneParams:
    mnt = tuple(int(x) for x in rng.choice([(1, 1), (2, 2), (4, 4), (2, 4), (8, 8)]))
    mnb = tuple(int(x) for x in rng.choice([(2, 2), (4, 4), (8, 8), (16, 16)]))
    kb = int(rng.choice([1, 2, 3, 4]))
    vw_options = [v for v in (1, 2, 4) if mnt[1] % v == 0]
    vw = int(rng.choice(vw_options))
    return TuneParams(
        mnt=mnt,
        mnb=mnb,
        kb=kb,
        vw=vw,
        use_local_filts=bool(rng.integers(0, 2)),
        use_local_in=bool(rng.integers(0, 2)),
    )


def run_conv_variant(p, in_dims, variant_name, params, mode="static", engine="vector", seed="case", fused=None):
    """Build a one-conv graph, run the named variant, and compare to ref_conv.

    Returns (CompareResult, kernel output, reference, CostReport).
    """
    g = conv_graph(p, in_dims)
    node = g.node("conv")
    if fused:
        from dataclasses import replace

        g.nodes = [replace(n, fused_activation=fused) if n.name == "conv" else n for n in g.nodes]
        node = g.node("conv")
    variant = VARIANTS[variant_name]
    reason = variant.applies(node, g.edges, params)
    if reason is not None:
        return None
    inputs = node_test_inputs(node, g.edges, seed)
    got, report = execute_node(node, g.edges, inputs, variant, params, mode, engine=engine)
    ref = node_reference(node, g.edges, inputs)
    res = compare(got, ref, tolerance_for(conv_reduction_terms(node, g.edges)))
    return res, got, ref, report
