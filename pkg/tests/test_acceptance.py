"""Acceptance suite: one test per exit criterion, each printing a PASS line
and enforcing its runtime budget.  The per-criterion lines bypass pytest's
capture so they show up in any run.
"""

import sys
import time

import numpy as np
import pytest

from helpers import random_conv_case, random_tile_params, run_conv_variant

from cuclgen import runner, tuner
from cuclgen.backend import LaunchConfig, cost, run_kernel, static_cost_report
from cuclgen.cli import main
from cuclgen.corpus import corpus
from cuclgen.cucl import (
    CUDA,
    DYNAMIC,
    OPENCL,
    STATIC,
    dialect_segments,
    instantiate,
    parse_kernel,
    render_dialect,
    render_segment,
    unrender_dialect,
)
from cuclgen.frontend import ConvParams, conv_graph, flops_of, parse_net, window_out
from cuclgen.graphopt import alloc_plan, schedule
from cuclgen.ndarray import DimsSpec, make_nda
from cuclgen.oracle import ToleranceSpec, compare
from cuclgen.variants import DEFAULT_TUNE, VARIANTS, CoopLoadSpec, TuneParams, gen_coop_load


class Budget:
    """Times a criterion, prints its PASS/FAIL line past pytest's capture,
    and enforces the runtime budget."""

    def __init__(self, number, name, seconds, capsys=None):
        self.number = number
        self.name = name
        self.seconds = seconds
        self.capsys = capsys

    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, exc_type, *rest):
        elapsed = time.time() - self.t0
        status = "PASS" if exc_type is None else "FAIL"
        line = f"ACCEPTANCE {self.number} {self.name}: {status} ({elapsed:.1f}s / {self.seconds}s budget)"
        if self.capsys is not None:
            with self.capsys.disabled():
                print(f"\n{line}", flush=True)
        else:
            print(f"\n{line}", file=sys.__stdout__, flush=True)
        if exc_type is None:
            assert elapsed < self.seconds, f"criterion {self.number} exceeded its {self.seconds}s budget"
        return False


# -- criterion 1: benchmark-table fidelity ------------------------------------


def test_criterion_1_table_fidelity(capsys):
    with Budget(1, "benchmark-table fidelity", 1.0, capsys):
        ops = corpus()
        assert len(ops) == 43
        for op in ops:
            assert window_out(op.in_y, op.ksz, op.stride, op.pad) == op.out_y
            assert window_out(op.in_x, op.ksz, op.stride, op.pad) == op.out_x
            g = op.graph()
            assert g.edges["conv_out"].sizes == (op.batch, op.out_chans, op.out_y, op.out_x)
        # FLOP counts match the published values to 6 significant figures for
        # every row whose published value is self-consistent (42 of 43); the
        # one exception is pinned by the strict xfail test below
        assert f"{ops[0].flops_computed:.6g}" == "1.00352e+08"
        for i, op in enumerate(ops):
            if i == 25:
                continue
            g = op.graph()
            assert f"{flops_of(g.node('conv'), g.edges).value:.6g}" == op.flops_published


@pytest.mark.xfail(
    strict=True,
    reason="published value for the 6x6/4096-chan fully-connected row is 10x the "
    "table's own FLOP accounting (the row above lists the identical product at "
    "the consistent magnitude); kept as an expected failure rather than faking "
    "the computation -- see notes in the corpus module docstring",
)
def test_criterion_1_fc_row_published_value():
    op = corpus()[25]
    g = op.graph()
    assert f"{flops_of(g.node('conv'), g.edges).value:.6g}" == op.flops_published  # 3.77487e+09


# -- criterion 2: cooperative-load exactness -----------------------------------

PAPER_EXPANSION_96_OF_256 = [
    "filts_buf[0+thread_id] = filts[thread_id];",
    "filts_buf[96+thread_id] = filts[96+thread_id];",
    "if(192+thread_id<256){ filts_buf[192+thread_id] = filts[192+thread_id]; }",
]


def _no_ws(s):
    return "".join(s.split())


def test_criterion_2_coop_load_exactness(capsys):
    with Budget(2, "cooperative-load exactness", 5.0, capsys):
        stmts = gen_coop_load(CoopLoadSpec(words=256, threads=96, src="filts", dst="filts_buf"))
        assert len(stmts) == 3
        for got, want in zip(stmts, PAPER_EXPANSION_96_OF_256):
            assert _no_ws(got) == _no_ws(want)
        assert "192+thread_id<256" in stmts[2]

        stmts64 = gen_coop_load(CoopLoadSpec(words=256, threads=64, src="filts", dst="filts_buf"))
        assert len(stmts64) == 4 and all("if(" not in s for s in stmts64)

        # exhaustive coverage: executed on the simulated backend, every dst
        # offset in [0, W) is written exactly once
        for words in range(1, 33):
            for threads in range(1, 33):
                stmts = gen_coop_load(CoopLoadSpec(words=words, threads=threads, src="src", dst="dst"))
                src = (
                    "KERNEL_QUAL void k( GLOBAL_MEM float const* src, GLOBAL_MEM float* dst ) {\n"
                    "  int thread_id = LOCAL_ID_1D;\n  " + "\n  ".join(stmts) + "\n}"
                )
                data = make_nda(["k"], [words])
                data.elems[:] = np.arange(1, words + 1, dtype=np.float32)
                out = make_nda(["k"], [words])
                _, rep = run_kernel(parse_kernel(src), LaunchConfig(1, threads), {"src": data, "dst": out})
                assert rep.global_stores == words  # each offset stored once
                assert np.array_equal(out.elems, data.elems)


# -- criterion 3: oracle equivalence -------------------------------------------


def test_criterion_3_oracle_equivalence(capsys):
    with Budget(3, "oracle equivalence", 300.0, capsys):
        rng = np.random.default_rng(777)
        cases = 0
        while cases < 200:
            p, dims = random_conv_case(rng, max_flops=2_000_000)
            r = run_conv_variant(p, dims, "conv_simple", DEFAULT_TUNE, seed=f"acc3:{cases}")
            assert r[0].ok, (p, dims.sizes, r[0])
            t = random_tile_params(rng)
            rt = run_conv_variant(p, dims, "conv_tiled", t, seed=f"acc3:{cases}")
            if rt is not None:
                assert rt[0].ok, (p, dims.sizes, t.to_string(), rt[0])
            for name in ("conv_1x1", "conv_fc"):
                rv = run_conv_variant(p, dims, name, DEFAULT_TUNE, seed=f"acc3:{cases}")
                if rv is not None:
                    assert rv[0].ok, (p, dims.sizes, name, rv[0])
            cases += 1

        # the downscaled benchmark corpus, every applicable variant
        for i, op in enumerate(corpus()):
            p2, in2 = tuner.downscale_conv(op.conv_params, op.input_dims, 2_000_000)
            for name in ("conv_simple", "conv_tiled", "conv_1x1", "conv_fc"):
                params = TuneParams(mnt=(4, 4), mnb=(8, 8), kb=4, vw=4) if name == "conv_tiled" else DEFAULT_TUNE
                r = run_conv_variant(p2, in2, name, params, seed=f"acc3c:{i}")
                if r is not None:
                    assert r[0].ok, (i, name, p2, in2.sizes, r[0])


# -- criterion 4: programming-model portability ---------------------------------


def _representative_instantiations():
    insts = []
    g = conv_graph(
        ConvParams(ksz=3, stride=1, pad=1, out_chans=8), DimsSpec.row_major(("img", "chan", "y", "x"), (1, 4, 6, 6))
    )
    node = g.node("conv")
    insts.append(("conv_simple", VARIANTS["conv_simple"].generate(node, g.edges, DEFAULT_TUNE, STATIC)))
    t = TuneParams(mnt=(2, 2), mnb=(4, 4), kb=2, vw=2, use_local_filts=True, use_local_in=True)
    insts.append(("conv_tiled", VARIANTS["conv_tiled"].generate(node, g.edges, t, STATIC)))
    g1 = conv_graph(ConvParams(ksz=1, out_chans=8), DimsSpec.row_major(("img", "chan", "y", "x"), (1, 4, 5, 5)))
    insts.append(("conv_1x1", VARIANTS["conv_1x1"].generate(g1.node("conv"), g1.edges, DEFAULT_TUNE, STATIC)))
    gf = conv_graph(ConvParams(ksz=5, out_chans=8), DimsSpec.row_major(("img", "chan", "y", "x"), (2, 4, 5, 5)))
    insts.append(("conv_fc", VARIANTS["conv_fc"].generate(gf.node("conv"), gf.edges, DEFAULT_TUNE, STATIC)))
    gp = parse_net(
        'input: "data"\ninput_dim: 1\ninput_dim: 2\ninput_dim: 7\ninput_dim: 7\n'
        'layer { name: "p" type: "Pooling" bottom: "data" top: "o" '
        "pooling_param { pool: MAX kernel_size: 3 stride: 2 pad: 1 } }"
    )
    insts.append(("pool_max", VARIANTS["pool_max"].generate(gp.node("p"), gp.edges, DEFAULT_TUNE, STATIC)))
    ga = parse_net(
        'input: "data"\ninput_dim: 1\ninput_dim: 2\ninput_dim: 3\ninput_dim: 3\n'
        'layer { name: "r" type: "ReLU" bottom: "data" top: "o" }'
    )
    insts.append(("activation", VARIANTS["activation"].generate(ga.node("r"), ga.edges, DEFAULT_TUNE, STATIC)))
    from cuclgen.frontend import KIND_CONVERT, ConvertParams, OpNode

    src_spec = DimsSpec.row_major(("out_chan", "in_chan", "y", "x"), (5, 2, 3, 3))
    dst_spec = DimsSpec.row_major(("in_chan", "y", "x", "out_chan"), (2, 3, 3, 8))
    cvn = OpNode("cv", KIND_CONVERT, ConvertParams(dst_spec), ("a",), ("b",))
    insts.append(("xpose", VARIANTS["xpose"].generate(cvn, {"a": src_spec, "b": dst_spec}, DEFAULT_TUNE, STATIC)))
    return insts


def _buffers_for(inst):
    from cuclgen.oracle import noise, seed_for

    bufs = {}
    for arg in inst.template.args:
        spec = inst.bindings[arg.name]
        if arg.direction == "in":
            bufs[arg.name] = noise(spec.names, spec.sizes, seed_for(f"c4:{arg.name}"))
        else:
            bufs[arg.name] = make_nda(spec.names, spec.sizes)
    return bufs


def test_criterion_4_dialect_portability(capsys):
    with Budget(4, "programming-model portability", 60.0, capsys):
        for name, inst in _representative_instantiations():
            src = instantiate(inst)
            segs = dialect_segments(src)
            rendered = {}
            for dialect in (OPENCL, CUDA):
                text = render_dialect(src, dialect)
                # the rendering is exactly the plain segments with per-dialect
                # idiom expansions: emissions differ only at idiom sites
                assert text == "".join(render_segment(k, t, sp, dialect) for k, t, sp in segs), name
                rendered[dialect] = text
            assert rendered[OPENCL] != rendered[CUDA]
            irs = {}
            outs = {}
            for dialect in (OPENCL, CUDA):
                ir = parse_kernel(unrender_dialect(rendered[dialect], dialect))
                irs[dialect] = ir
                bufs = _buffers_for(inst)
                run_kernel(ir, inst.launch, bufs)
                out_arg = next(a.name for a in inst.template.args if a.direction == "out")
                outs[dialect] = bufs[out_arg].elems.copy()
            assert irs[OPENCL] == irs[CUDA], name
            assert np.array_equal(outs[OPENCL], outs[CUDA]), name


# -- criterion 5: static/dynamic equivalence ------------------------------------


def test_criterion_5_static_dynamic_equivalence(capsys):
    with Budget(5, "static/dynamic equivalence", 60.0, capsys):
        rng = np.random.default_rng(1234)
        for i in range(20):
            p, dims = random_conv_case(rng, max_flops=100_000)
            for name in ("conv_simple", "conv_tiled", "conv_1x1", "conv_fc"):
                params = random_tile_params(rng) if name == "conv_tiled" else DEFAULT_TUNE
                outs = {}
                for mode in (STATIC, DYNAMIC):
                    r = run_conv_variant(p, dims, name, params, mode=mode, seed=f"acc5:{i}")
                    if r is None:
                        outs = None
                        break
                    outs[mode] = r[1].elems
                if outs is not None:
                    assert np.array_equal(outs[STATIC], outs[DYNAMIC]), (name, p, dims.sizes)


# -- criterion 6: autotuning dominance -------------------------------------------


def test_criterion_6_autotuning_dominance(capsys):
    with Budget(6, "autotuning dominance", 600.0, capsys):
        space = tuner.default_space()
        strict_wins = 0
        total = 0
        for op in corpus():
            p2, in2 = tuner.downscale_conv(op.conv_params, op.input_dims, 2_000_000)
            g = conv_graph(p2, in2)
            node = g.node("conv")
            rec = tuner.sweep(node, g.edges, space, jobs=2)
            si = VARIANTS["conv_simple"].generate(node, g.edges, DEFAULT_TUNE, STATIC)
            fallback = cost(static_cost_report(runner.parse_cached(instantiate(si)), si.launch))
            assert rec.cost <= fallback, (op, rec.cost, fallback)
            if rec.cost < fallback:
                strict_wins += 1
            total += 1
        assert total == 43
        assert strict_wins * 2 >= total, f"only {strict_wins}/{total} ops strictly beat the fallback"
        with capsys.disabled():
            print(f"  (strict improvement on {strict_wins}/{total} ops)", flush=True)


# -- criterion 7: fusion semantics and graph invariants ---------------------------


def _random_dag_graph(rng, n_nodes):
    from cuclgen.frontend import ActParams, ComputeGraph, KIND_ACT, OpNode

    g = ComputeGraph()
    dims = DimsSpec.row_major(["k"], [4])
    g.edges["src0"] = dims
    g.edges["src1"] = dims
    avail = ["src0", "src1"]
    nodes = []
    for i in range(n_nodes):
        k = int(rng.integers(1, min(3, len(avail)) + 1))
        ins = list(rng.choice(avail, size=k, replace=False))
        out = f"e{i}"
        g.edges[out] = dims
        nodes.append(OpNode(f"n{i}", KIND_ACT, ActParams(), tuple(ins), (out,)))
        avail.append(out)
    order = list(range(n_nodes))
    rng.shuffle(order)
    g.nodes = [nodes[i] for i in order]
    g.recompute_endpoints()
    return g


def test_criterion_7_fusion_and_graph_invariants(capsys):
    with Budget(7, "fusion semantics and graph invariants", 60.0, capsys):
        rng = np.random.default_rng(4321)
        tol = ToleranceSpec(rel_tol=1e-6, abs_floor=1e-9)
        for i in range(50):
            p, dims = random_conv_case(rng, max_flops=30_000)
            b, ic, h, w = dims.sizes
            net = (
                f'input: "data"\ninput_dim: {b}\ninput_dim: {ic}\ninput_dim: {h}\ninput_dim: {w}\n'
                f'layer {{ name: "conv1" type: "Convolution" bottom: "data" top: "c1" '
                f"convolution_param {{ num_output: {p.out_chans} kernel_size: {p.ksz} "
                f"stride: {p.stride} pad: {p.pad} }} }}\n"
                'layer { name: "relu1" type: "ReLU" bottom: "c1" top: "r1" }\n'
            )
            g = parse_net(net)
            fused = runner.run_graph(g, seed=i, fuse=True, keep_sinks=True)
            plain = runner.run_graph(g, seed=i, fuse=False, keep_sinks=True)
            assert fused.checksums.keys() == plain.checksums.keys()
            for e in fused.sink_buffers:
                assert compare(fused.sink_buffers[e], plain.sink_buffers[e], tol).ok, (i, e)

        for i in range(200):
            g = _random_dag_graph(rng, int(rng.integers(1, 13)))
            order = schedule(g)
            assert sorted(order) == sorted(n.name for n in g.nodes)
            pos = {name: j for j, name in enumerate(order)}
            for n in g.nodes:
                for e in n.inputs:
                    prod = g.producer_of(e)
                    if prod is not None:
                        assert pos[prod.name] < pos[n.name]
            plan = alloc_plan(g)
            assert set(plan.entries) == set(g.edges)
            ids = [bid for bid, _ in plan.entries.values()]
            assert len(set(ids)) == len(ids)


# -- criterion 8: determinism ------------------------------------------------------

DET_NET = """
input: "data"
input_dim: 1
input_dim: 4
input_dim: 9
input_dim: 9
layer { name: "conv1" type: "Convolution" bottom: "data" top: "c1"
  convolution_param { num_output: 8 kernel_size: 3 pad: 1 } }
layer { name: "relu1" type: "ReLU" bottom: "c1" top: "r1" }
layer { name: "pool1" type: "Pooling" bottom: "r1" top: "p1"
  pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
"""


def test_criterion_8_determinism(tmp_path, capsys):
    with Budget(8, "determinism", 120.0, capsys):
        net = tmp_path / "net.prototxt"
        net.write_text(DET_NET)

        dbs = []
        for i in range(2):
            path = tmp_path / f"tuned{i}.db"
            assert main(["tune", "--net", str(net), "--out", str(path)]) == 0
            dbs.append(path.read_bytes())
        capsys.readouterr()
        assert dbs[0] == dbs[1], "tune runs must produce byte-identical databases"

        reports = []
        for _ in range(2):
            assert main(["run", "--net", str(net), "--seed", "42", "--check"]) == 0
            reports.append(capsys.readouterr().out)
        assert reports[0] == reports[1], "run reports must be byte-identical"
