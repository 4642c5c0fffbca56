import threading

import pytest

from cuclgen.backend import CostReport
from cuclgen.frontend import ConvParams, conv_graph, parse_net
from cuclgen.ndarray import DimsSpec
from cuclgen.tuner import (
    DB_HEADER,
    AllCandidatesFailed,
    FormatVersionMismatch,
    IoError,
    TuneDB,
    TuneRecord,
    TuneSpace,
    conv_flops,
    default_space,
    downscale_conv,
    load_db,
    op_signature,
    save_db,
    sweep,
    tune_all,
    twin_graph,
)
from cuclgen.variants import DEFAULT_TUNE, TuneParams


def small_conv(oc=16, ic=8, hw=10, ksz=3, pad=1):
    return conv_graph(
        ConvParams(ksz=ksz, pad=pad, out_chans=oc),
        DimsSpec.row_major(("img", "chan", "y", "x"), (1, ic, hw, hw)),
    )


SMALL_SPACE = TuneSpace(
    tiled=(
        TuneParams((2, 2), (4, 4), 2, 1, False, False),
        TuneParams((2, 2), (4, 4), 2, 2, True, False),
        TuneParams((4, 4), (4, 4), 4, 4, True, True),
    )
)


def test_default_space_size_and_dedup():
    space = default_space()
    assert len(space.tiled) == len(set(space.tiled))
    assert 1 <= len(space.tiled) <= 128
    assert all(p.mnt[1] % p.vw == 0 for p in space.tiled)


def test_op_signature_distinguishes_and_dedupes():
    g1 = small_conv()
    g2 = small_conv()
    assert op_signature(g1.node("conv"), g1.edges) == op_signature(g2.node("conv"), g2.edges)
    g3 = small_conv(oc=17)
    assert op_signature(g1.node("conv"), g1.edges) != op_signature(g3.node("conv"), g3.edges)


def test_downscale_conv_budget_and_regime():
    p = ConvParams(ksz=11, stride=4, pad=0, out_chans=96)
    dims = DimsSpec.row_major(("img", "chan", "y", "x"), (5, 3, 227, 227))
    p2, d2 = downscale_conv(p, dims, 2_000_000)
    b, ic, h, w = d2.sizes
    assert conv_flops(p2, b, ic, h, w) <= 2_000_000
    assert (p2.ksz, p2.stride, p2.pad) == (11, 4, 0)  # geometry preserved
    assert p2.out_chans >= 8  # applicability floor


def test_downscale_small_op_unchanged():
    p = ConvParams(ksz=3, pad=1, out_chans=8)
    dims = DimsSpec.row_major(("img", "chan", "y", "x"), (1, 2, 6, 6))
    p2, d2 = downscale_conv(p, dims, 2_000_000)
    assert p2 == p and d2 == dims


def test_twin_preserves_fc_regime():
    g = conv_graph(
        ConvParams(ksz=6, out_chans=4096), DimsSpec.row_major(("img", "chan", "y", "x"), (5, 256, 6, 6))
    )
    node, edges = twin_graph(g.node("conv"), g.edges, budget=50_000)
    ind = edges[node.inputs[0]]
    assert node.params.ksz == ind.size_of("y") == ind.size_of("x")  # still a whole-image filter


def test_sweep_returns_argmin_and_beats_fallback():
    g = small_conv()
    rec = sweep(g.node("conv"), g.edges, SMALL_SPACE)
    assert rec.variant in ("conv_tiled", "conv_simple")
    from cuclgen.backend import cost, static_cost_report
    from cuclgen.cucl import STATIC, instantiate
    from cuclgen.runner import parse_cached
    from cuclgen.variants import VARIANTS

    node = g.node("conv")
    si = VARIANTS["conv_simple"].generate(node, g.edges, DEFAULT_TUNE, STATIC)
    simple_cost = cost(static_cost_report(parse_cached(instantiate(si)), si.launch))
    assert rec.cost <= simple_cost


def test_sweep_single_candidate_space():
    g = small_conv(oc=2, ic=1, hw=5, ksz=3, pad=0)  # only the fallback applies
    rec = sweep(g.node("conv"), g.edges, TuneSpace(tiled=()))
    assert rec.variant == "conv_simple"


def test_sweep_wall_clock_objective():
    g = small_conv(oc=8, ic=4, hw=6)
    rec = sweep(g.node("conv"), g.edges, TuneSpace(tiled=()), objective="wall")
    assert rec.objective == "wall"
    assert rec.scoring == "twin-wall"
    assert rec.cost > 0


def test_sweep_deterministic_and_parallel_safe():
    g = small_conv(oc=8, ic=4, hw=8)
    a = sweep(g.node("conv"), g.edges, SMALL_SPACE, jobs=1)
    b = sweep(g.node("conv"), g.edges, SMALL_SPACE, jobs=2)
    assert (a.variant, a.params, a.cost) == (b.variant, b.params, b.cost)


def test_sweep_pool_and_relu_nodes():
    net = """
input: "data"
input_dim: 1
input_dim: 4
input_dim: 8
input_dim: 8
layer { name: "pool1" type: "Pooling" bottom: "data" top: "p1"
  pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
layer { name: "relu1" type: "ReLU" bottom: "p1" top: "r1" }
"""
    g = parse_net(net)
    rec = sweep(g.node("pool1"), g.edges, SMALL_SPACE)
    assert rec.variant == "pool_max"
    rec = sweep(g.node("relu1"), g.edges, SMALL_SPACE)
    assert rec.variant == "activation"


def test_tune_all_dedupes_identical_ops():
    net = """
input: "data"
input_dim: 1
input_dim: 4
input_dim: 6
input_dim: 6
layer { name: "c1" type: "Convolution" bottom: "data" top: "o1"
  convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
layer { name: "c2" type: "Convolution" bottom: "o1" top: "o2"
  convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
"""
    g = parse_net(net)
    db = tune_all(g, TuneSpace(tiled=()))
    # c1 and c2 share a signature (4->4 chans, same extents): one record
    assert len(db.records) == 1


def test_tune_all_empty_graph():
    from cuclgen.frontend import ComputeGraph

    assert tune_all(ComputeGraph(), SMALL_SPACE).records == {}


def test_db_roundtrip(tmp_path):
    g = small_conv()
    node = g.node("conv")
    db = TuneDB()
    db.add(TuneRecord(op_signature(node, g.edges), "conv_simple", DEFAULT_TUNE, 123, CostReport()))
    db.add(TuneRecord("conv:k1:s1:p0:oc8:in1x8x4x4", "conv_tiled", TuneParams((2, 2), (4, 4), 1, 2, True, False), 77, CostReport()))
    db.add(TuneRecord("relu:in1x8x4x4", "activation", DEFAULT_TUNE, 5, CostReport()))
    path = tmp_path / "tune.db"
    save_db(db, path)
    text = path.read_text()
    assert text.startswith(DB_HEADER + "\n")
    assert "MNt=2:2,MNb=4:4,Kb=1,vw=2,lf=1,li=0" in text
    loaded = load_db(path)
    assert loaded == db
    save_db(loaded, tmp_path / "tune2.db")
    assert (tmp_path / "tune2.db").read_text() == text


def test_db_corrupted_file(tmp_path):
    p = tmp_path / "bad.db"
    p.write_text("not a tunedb\njunk\n")
    with pytest.raises(FormatVersionMismatch):
        load_db(p)
    p.write_text(DB_HEADER + "\nonly\ttwo\n")
    with pytest.raises(FormatVersionMismatch):
        load_db(p)
    with pytest.raises(IoError):
        load_db(tmp_path / "missing.db")


def test_db_concurrent_saves_distinct_paths(tmp_path):
    dbs = []
    for i in range(4):
        db = TuneDB()
        db.add(TuneRecord(f"sig{i}", "conv_simple", DEFAULT_TUNE, i, CostReport()))
        dbs.append(db)
    threads = [threading.Thread(target=save_db, args=(db, tmp_path / f"db{i}")) for i, db in enumerate(dbs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, db in enumerate(dbs):
        assert load_db(tmp_path / f"db{i}") == db


def test_all_candidates_failed():
    from cuclgen.frontend import ActParams, OpNode

    node = OpNode("x", "Unknown", ActParams(), ("a",), ("b",))
    with pytest.raises(AllCandidatesFailed):
        sweep(node, {"a": None, "b": None}, SMALL_SPACE)
