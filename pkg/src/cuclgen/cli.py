"""Command-line driver: bench, tune, run, emit.

Exit codes: 0 success, 2 validation failure, 3 parse error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import corpus as corpus_mod
from . import runner, tuner
from .backend import cost, source_filename, static_cost_report
from .cucl import CUDA, DYNAMIC, OPENCL, STATIC, dialect_segments, instantiate, render_dialect
from .cucl.parser import ParseError
from .errors import CuclgenError
from .frontend import KIND_INPUT, NetSyntaxError, conv_graph, parse_net, window_out
from .oracle import compare, tolerance_for
from .variants import VARIANTS, select_variant

REPORT_COLUMNS = "signature,variant,params,cost,objective,oracle,max_rel_err"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARSE = 3
EXIT_INTERNAL = 4


def corpus_gate(ops) -> list[str]:
    """Self-consistency check run before any benchmark work.

    Shapes must reproduce from the stored parameters for every row, and every
    published FLOP value must match the computed count except rows carrying
    the documented factor-of-10 publication anomaly.
    """
    problems = []
    for i, op in enumerate(ops):
        oy = window_out(op.in_y, op.ksz, op.stride, op.pad)
        ox = window_out(op.in_x, op.ksz, op.stride, op.pad)
        if (oy, ox) != (op.out_y, op.out_x):
            problems.append(f"row {i}: inferred output {oy}x{ox} != listed {op.out_y}x{op.out_x}")
        if op.out_chans != op.out_chans_listed:
            problems.append(f"row {i}: out_chans {op.out_chans} != listed {op.out_chans_listed}")
        if not op.flops_published_consistent:
            if f"{op.flops_computed * 10:.6g}" != op.flops_published:
                problems.append(
                    f"row {i}: published FLOPs {op.flops_published} vs computed {op.flops_computed:.6g}"
                )
    return problems


def _load_ops(args) -> list[corpus_mod.BenchOp]:
    path = args.corpus or corpus_mod.shipped_corpus_path()
    return corpus_mod.load_corpus(path)


def _write_report(args, rows):
    if args.out and args.out != "-":
        with open(args.out, "w") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)


def cmd_bench(args) -> int:
    ops = _load_ops(args)
    problems = corpus_gate(ops)
    if problems:
        for p in problems:
            print(f"corpus gate: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    db = tuner.load_db(args.db) if args.db else None
    failures = 0
    rows = [REPORT_COLUMNS.split(",")]
    for op in ops:
        g = op.graph()
        node = g.node("conv")
        sig = tuner.op_signature(node, g.edges)
        variant, params = select_variant(node, g.edges, db)
        inst = variant.generate(node, g.edges, params, STATIC)
        counters = static_cost_report(runner.parse_cached(instantiate(inst)), inst.launch)
        c = cost(counters)
        if args.flops_only:
            oracle_col, err_col = "skipped", ""
        else:
            budget = max(1, int(args.scale * op.flops_computed))
            p2, in2 = tuner.downscale_conv(op.conv_params, op.input_dims, budget)
            tg = conv_graph(p2, in2)
            tnode = tg.node("conv")
            if variant.applies(tnode, tg.edges, params) is not None:
                tvariant, tparams = select_variant(tnode, tg.edges, None)
            else:
                tvariant, tparams = variant, params
            inputs = runner.node_test_inputs(tnode, tg.edges, f"bench:{sig}")
            got, _ = runner.execute_node(tnode, tg.edges, inputs, tvariant, tparams)
            ref = runner.node_reference(tnode, tg.edges, inputs)
            res = compare(got, ref, tolerance_for(runner.conv_reduction_terms(tnode, tg.edges)))
            oracle_col = "pass" if res.ok else "fail"
            err_col = f"{res.max_rel_err:.3e}"
            if not res.ok:
                failures += 1
        rows.append([sig, variant.name, params.to_string(), str(c), args.objective, oracle_col, err_col])
    _write_report(args, rows)
    return EXIT_VALIDATION if failures else EXIT_OK


def _graph_nodes(args):
    """(node, edges) pairs from --net or --corpus."""
    pairs = []
    if args.net:
        with open(args.net, encoding="utf-8") as f:
            g = parse_net(f.read())
        for n in g.nodes:
            if n.kind != KIND_INPUT:
                pairs.append((n, g.edges))
    else:
        for op in _load_ops(args):
            g = op.graph()
            pairs.append((g.node("conv"), g.edges))
    return pairs


def cmd_tune(args) -> int:
    space = tuner.default_space()
    db = tuner.TuneDB()
    for node, edges in _graph_nodes(args):
        sig = tuner.op_signature(node, edges)
        if sig in db.records:
            continue
        rec = tuner.sweep(node, edges, space, objective=args.objective, jobs=args.jobs)
        db.add(rec)
        print(f"{sig}\t{rec.variant}\t{rec.params.to_string()}\t{rec.cost}")
    out = args.out or args.db
    if not out:
        print("no output path given (--out or --db)", file=sys.stderr)
        return EXIT_INTERNAL
    tuner.save_db(db, out)
    return EXIT_OK


def cmd_run(args) -> int:
    if not args.net:
        print("--net is required", file=sys.stderr)
        return EXIT_PARSE
    with open(args.net, encoding="utf-8") as f:
        g = parse_net(f.read())
    db = tuner.load_db(args.db) if args.db else None
    result = runner.run_graph(g, seed=args.seed, db=db, check=args.check, fuse=not args.no_fuse)
    for nr in result.node_runs:
        print(f"node {nr.name}: variant={nr.variant} params={nr.params.to_string()} model_cost={nr.model_cost}")
    for edge, digest in sorted(result.checksums.items()):
        print(f"sink {edge}: {digest}")
    if args.check:
        for name, res in result.oracle_checks.items():
            status = "pass" if res.ok else f"FAIL (rel err {res.max_rel_err:.3e} at {res.worst_index})"
            print(f"check {name}: {status}")
        if not result.all_checks_pass:
            return EXIT_VALIDATION
    return EXIT_OK


def cmd_emit(args) -> int:
    if not args.net:
        print("--net is required", file=sys.stderr)
        return EXIT_PARSE
    with open(args.net, encoding="utf-8") as f:
        g = parse_net(f.read())
    db = tuner.load_db(args.db) if args.db else None
    plan = runner.plan_graph(g, db=db)
    os.makedirs(args.out or ".", exist_ok=True)
    dialects = [OPENCL, CUDA] if args.dialect == "both" else [args.dialect]
    mode = DYNAMIC if args.mode == "dynamic" else STATIC
    for name in plan.order:
        node = plan.graph.node(name)
        vname, params = plan.choices[name]
        inst = plan.insts[name]
        if mode == DYNAMIC:
            # regenerate against the pre-conversion view, where kernels are planned
            gen_node = plan.pre_graph.node(name) if name in plan.canonical_inputs else node
            gen_edges = plan.pre_graph.edges if name in plan.canonical_inputs else plan.graph.edges
            inst = VARIANTS[vname].generate(gen_node, gen_edges, params, DYNAMIC)
        src = instantiate(inst)
        sig = tuner.op_signature(node, plan.graph.edges)
        for d in dialects:
            fname = source_filename(sig, vname, d)
            with open(os.path.join(args.out or ".", fname), "w") as f:
                f.write(render_dialect(src, d))
            print(f"emitted {fname}")
        if args.dialect == "both":
            n_idioms = sum(1 for kind, *_ in dialect_segments(src) if kind == "idiom")
            print(f"  dialect diff: {n_idioms} idiom sites, plain text identical")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cuclgen", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--net", help="network description file")
        p.add_argument("--corpus", help="benchmark corpus CSV (defaults to the shipped corpus)")
        p.add_argument("--db", help="tuning database path")
        p.add_argument("--objective", choices=["model", "wall"], default="model")
        p.add_argument("--scale", type=float, default=1.0, help="downscale fraction for oracle checks")
        p.add_argument("--dialect", choices=["opencl", "cuda", "both"], default="both")
        p.add_argument("--mode", choices=["static", "dynamic"], default="static")
        p.add_argument("--check", action="store_true", help="cross-check outputs against the reference")
        p.add_argument("--no-fuse", action="store_true", help="disable activation fusion")
        p.add_argument("--flops-only", action="store_true", help="bench: verify corpus only, skip kernel runs")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output file or directory")

    for name, fn in (("bench", cmd_bench), ("tune", cmd_tune), ("run", cmd_run), ("emit", cmd_emit)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (NetSyntaxError, ParseError, corpus_mod.CorpusParseError, tuner.FormatVersionMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except CuclgenError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
