"""Execution harness: run single operations or whole graphs through the
generate -> instantiate -> parse -> interpret pipeline, with optional
reference cross-checking inside the same process.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from . import graphopt, oracle
from .backend import CostReport, cost, run_kernel
from .cucl import DYNAMIC, STATIC, Instantiation, instantiate, meta_values, parse_kernel
from .errors import CuclgenError
from .frontend import KIND_ACT, KIND_CONV, KIND_CONVERT, KIND_INPUT, KIND_POOL, ComputeGraph, OpNode
from .ndarray import NdArray, convert_format, make_nda
from .variants import DEFAULT_TUNE, VARIANTS, TuneParams, Variant, select_variant

_IR_CACHE: dict[str, object] = {}


def parse_cached(src: str):
    ir = _IR_CACHE.get(src)
    if ir is None:
        ir = parse_kernel(src)
        if len(_IR_CACHE) > 512:
            _IR_CACHE.clear()
        _IR_CACHE[src] = ir
    return ir


def arg_names_for(kind: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Kernel argument names mapped positionally to node inputs/outputs."""
    if kind == KIND_CONV:
        return ("in", "filts", "bias"), ("out",)
    return ("in",), ("out",)


def node_test_inputs(node: OpNode, edges, seed) -> dict[str, NdArray]:
    """Seeded noise for every canonical input edge of one node."""
    out = {}
    for e in node.inputs:
        spec = edges[e]
        out[e] = oracle.noise(spec.names, spec.sizes, oracle.seed_for(f"{seed}:{e}"))
    return out


def node_reference(node: OpNode, edges, inputs: dict[str, NdArray]) -> NdArray:
    if node.kind == KIND_CONV:
        return oracle.ref_conv(
            inputs[node.inputs[0]],
            inputs[node.inputs[1]],
            inputs[node.inputs[2]],
            node.params,
            act=node.fused_activation,
        )
    if node.kind == KIND_POOL:
        return oracle.ref_pool_max(inputs[node.inputs[0]], node.params)
    if node.kind == KIND_ACT:
        return oracle.ref_relu(inputs[node.inputs[0]])
    if node.kind == KIND_CONVERT:
        return convert_format(inputs[node.inputs[0]], edges[node.outputs[0]])
    raise CuclgenError(f"no reference for kind {node.kind}")


def conv_reduction_terms(node: OpNode, edges) -> int:
    if node.kind != KIND_CONV:
        return 1
    ic = edges[node.inputs[0]].size_of("chan")
    return ic * node.params.ksz * node.params.ksz


def execute_node(
    node: OpNode,
    edges,
    inputs: dict[str, NdArray],
    variant: Variant,
    params: TuneParams = DEFAULT_TUNE,
    mode: str = STATIC,
    engine: str = "vector",
    thread_order=None,
    inst: Instantiation | None = None,
    src: str | None = None,
):
    """Run one node's kernel on canonical inputs; returns (canonical output,
    CostReport).  Layout conversions the variant requires are applied on the
    way in and undone on the way out."""
    fmts = variant.required_formats(node, edges, params)
    if inst is None:
        inst = variant.generate(node, edges, params, mode)
    if src is None:
        src = instantiate(inst)
    ir = parse_cached(src)
    in_args, out_args = arg_names_for(node.kind)
    buffers = {}
    for arg, e in zip(in_args, node.inputs):
        want = fmts.inputs.get(e)
        buffers[arg] = convert_format(inputs[e], want) if want is not None else inputs[e]
    out_spec = fmts.output if fmts.output is not None else edges[node.outputs[0]]
    out_buf = make_nda(out_spec.names, out_spec.sizes)
    buffers[out_args[0]] = out_buf
    meta = meta_values(inst, ir.meta_fields) if inst.mode == DYNAMIC else None
    _, report = run_kernel(ir, inst.launch, buffers, meta=meta, engine=engine, thread_order=thread_order)
    if fmts.output is not None:
        out_buf = convert_format(out_buf, edges[node.outputs[0]])
    return out_buf, report


def validate_node(node, edges, variant, params, mode=STATIC, seed="validate"):
    """Oracle cross-check of one candidate; returns (CompareResult, CostReport)."""
    inputs = node_test_inputs(node, edges, seed)
    got, report = execute_node(node, edges, inputs, variant, params, mode)
    ref = node_reference(node, edges, inputs)
    tol = oracle.tolerance_for(conv_reduction_terms(node, edges))
    return oracle.compare(got, ref, tol), report


# ---------------------------------------------------------------------------
# whole-graph execution


@dataclass
class NodeRun:
    name: str
    variant: str
    params: TuneParams
    report: CostReport
    model_cost: float


@dataclass
class RunResult:
    checksums: dict[str, str]
    node_runs: list[NodeRun] = field(default_factory=list)
    oracle_checks: dict[str, oracle.CompareResult] = field(default_factory=dict)
    sink_buffers: dict[str, NdArray] = field(default_factory=dict)

    @property
    def all_checks_pass(self) -> bool:
        return all(r.ok for r in self.oracle_checks.values())


@dataclass
class ExecPlan:
    graph: ComputeGraph  # with conversion nodes spliced in
    pre_graph: ComputeGraph  # fused, before conversion insertion
    order: list[str]
    alloc: graphopt.AllocPlan
    insts: dict[str, Instantiation]
    choices: dict[str, tuple[str, TuneParams]]
    canonical_inputs: dict[str, tuple[str, ...]]
    canonical_output: dict[str, str]


def plan_graph(g: ComputeGraph, db=None, fuse: bool = True) -> ExecPlan:
    """Select variants, generate kernels, and splice in layout conversions.

    Kernels are generated against the pre-conversion (canonical) graph; the
    conversion nodes then make the runtime edge formats match the bindings.
    """
    if fuse:
        g = graphopt.fuse_activations(g)
    choices: dict[str, tuple[Variant, TuneParams]] = {}
    fmts_by_node: dict[str, graphopt.VariantFormats] = {}
    insts: dict[str, Instantiation] = {}
    canonical_inputs = {}
    canonical_output = {}
    for n in g.nodes:
        if n.kind == KIND_INPUT:
            continue
        variant, params = select_variant(n, g.edges, db)
        choices[n.name] = (variant, params)
        fmts_by_node[n.name] = variant.required_formats(n, g.edges, params)
        insts[n.name] = variant.generate(n, g.edges, params, STATIC)
        canonical_inputs[n.name] = n.inputs
        canonical_output[n.name] = n.outputs[0]
    g2 = graphopt.insert_conversions(g, fmts_by_node)
    for n in g2.nodes:
        if n.kind == KIND_CONVERT and n.name not in insts:
            xp = VARIANTS["xpose"]
            choices[n.name] = (xp, DEFAULT_TUNE)
            insts[n.name] = xp.generate(n, g2.edges, DEFAULT_TUNE, STATIC)
    order = [name for name in graphopt.schedule(g2) if g2.node(name).kind != KIND_INPUT]
    return ExecPlan(
        graph=g2,
        pre_graph=g,
        order=order,
        alloc=graphopt.alloc_plan(g2),
        insts=insts,
        choices={k: (v.name, p) for k, (v, p) in choices.items()},
        canonical_inputs=canonical_inputs,
        canonical_output=canonical_output,
    )


def checksum(nda: NdArray) -> str:
    return hashlib.sha256(nda.elems.tobytes()).hexdigest()[:16]


def run_graph(
    g: ComputeGraph,
    seed=0,
    db=None,
    check: bool = False,
    fuse: bool = True,
    engine: str = "vector",
    keep_sinks: bool = False,
) -> RunResult:
    """Execute a whole graph: allocate every edge, fill sources with seeded
    noise, and issue kernels in schedule order."""
    plan = plan_graph(g, db=db, fuse=fuse)
    g2 = plan.graph
    buffers = {e: make_nda(spec.names, spec.sizes) for e, spec in g2.edges.items()}
    for e in g2.sources:
        spec = g2.edges[e]
        buffers[e].elems[:] = oracle.noise(spec.names, spec.sizes, oracle.seed_for(f"{seed}:{e}")).elems
    result = RunResult(checksums={})
    for name in plan.order:
        node = g2.node(name)
        inst = plan.insts[name]
        vname, params = plan.choices[name]
        src = instantiate(inst)
        ir = parse_cached(src)
        in_args, out_args = arg_names_for(node.kind)
        kbufs = {arg: buffers[e] for arg, e in zip(in_args, node.inputs)}
        kbufs[out_args[0]] = buffers[node.outputs[0]]
        meta = meta_values(inst, ir.meta_fields) if inst.mode == DYNAMIC else None
        _, report = run_kernel(ir, inst.launch, kbufs, meta=meta, engine=engine)
        result.node_runs.append(NodeRun(name, vname, params, report, cost(report)))
    if check:
        # checks run after the full schedule so that output conversions have
        # landed; each node compares against the canonical (pre-conversion)
        # operand edges, whose buffers hold the unconverted values
        for name in plan.order:
            node = g2.node(name)
            if node.kind not in (KIND_CONV, KIND_POOL, KIND_ACT, KIND_CONVERT):
                continue
            cnode = node
            if name in plan.canonical_inputs:
                cnode = replace(node, inputs=plan.canonical_inputs[name], outputs=(plan.canonical_output[name],))
            inputs = {e: buffers[e] for e in cnode.inputs}
            ref = node_reference(cnode, g2.edges, inputs)
            tol = oracle.tolerance_for(conv_reduction_terms(cnode, g2.edges))
            result.oracle_checks[name] = oracle.compare(buffers[cnode.outputs[0]], ref, tol)
    for e in g2.sinks:
        result.checksums[e] = checksum(buffers[e])
        if keep_sinks:
            result.sink_buffers[e] = buffers[e]
    return result
