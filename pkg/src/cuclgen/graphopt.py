"""Graph-level optimization, scheduling, and allocation planning.

Two rewrites matter for these graphs: folding an elementwise activation into
the convolution that feeds it, and inserting layout-conversion nodes wherever
a chosen kernel variant wants its operands in a non-canonical format.  After
that, any topological order is a fine schedule and every edge simply gets its
own buffer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .errors import CuclgenError
from .frontend import (
    KIND_ACT,
    KIND_CONV,
    KIND_CONVERT,
    ComputeGraph,
    ConvertParams,
    OpNode,
)
from .ndarray import DimsSpec

log = logging.getLogger(__name__)


class CycleDetected(CuclgenError):
    def __init__(self, cycle):
        super().__init__(f"cycle detected among nodes: {cycle}")
        self.cycle = cycle


class IncompatibleFormats(CuclgenError):
    pass


def schedule(g: ComputeGraph) -> list[str]:
    """Deterministic topological order; ties broken by declaration order."""
    producers = {e: n.name for n in g.nodes for e in n.outputs}
    order: list[str] = []
    done: set[str] = set()
    remaining = list(g.nodes)
    while remaining:
        progressed = False
        for n in list(remaining):
            deps = [producers[e] for e in n.inputs if e in producers]
            if all(d in done for d in deps):
                order.append(n.name)
                done.add(n.name)
                remaining.remove(n)
                progressed = True
        if not progressed:
            raise CycleDetected([n.name for n in remaining])
    return order


def fuse_activations(g: ComputeGraph) -> ComputeGraph:
    """Fold conv -> activation pairs into one node with a fused activation.

    Only fires when the activation is the sole consumer of the conv output and
    that edge is not itself a graph sink; anything else would change what some
    other consumer observes.
    """
    g = g.copy()
    changed = True
    while changed:
        changed = False
        for conv in g.nodes:
            if conv.kind != KIND_CONV or conv.fused_activation is not None:
                continue
            edge = conv.outputs[0]
            consumers = g.consumers_of(edge)
            if len(consumers) != 1 or edge in g.sinks:
                continue
            act = consumers[0]
            if act.kind != KIND_ACT:
                continue
            fused = replace(conv, fused_activation=act.params.func, outputs=act.outputs)
            g.nodes = [fused if n.name == conv.name else n for n in g.nodes if n.name != act.name]
            del g.edges[edge]
            g.recompute_endpoints()
            changed = True
            break
    return g


@dataclass(frozen=True)
class VariantFormats:
    """Operand layouts a chosen variant requires; None means canonical."""

    inputs: dict[str, DimsSpec]  # edge role index -> required spec, keyed by edge name
    output: DimsSpec | None


def insert_conversions(g: ComputeGraph, choices: dict[str, VariantFormats]) -> ComputeGraph:
    """Materialize layout changes demanded by per-node variant choices.

    For each node input whose required format differs from the edge's format a
    Conversion node is spliced in (one per consumer, so two consumers with
    different needs each get their own).  A node producing a non-canonical
    format gets a Conversion back to the canonical edge format after it.
    """
    g = g.copy()
    new_nodes: list[OpNode] = []
    for node in g.nodes:
        fmts = choices.get(node.name)
        if fmts is None:
            new_nodes.append(node)
            continue
        inputs = list(node.inputs)
        for i, edge in enumerate(inputs):
            want = fmts.inputs.get(edge)
            have = g.edges[edge]
            if want is None or want == have:
                continue
            if set(want.names) != set(have.names):
                raise IncompatibleFormats(
                    f"node '{node.name}' input '{edge}': no conversion from {have.names} to {want.names}"
                )
            cv_edge = f"{edge}__for_{node.name}"
            cv_name = f"{node.name}__cv_in{i}"
            g.edges[cv_edge] = want
            new_nodes.append(OpNode(cv_name, KIND_CONVERT, ConvertParams(want), (edge,), (cv_edge,)))
            log.debug("conversion %s: %s -> %s (%d elems)", cv_name, have.names, want.names, want.num_elems)
            inputs[i] = cv_edge
        out_edge = node.outputs[0]
        if fmts.output is not None and fmts.output != g.edges[out_edge]:
            want_out = fmts.output
            have_out = g.edges[out_edge]
            if set(want_out.names) != set(have_out.names):
                raise IncompatibleFormats(
                    f"node '{node.name}' output '{out_edge}': no conversion from {want_out.names} to {have_out.names}"
                )
            raw_edge = f"{out_edge}__raw"
            g.edges[raw_edge] = want_out
            new_nodes.append(replace(node, inputs=tuple(inputs), outputs=(raw_edge,)))
            new_nodes.append(
                OpNode(f"{node.name}__cv_out", KIND_CONVERT, ConvertParams(have_out), (raw_edge,), (out_edge,))
            )
            log.debug("conversion %s__cv_out: %s -> %s (%d elems)", node.name, want_out.names, have_out.names, have_out.num_elems)
        else:
            new_nodes.append(replace(node, inputs=tuple(inputs)))
    g.nodes = new_nodes
    g.recompute_endpoints()
    g.validate()
    return g


@dataclass(frozen=True)
class AllocPlan:
    """One distinct buffer per edge, sized to the dense element count."""

    entries: dict[str, tuple[int, int]]  # edge -> (buffer id, elem count)

    @property
    def total_elems(self) -> int:
        return sum(n for _, n in self.entries.values())


def alloc_plan(g: ComputeGraph) -> AllocPlan:
    entries = {}
    for i, (edge, spec) in enumerate(g.edges.items()):
        if spec is None:
            raise CuclgenError(f"edge '{edge}' has no inferred shape")
        entries[edge] = (i, spec.num_elems)
    return AllocPlan(entries)
