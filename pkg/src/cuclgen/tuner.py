"""Brute-force autotuning: sweep (variant x parameters) per operation, keep
the best record, persist the results.

Every candidate is generated, cross-checked against the reference on a
downscaled twin of the operation, and scored.  Scoring uses the weighted
counter model computed by static per-thread analysis of the true-shape static
instantiation; interpreting the true shapes is far beyond a desk-scale time
budget, and the static counts are deterministic and comparable across
variants, which is what an argmin needs.  The measured-wall-clock objective
(scored on the twin run) is available behind a flag.
"""

from __future__ import annotations

import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from . import oracle, runner
from .backend import CostReport, CostWeights, cost, static_cost_report
from .cucl import STATIC, instantiate
from .errors import CuclgenError
from .frontend import (
    KIND_ACT,
    KIND_CONV,
    KIND_CONVERT,
    KIND_INPUT,
    KIND_POOL,
    ComputeGraph,
    ConvParams,
    OpNode,
    conv_graph,
    window_out,
)
from .ndarray import DimsSpec
from .variants import DEFAULT_TUNE, VARIANTS, TuneParams, variants_for_kind

log = logging.getLogger(__name__)

DB_HEADER = "boda-tunedb v1"
SWEEP_VALIDATE_BUDGET = 50_000  # FLOPs for in-sweep oracle twins
TWIN_BUDGET = 2_000_000  # FLOPs ceiling for downscaled twins generally

MODEL = "model"
WALL = "wall"


class AllCandidatesFailed(CuclgenError):
    pass


class IoError(CuclgenError):
    pass


class FormatVersionMismatch(CuclgenError):
    pass


# ---------------------------------------------------------------------------
# operation signatures and downscaled twins


def op_signature(node: OpNode, edges) -> str:
    """Canonical per-operation key: kind + params + shapes."""
    if node.kind == KIND_CONV:
        p = node.params
        ind = edges[node.inputs[0]]
        b, ic, h, w = (ind.size_of(d) for d in ("img", "chan", "y", "x"))
        sig = f"conv:k{p.ksz}:s{p.stride}:p{p.pad}:oc{p.out_chans}:in{b}x{ic}x{h}x{w}"
        if node.fused_activation:
            sig += f":{node.fused_activation}"
        return sig
    if node.kind == KIND_POOL:
        p = node.params
        ind = edges[node.inputs[0]]
        b, c, h, w = (ind.size_of(d) for d in ("img", "chan", "y", "x"))
        return f"pool_max:k{p.ksz}:s{p.stride}:p{p.pad}:in{b}x{c}x{h}x{w}"
    if node.kind == KIND_ACT:
        ind = edges[node.inputs[0]]
        return f"relu:in{'x'.join(str(s) for s in ind.sizes)}"
    if node.kind == KIND_CONVERT:
        src = edges[node.inputs[0]]
        dst = edges[node.outputs[0]]
        fmt = lambda s: "_".join(f"{n}{v}" for n, v in zip(s.names, s.sizes))  # noqa: E731
        return f"xpose:{fmt(src)}-to-{fmt(dst)}"
    raise CuclgenError(f"no signature for kind {node.kind}")


def conv_flops(p: ConvParams, b: int, ic: int, h: int, w: int) -> int:
    oy = window_out(h, p.ksz, p.stride, p.pad)
    ox = window_out(w, p.ksz, p.stride, p.pad)
    return 2 * p.ksz * p.ksz * ic * p.out_chans * oy * ox * b


def downscale_conv(p: ConvParams, in_dims: DimsSpec, budget: int = TWIN_BUDGET):
    """Shrink a convolution under a FLOP budget: channels first, then batch,
    then spatial extent.  Kernel size, stride, and padding are preserved and
    floors keep the twin in the same variant-applicability regime."""
    b, ic, h, w = (in_dims.size_of(d) for d in ("img", "chan", "y", "x"))
    oc = p.out_chans
    # out_chans gate variant applicability (register blocking needs OC >= MNt.1),
    # so they floor higher than input channels, which only size the reduction
    ic_floor, oc_floor = 2, 8

    def flops():
        return conv_flops(replace(p, out_chans=oc), b, ic, h, w)

    while flops() > budget and (ic > ic_floor or oc > oc_floor):
        if ic > ic_floor and (ic >= oc or oc <= oc_floor):
            ic = max(ic_floor, ic // 2)
        else:
            oc = max(oc_floor, oc // 2)
    while flops() > budget and b > 1:
        b //= 2
    while flops() > budget:
        oy = window_out(h, p.ksz, p.stride, p.pad)
        ox = window_out(w, p.ksz, p.stride, p.pad)
        if oy <= 4 and ox <= 4:
            break
        oy, ox = max(4, oy // 2), max(4, ox // 2)
        h = max(1, (oy - 1) * p.stride + p.ksz - 2 * p.pad)
        w = max(1, (ox - 1) * p.stride + p.ksz - 2 * p.pad)
    return replace(p, out_chans=oc), DimsSpec.row_major(("img", "chan", "y", "x"), (b, ic, h, w))


def twin_graph(node: OpNode, edges, budget: int = TWIN_BUDGET):
    """A standalone downscaled copy of one operation, for oracle validation."""
    if node.kind == KIND_CONV:
        p2, ind2 = downscale_conv(node.params, edges[node.inputs[0]], budget)
        g = conv_graph(p2, ind2, name="twin")
        n = g.node("twin")
        if node.fused_activation:
            g = _with_fused(g, n, node.fused_activation)
            n = g.node("twin")
        return n, g.edges
    ind = edges[node.inputs[0]]
    sizes = list(ind.sizes)
    # elementwise/window ops: halve any dim until the buffer is small
    while _prod(sizes) > 1_000_000:
        big = max(range(len(sizes)), key=lambda i: sizes[i])
        if sizes[big] < 8:
            break
        sizes[big] //= 2
    ind2 = DimsSpec.row_major(ind.names, sizes)
    if node.kind == KIND_POOL:
        h, w = ind2.size_of("y"), ind2.size_of("x")
        p = node.params
        if window_out(h, p.ksz, p.stride, p.pad) < 1 or window_out(w, p.ksz, p.stride, p.pad) < 1:
            ind2 = ind  # too small to shrink safely
        b, c = ind2.size_of("img"), ind2.size_of("chan")
        oy = window_out(ind2.size_of("y"), p.ksz, p.stride, p.pad)
        ox = window_out(ind2.size_of("x"), p.ksz, p.stride, p.pad)
        outd = DimsSpec.row_major(("img", "chan", "y", "x"), (b, c, oy, ox))
        n = OpNode("twin", KIND_POOL, p, ("tin",), ("tout",))
        return n, {"tin": ind2, "tout": outd}
    if node.kind == KIND_ACT:
        n = OpNode("twin", KIND_ACT, node.params, ("tin",), ("tout",))
        return n, {"tin": ind2, "tout": ind2}
    if node.kind == KIND_CONVERT:
        # scale source and target consistently per shared dim name
        src, dst = edges[node.inputs[0]], edges[node.outputs[0]]
        scale = {n_: s2 / s1 for n_, s1, s2 in zip(ind.names, ind.sizes, sizes)}
        dsizes = [max(1, int(dst.size_of(n_) * scale[n_])) for n_ in dst.names]
        dst2 = DimsSpec.row_major(dst.names, dsizes)
        n = OpNode("twin", KIND_CONVERT, replace(node.params, target=dst2), ("tin",), ("tout",))
        return n, {"tin": ind2, "tout": dst2}
    raise CuclgenError(f"cannot downscale kind {node.kind}")


def _with_fused(g: ComputeGraph, node: OpNode, act: str) -> ComputeGraph:
    g = g.copy()
    g.nodes = [replace(n, fused_activation=act) if n.name == node.name else n for n in g.nodes]
    return g


def _prod(xs):
    r = 1
    for x in xs:
        r *= x
    return r


# ---------------------------------------------------------------------------
# tune space


@dataclass(frozen=True)
class TuneSpace:
    """Finite candidate set per variant; only the tiled variant has knobs."""

    tiled: tuple[TuneParams, ...]


def default_space() -> TuneSpace:
    cands = []
    seen = set()
    for mnt in ((1, 1), (2, 2), (4, 4), (8, 8)):
        for mnb in ((8, 8), (16, 16)):
            for kb in (1, 4):
                for vw in (1, 4):
                    if mnt[1] % vw:
                        continue
                    for lf in (False, True):
                        for li in (False, True):
                            p = TuneParams(mnt, mnb, kb, vw, lf, li)
                            if p not in seen:
                                seen.add(p)
                                cands.append(p)
    return TuneSpace(tiled=tuple(cands))


# ---------------------------------------------------------------------------
# records and database


@dataclass
class TuneRecord:
    op_signature: str
    variant: str
    params: TuneParams
    cost: float
    counters: CostReport
    objective: str = MODEL
    scoring: str = "static"
    timestamp: float = 0.0

    def line(self) -> str:
        c = int(self.cost) if float(self.cost).is_integer() else self.cost
        return f"{self.op_signature}\t{self.variant}\t{self.params.to_string()}\t{c}\t{self.objective}"


@dataclass
class TuneDB:
    records: dict[str, TuneRecord] = field(default_factory=dict)

    def add(self, rec: TuneRecord):
        self.records[rec.op_signature] = rec

    def persisted(self) -> tuple:
        return tuple(sorted(r.line() for r in self.records.values()))

    def __eq__(self, other):
        return isinstance(other, TuneDB) and self.persisted() == other.persisted()


def save_db(db: TuneDB, path):
    """Atomic write: temp file in the same directory, then rename."""
    path = os.fspath(path)
    text = DB_HEADER + "\n" + "".join(line + "\n" for line in db.persisted())
    d = os.path.dirname(path) or "."
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tunedb-", dir=d)
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from None


def load_db(path) -> TuneDB:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from None
    if not lines or lines[0] != DB_HEADER:
        raise FormatVersionMismatch(f"{path}: expected header {DB_HEADER!r}")
    db = TuneDB()
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 5:
            raise FormatVersionMismatch(f"{path}: malformed record {ln!r}")
        sig, variant, params_s, cost_s, objective = parts
        if variant not in VARIANTS or objective not in (MODEL, WALL):
            raise FormatVersionMismatch(f"{path}: malformed record {ln!r}")
        try:
            c = int(cost_s)
        except ValueError:
            try:
                c = float(cost_s)
            except ValueError:
                raise FormatVersionMismatch(f"{path}: bad cost in {ln!r}") from None
        try:
            params = TuneParams.from_string(params_s)
        except CuclgenError:
            raise FormatVersionMismatch(f"{path}: bad params in {ln!r}") from None
        db.add(TuneRecord(sig, variant, params, c, CostReport(), objective=objective, scoring="loaded"))
    return db


# ---------------------------------------------------------------------------
# sweeping


def _candidates(node: OpNode, edges, space: TuneSpace):
    out = []
    for v in variants_for_kind(node.kind):
        if v.name == "conv_tiled":
            out.extend((v, p) for p in v.tune_candidates(node, edges, space.tiled))
        elif v.applies(node, edges, DEFAULT_TUNE) is None:
            out.append((v, DEFAULT_TUNE))
    return out


def _evaluate(node, edges, twin, v, params, objective, weights):
    """Validate one candidate on the twin, then score it on the true shape."""
    twin_node, twin_edges, twin_inputs, twin_ref, twin_tol = twin
    try:
        got, twin_report = runner.execute_node(twin_node, twin_edges, twin_inputs, v, params)
        cmp_res = oracle.compare(got, twin_ref, twin_tol)
    except CuclgenError as e:
        return None, f"twin execution failed: {e}"
    if not cmp_res.ok:
        return None, f"oracle mismatch (rel err {cmp_res.max_rel_err:.3g})"
    if objective == WALL:
        return TuneRecord(
            op_signature(node, edges), v.name, params, float(twin_report.wall_ns), twin_report, WALL, "twin-wall"
        ), None
    inst = v.generate(node, edges, params, STATIC)
    ir = runner.parse_cached(instantiate(inst))
    counters = static_cost_report(ir, inst.launch)
    return TuneRecord(op_signature(node, edges), v.name, params, cost(counters, weights), counters), None


def sweep(
    node: OpNode,
    edges,
    space: TuneSpace | None = None,
    objective: str = MODEL,
    weights: CostWeights = CostWeights(),
    validate_budget: int = SWEEP_VALIDATE_BUDGET,
    jobs: int = 1,
) -> TuneRecord:
    """Score every applicable (variant, params) candidate and return the best.

    Ties break toward the more specialized variant, then enumeration order,
    so the result is deterministic and independent of evaluation parallelism.
    """
    space = space or default_space()
    cands = _candidates(node, edges, space)
    if not cands:
        raise AllCandidatesFailed(f"no variant applies to '{node.name}'")
    twin_node, twin_edges = twin_graph(node, edges, budget=validate_budget)
    twin_inputs = runner.node_test_inputs(twin_node, twin_edges, "validate")
    twin_ref = runner.node_reference(twin_node, twin_edges, twin_inputs)
    twin_tol = oracle.tolerance_for(runner.conv_reduction_terms(twin_node, twin_edges))
    twin = (twin_node, twin_edges, twin_inputs, twin_ref, twin_tol)

    def ev(pair):
        v, params = pair
        return _evaluate(node, edges, twin, v, params, objective, weights)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(ev, cands))
    else:
        results = [ev(pair) for pair in cands]
    best = None
    best_key = None
    failures = []
    for idx, ((rec, why), (v, params)) in enumerate(zip(results, cands)):
        if rec is None:
            failures.append(f"{v.name}[{params.to_string()}]: {why}")
            continue
        key = (rec.cost, idx)
        if best is None or key < best_key:
            best, best_key = rec, key
    if best is None:
        raise AllCandidatesFailed(f"every candidate for '{node.name}' failed:\n  " + "\n  ".join(failures))
    if failures:
        log.debug("sweep '%s': %d candidates rejected", node.name, len(failures))
    return best


def tune_all(
    g: ComputeGraph,
    space: TuneSpace | None = None,
    objective: str = MODEL,
    weights: CostWeights = CostWeights(),
    validate_budget: int = SWEEP_VALIDATE_BUDGET,
    jobs: int = 1,
) -> TuneDB:
    """One sweep per distinct operation signature in the graph."""
    db = TuneDB()
    for n in g.nodes:
        if n.kind == KIND_INPUT:
            continue
        sig = op_signature(n, g.edges)
        if sig in db.records:
            continue
        db.add(sweep(n, g.edges, space, objective, weights, validate_budget, jobs))
    return db
