"""Network description parsing and shape/FLOP inference.

The accepted grammar is a strict subset of the legacy layer-block network
format: a `layer { ... }` block per operation, plus top-level `input:` /
`input_dim:` lines.  Anything outside the subset is a hard parse error; a
desk-scale tool should fail loudly rather than silently drop fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import CuclgenError
from .ndarray import DimsSpec

KIND_INPUT = "Input"
KIND_CONV = "Convolution"
KIND_POOL = "Pooling"
KIND_ACT = "Activation"
KIND_CONVERT = "Conversion"

CANONICAL_DATA_DIMS = ("img", "chan", "y", "x")
CANONICAL_FILTS_DIMS = ("out_chan", "in_chan", "y", "x")
CANONICAL_BIAS_DIMS = ("out_chan",)


class NetSyntaxError(CuclgenError):
    def __init__(self, line: int, expected: str, got: str = ""):
        msg = f"line {line}: expected {expected}"
        if got:
            msg += f", got {got!r}"
        super().__init__(msg)
        self.line = line
        self.expected = expected


class UnknownLayerType(CuclgenError):
    pass


class DanglingBottom(CuclgenError):
    pass


class GraphError(CuclgenError):
    pass


class NonPositiveOutputDim(CuclgenError):
    def __init__(self, node: str, axis: str):
        super().__init__(f"node '{node}': non-positive output size along {axis}")
        self.node = node
        self.axis = axis


@dataclass(frozen=True)
class ConvParams:
    ksz: int
    stride: int = 1
    pad: int = 0
    out_chans: int = 1

    def __post_init__(self):
        if self.ksz < 1 or self.stride < 1 or self.pad < 0 or self.out_chans < 1:
            raise GraphError(f"bad conv params {self}")


@dataclass(frozen=True)
class PoolParams:
    ksz: int
    stride: int = 1
    pad: int = 0
    mode: str = "max"

    def __post_init__(self):
        if self.ksz < 1 or self.stride < 1 or self.pad < 0:
            raise GraphError(f"bad pool params {self}")
        # A window that can land entirely in padding has no defined max.
        if self.pad >= self.ksz:
            raise GraphError(f"pool pad {self.pad} must be < window {self.ksz}")


@dataclass(frozen=True)
class ActParams:
    func: str = "relu"


@dataclass(frozen=True)
class ConvertParams:
    target: DimsSpec


@dataclass(frozen=True)
class OpNode:
    name: str
    kind: str
    params: object
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    fused_activation: str | None = None


@dataclass
class ComputeGraph:
    """DAG of operations over named edges; edges map to DimsSpec once inferred."""

    nodes: list[OpNode] = field(default_factory=list)
    edges: dict[str, DimsSpec | None] = field(default_factory=dict)
    sources: list[str] = field(default_factory=list)
    sinks: list[str] = field(default_factory=list)

    def node(self, name: str) -> OpNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise GraphError(f"no node named '{name}'")

    def producer_of(self, edge: str) -> OpNode | None:
        for n in self.nodes:
            if edge in n.outputs:
                return n
        return None

    def consumers_of(self, edge: str) -> list[OpNode]:
        return [n for n in self.nodes if edge in n.inputs]

    def validate(self):
        producers: dict[str, str] = {}
        for n in self.nodes:
            for e in n.outputs:
                if e in producers:
                    raise GraphError(f"edge '{e}' produced by both '{producers[e]}' and '{n.name}'")
                producers[e] = n.name
            for e in n.inputs:
                if e not in self.edges:
                    raise DanglingBottom(f"node '{n.name}' reads undeclared edge '{e}'")
        # acyclicity by elimination
        done: set[str] = set()
        remaining = list(self.nodes)
        while remaining:
            progressed = False
            for n in list(remaining):
                if all(producers.get(e) is None or producers[e] in done for e in n.inputs):
                    done.add(n.name)
                    remaining.remove(n)
                    progressed = True
            if not progressed:
                raise GraphError(f"cycle among nodes {[n.name for n in remaining]}")

    def recompute_endpoints(self):
        # edges emitted by Input nodes are sources: the Input node is pure
        # bookkeeping for where external data lands
        produced = {e for n in self.nodes if n.kind != KIND_INPUT for e in n.outputs}
        consumed = {e for n in self.nodes for e in n.inputs}
        self.sources = [e for e in self.edges if e not in produced]
        self.sinks = [e for e in self.edges if e not in consumed]

    def copy(self) -> "ComputeGraph":
        return ComputeGraph(list(self.nodes), dict(self.edges), list(self.sources), list(self.sinks))


# ---------------------------------------------------------------------------
# parsing


class _Tok:
    def __init__(self, kind, text, line):
        self.kind = kind  # ident | string | int | punct | eof
        self.text = text
        self.line = line

    def __repr__(self):
        return f"{self.kind}({self.text!r})"


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line = 1
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            i += 1
        elif c in " \t\r":
            i += 1
        elif c == "#":
            while i < n and text[i] != "\n":
                i += 1
        elif c == '"':
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise NetSyntaxError(line, "closing quote")
                j += 1
            if j >= n:
                raise NetSyntaxError(line, "closing quote")
            toks.append(_Tok("string", text[i + 1 : j], line))
            i = j + 1
        elif c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(_Tok("int", text[i:j], line))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Tok("ident", text[i:j], line))
            i = j
        elif c in "{}:":
            toks.append(_Tok("punct", c, line))
            i += 1
        else:
            raise NetSyntaxError(line, "token", c)
    toks.append(_Tok("eof", "", line))
    return toks


_LAYER_TYPES = {"Convolution", "Pooling", "ReLU"}


class _NetParser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def take(self, kind=None, text=None) -> _Tok:
        t = self.toks[self.pos]
        if (kind and t.kind != kind) or (text is not None and t.text != text):
            want = text if text is not None else kind
            raise NetSyntaxError(t.line, str(want), t.text)
        self.pos += 1
        return t

    def take_field_name(self, *allowed) -> str:
        t = self.take("ident")
        if t.text not in allowed:
            raise NetSyntaxError(t.line, f"one of {sorted(allowed)}", t.text)
        self.take("punct", ":")
        return t.text

    def parse(self):
        input_name = None
        input_dims = None
        if self.peek().kind == "ident" and self.peek().text == "input":
            self.take("ident", "input")
            self.take("punct", ":")
            input_name = self.take("string").text
            dims = []
            for _ in range(4):
                t = self.take("ident")
                if t.text != "input_dim":
                    raise NetSyntaxError(t.line, "input_dim", t.text)
                self.take("punct", ":")
                dims.append(int(self.take("int").text))
            input_dims = tuple(dims)
        layers = []
        while self.peek().kind != "eof":
            t = self.take("ident")
            if t.text != "layer":
                raise NetSyntaxError(t.line, "'layer'", t.text)
            layers.append(self.parse_layer())
        return input_name, input_dims, layers

    def parse_layer(self):
        self.take("punct", "{")
        fields = {"bottom": [], "top": []}
        while not (self.peek().kind == "punct" and self.peek().text == "}"):
            t = self.peek()
            if t.kind != "ident":
                raise NetSyntaxError(t.line, "layer field", t.text)
            if t.text in ("name", "type", "bottom", "top"):
                self.take("ident")
                self.take("punct", ":")
                v = self.take("string").text
                if t.text in ("bottom", "top"):
                    fields[t.text].append(v)
                else:
                    if t.text in fields:
                        raise NetSyntaxError(t.line, f"single '{t.text}' field")
                    fields[t.text] = v
            elif t.text == "convolution_param":
                self.take("ident")
                fields["conv"] = self.parse_conv_param()
            elif t.text == "pooling_param":
                self.take("ident")
                fields["pool"] = self.parse_pool_param()
            else:
                raise NetSyntaxError(t.line, "supported layer field", t.text)
        self.take("punct", "}")
        return fields

    def _param_block(self, int_fields, enum_fields=()):
        self.take("punct", "{")
        got = {}
        while not (self.peek().kind == "punct" and self.peek().text == "}"):
            name = self.take_field_name(*int_fields, *enum_fields)
            if name in got:
                raise NetSyntaxError(self.peek().line, f"single '{name}'")
            if name in enum_fields:
                got[name] = self.take("ident").text
            else:
                got[name] = int(self.take("int").text)
        self.take("punct", "}")
        return got

    def parse_conv_param(self):
        got = self._param_block(("num_output", "kernel_size", "stride", "pad"))
        for req in ("num_output", "kernel_size"):
            if req not in got:
                raise NetSyntaxError(self.peek().line, f"'{req}' in convolution_param")
        return ConvParams(
            ksz=got["kernel_size"],
            stride=got.get("stride", 1),
            pad=got.get("pad", 0),
            out_chans=got["num_output"],
        )

    def parse_pool_param(self):
        got = self._param_block(("kernel_size", "stride", "pad"), ("pool",))
        if got.get("pool") != "MAX":
            raise NetSyntaxError(self.peek().line, "'pool: MAX'")
        if "kernel_size" not in got:
            raise NetSyntaxError(self.peek().line, "'kernel_size' in pooling_param")
        return PoolParams(ksz=got["kernel_size"], stride=got.get("stride", 1), pad=got.get("pad", 0))


def parse_net(text: str) -> ComputeGraph:
    """Parse a network description into a ComputeGraph.

    One node per layer block, in file order.  Filter and bias edges are
    synthesized for each convolution.  When the file carries input dims the
    graph comes back fully shape-inferred.
    """
    input_name, input_dims, layers = _NetParser(text).parse()
    g = ComputeGraph()
    if input_name is not None:
        g.edges[input_name] = None
        g.nodes.append(OpNode(name=f"{input_name}_input", kind=KIND_INPUT, params=None, inputs=(), outputs=(input_name,)))
    for lf in layers:
        name = lf.get("name")
        ltype = lf.get("type")
        if not isinstance(name, str):
            raise NetSyntaxError(0, "'name' field in every layer")
        if ltype not in _LAYER_TYPES:
            raise UnknownLayerType(f"layer '{name}': type {ltype!r} not supported")
        bottoms, tops = lf["bottom"], lf["top"]
        if len(bottoms) != 1 or len(tops) != 1:
            raise NetSyntaxError(0, f"layer '{name}': exactly one bottom and one top")
        bottom, top = bottoms[0], tops[0]
        if bottom == top:
            raise NetSyntaxError(0, f"layer '{name}': in-place layers (top == bottom) unsupported")
        if bottom not in g.edges:
            raise DanglingBottom(f"layer '{name}' reads undeclared edge '{bottom}'")
        if top in g.edges:
            raise GraphError(f"edge '{top}' produced twice")
        if ltype == "Convolution":
            if "conv" not in lf:
                raise NetSyntaxError(0, f"layer '{name}': convolution_param required")
            filts, bias = f"{name}_filts", f"{name}_bias"
            g.edges[filts] = None
            g.edges[bias] = None
            g.edges[top] = None
            g.nodes.append(OpNode(name, KIND_CONV, lf["conv"], (bottom, filts, bias), (top,)))
        elif ltype == "Pooling":
            if "pool" not in lf:
                raise NetSyntaxError(0, f"layer '{name}': pooling_param required")
            g.edges[top] = None
            g.nodes.append(OpNode(name, KIND_POOL, lf["pool"], (bottom,), (top,)))
        else:  # ReLU
            g.edges[top] = None
            g.nodes.append(OpNode(name, KIND_ACT, ActParams("relu"), (bottom,), (top,)))
    g.recompute_endpoints()
    g.validate()
    if input_dims is not None:
        g = infer_shapes(g, DimsSpec.row_major(CANONICAL_DATA_DIMS, input_dims))
    return g


def pretty_print(g: ComputeGraph) -> str:
    """Canonical text form of a parsed graph; parse(pretty_print(g)) == g."""
    out = []
    for n in g.nodes:
        if n.kind == KIND_INPUT:
            edge = n.outputs[0]
            out.append(f'input: "{edge}"')
            spec = g.edges.get(edge)
            if spec is not None:
                for s in spec.sizes:
                    out.append(f"input_dim: {s}")
        elif n.kind == KIND_CONV:
            p = n.params
            out.append("layer {")
            out.append(f'  name: "{n.name}"')
            out.append('  type: "Convolution"')
            out.append(f'  bottom: "{n.inputs[0]}"')
            out.append(f'  top: "{n.outputs[0]}"')
            out.append("  convolution_param {")
            out.append(f"    num_output: {p.out_chans}")
            out.append(f"    kernel_size: {p.ksz}")
            out.append(f"    stride: {p.stride}")
            out.append(f"    pad: {p.pad}")
            out.append("  }")
            out.append("}")
        elif n.kind == KIND_POOL:
            p = n.params
            out.append("layer {")
            out.append(f'  name: "{n.name}"')
            out.append('  type: "Pooling"')
            out.append(f'  bottom: "{n.inputs[0]}"')
            out.append(f'  top: "{n.outputs[0]}"')
            out.append("  pooling_param {")
            out.append("    pool: MAX")
            out.append(f"    kernel_size: {p.ksz}")
            out.append(f"    stride: {p.stride}")
            out.append(f"    pad: {p.pad}")
            out.append("  }")
            out.append("}")
        elif n.kind == KIND_ACT:
            out.append("layer {")
            out.append(f'  name: "{n.name}"')
            out.append('  type: "ReLU"')
            out.append(f'  bottom: "{n.inputs[0]}"')
            out.append(f'  top: "{n.outputs[0]}"')
            out.append("}")
        else:
            raise GraphError(f"cannot pretty-print node kind {n.kind}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# shape inference


def window_out(in_sz: int, ksz: int, stride: int, pad: int) -> int:
    return (in_sz + 2 * pad - ksz) // stride + 1


def infer_shapes(g: ComputeGraph, input_dims: DimsSpec) -> ComputeGraph:
    """Annotate every edge with its DimsSpec, propagating from the input."""
    g = g.copy()
    for n in g.nodes:
        if n.kind == KIND_INPUT:
            if input_dims.names != CANONICAL_DATA_DIMS:
                raise GraphError(f"input dims must be {CANONICAL_DATA_DIMS}, got {input_dims.names}")
            g.edges[n.outputs[0]] = input_dims
    from .graphopt import schedule  # deferred: graphopt imports this module

    for name in schedule(g):
        n = g.node(name)
        if n.kind == KIND_INPUT:
            continue
        ind = g.edges[n.inputs[0]]
        if ind is None:
            raise GraphError(f"node '{n.name}': input edge not inferred")
        if n.kind == KIND_CONV:
            p = n.params
            b, ic, h, w = (ind.size_of(d) for d in CANONICAL_DATA_DIMS)
            oy = window_out(h, p.ksz, p.stride, p.pad)
            ox = window_out(w, p.ksz, p.stride, p.pad)
            if oy < 1:
                raise NonPositiveOutputDim(n.name, "y")
            if ox < 1:
                raise NonPositiveOutputDim(n.name, "x")
            g.edges[n.inputs[1]] = DimsSpec.row_major(CANONICAL_FILTS_DIMS, (p.out_chans, ic, p.ksz, p.ksz))
            g.edges[n.inputs[2]] = DimsSpec.row_major(CANONICAL_BIAS_DIMS, (p.out_chans,))
            g.edges[n.outputs[0]] = DimsSpec.row_major(CANONICAL_DATA_DIMS, (b, p.out_chans, oy, ox))
        elif n.kind == KIND_POOL:
            p = n.params
            b, c, h, w = (ind.size_of(d) for d in CANONICAL_DATA_DIMS)
            oy = window_out(h, p.ksz, p.stride, p.pad)
            ox = window_out(w, p.ksz, p.stride, p.pad)
            if oy < 1:
                raise NonPositiveOutputDim(n.name, "y")
            if ox < 1:
                raise NonPositiveOutputDim(n.name, "x")
            g.edges[n.outputs[0]] = DimsSpec.row_major(CANONICAL_DATA_DIMS, (b, c, oy, ox))
        elif n.kind == KIND_ACT:
            g.edges[n.outputs[0]] = ind
        elif n.kind == KIND_CONVERT:
            g.edges[n.outputs[0]] = n.params.target
        else:
            raise GraphError(f"cannot infer shapes for kind {n.kind}")
    return g


@dataclass(frozen=True)
class FlopCount:
    value: int
    exact: bool  # False when the op kind has no FLOP accounting


def flops_of(node: OpNode, edges: dict[str, DimsSpec | None]) -> FlopCount:
    """Multiply+add FLOPs of a convolution (bias/activation excluded).

    Non-convolution kinds report zero with exact=False rather than raising.
    """
    if node.kind != KIND_CONV:
        return FlopCount(0, False)
    p = node.params
    out = edges[node.outputs[0]]
    ind = edges[node.inputs[0]]
    if out is None or ind is None:
        raise GraphError(f"node '{node.name}': shapes not inferred")
    ic = ind.size_of("chan")
    b = out.size_of("img")
    oy, ox = out.size_of("y"), out.size_of("x")
    return FlopCount(2 * p.ksz * p.ksz * ic * p.out_chans * oy * ox * b, True)


def replace_node(g: ComputeGraph, old: str, new: OpNode) -> ComputeGraph:
    g = g.copy()
    g.nodes = [new if n.name == old else n for n in g.nodes]
    return g


def conv_graph(p: ConvParams, input_dims: DimsSpec, name: str = "conv") -> ComputeGraph:
    """Single-convolution graph; the standard building block for benchmarks."""
    g = ComputeGraph()
    g.edges["data"] = None
    g.nodes.append(OpNode("data_input", KIND_INPUT, None, (), ("data",)))
    for e in (f"{name}_filts", f"{name}_bias", f"{name}_out"):
        g.edges[e] = None
    g.nodes.append(OpNode(name, KIND_CONV, p, ("data", f"{name}_filts", f"{name}_bias"), (f"{name}_out",)))
    g.recompute_endpoints()
    return infer_shapes(g, input_dims)


def set_fused_activation(node: OpNode, act: str | None) -> OpNode:
    return replace(node, fused_activation=act)
