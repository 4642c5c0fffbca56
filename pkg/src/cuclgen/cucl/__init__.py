"""CUCL template engine.

A kernel template is text in the CUDA/OpenCL intersection language with two
kinds of holes: platform idioms (LOCAL_ID_1D, BARRIER_SYNC, ...) that a fixed
table rewrites per dialect, and `%(name)` template variables that either come
from the ND-Array argument declarations (`%(myarray_mydim_size)` and
`_stride`) or are free variables spliced in by the metacode generators.

Size/stride variables resolve to decimal constants in static mode, or to
fields of a trailing metadata argument in dynamic mode; everything else about
the kernel text is identical between the two.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import CuclgenError
from ..ndarray import DimsSpec, dims_check
from .ir import Kernel  # noqa: F401  (re-export for consumers)
from .parser import ParseError, UnsupportedConstruct, parse_kernel  # noqa: F401

OPENCL = "opencl"
CUDA = "cuda"
STATIC = "static"
DYNAMIC = "dynamic"

META_TYPE = "cucl_meta"
META_ARG = "meta"

# idiom -> (OpenCL text, CUDA text)
IDIOM_TABLE: dict[str, tuple[str, str]] = {
    "LOCAL_ID_1D": ("get_local_id(0)", "threadIdx.x"),
    "GROUP_ID_1D": ("get_group_id(0)", "blockIdx.x"),
    "LOCAL_SZ_1D": ("get_local_size(0)", "blockDim.x"),
    "BARRIER_SYNC": ("barrier(CLK_LOCAL_MEM_FENCE)", "__syncthreads()"),
    "LOCAL_MEM": ("__local", "__shared__"),
    "KERNEL_QUAL": ("__kernel", 'extern "C" __global__'),
    "GLOBAL_MEM": ("__global", ""),
    # pointer-cast qualifier: OpenCL needs the address space on casts, CUDA
    # uses generic pointers there (__shared__ is not a pointer qualifier)
    "LOCAL_PTR": ("__local", ""),
}

_TEMPLATE_VAR_RE = re.compile(r"%\(([a-z_][a-z0-9_]*)\)")
_IDIOM_RE = re.compile(r"\b(" + "|".join(IDIOM_TABLE) + r")\b")
# a site is the token plus one optional trailing space, absorbed when the
# expansion is empty so that "GLOBAL_MEM float" renders to "float" on CUDA
_IDIOM_SITE_RE = re.compile(r"\b(" + "|".join(IDIOM_TABLE) + r")\b( ?)")
_CAPS_TOKEN_RE = re.compile(r"\b[A-Z][A-Z0-9_]+\b")
_RAW_RE = re.compile(r"@(opencl|cuda)\{(.*?)\}@", re.S)


class TemplateError(CuclgenError):
    pass


class UnknownTemplateVar(TemplateError):
    pass


class UnresolvedInStatic(TemplateError):
    pass


class UnboundArg(TemplateError):
    pass


class UnknownIdiom(CuclgenError):
    pass


@dataclass(frozen=True)
class TemplateArg:
    """A kernel argument declaration: direction plus dimension names only."""

    name: str
    direction: str  # "in" | "out"
    dim_names: tuple[str, ...]

    def declared_spec(self) -> DimsSpec:
        # names-only declaration; sizes are what instantiation specializes on
        return DimsSpec.row_major(self.dim_names, (1,) * len(self.dim_names))


@dataclass(frozen=True)
class CuclTemplate:
    name: str
    args: tuple[TemplateArg, ...]
    body: str  # text between the kernel braces
    free_vars: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        for v in set(_TEMPLATE_VAR_RE.findall(self.body)):
            if v in self.free_vars:
                continue
            if self._resolve_dim_var(v) is None:
                raise TemplateError(f"template '{self.name}': variable %({v}) is neither free nor derivable")

    def arg(self, name: str) -> TemplateArg:
        for a in self.args:
            if a.name == name:
                return a
        raise TemplateError(f"template '{self.name}': no argument '{name}'")

    def _resolve_dim_var(self, var: str):
        """Match <arg>_<dim>_size or <arg>_<dim>_stride; None if not derivable."""
        for kind in ("size", "stride"):
            suffix = "_" + kind
            if not var.endswith(suffix):
                continue
            rest = var[: -len(suffix)]
            hits = []
            for a in self.args:
                prefix = a.name + "_"
                if rest.startswith(prefix) and rest[len(prefix) :] in a.dim_names:
                    hits.append((a.name, rest[len(prefix) :], kind))
            if len(hits) > 1:
                raise TemplateError(f"template '{self.name}': %({var}) is ambiguous: {hits}")
            if hits:
                return hits[0]
        return None


@dataclass(frozen=True)
class ArgIssue:
    arg: str
    problem: object  # "unbound" or a DimsMismatch

    def __str__(self):
        if self.problem == "unbound":
            return f"argument '{self.arg}': no array bound"
        return f"argument '{self.arg}': {self.problem}"


def check_args(template: CuclTemplate, bindings: dict[str, DimsSpec]) -> list[ArgIssue]:
    """Name-based type check of every binding against its declaration."""
    issues = []
    for a in template.args:
        spec = bindings.get(a.name)
        if spec is None:
            issues.append(ArgIssue(a.name, "unbound"))
            continue
        mism = dims_check(a.declared_spec(), spec)
        if mism is not None:
            issues.append(ArgIssue(a.name, mism))
    return issues


@dataclass(frozen=True)
class Instantiation:
    """A template plus everything needed to turn it into kernel text."""

    template: CuclTemplate
    bindings: dict[str, DimsSpec]
    mode: str  # STATIC | DYNAMIC
    var_values: dict[str, str] = field(default_factory=dict)
    launch: object | None = None  # backend.LaunchConfig, decided by the generator


def instantiate(inst: Instantiation) -> str:
    """Expand a template into complete CUCL kernel text (idiom form).

    Free variables splice verbatim first, so generator snippets may themselves
    reference size/stride variables.  Deterministic: equal inputs give
    byte-identical text, and the output never contains "%(".
    """
    t = inst.template
    if inst.mode not in (STATIC, DYNAMIC):
        raise TemplateError(f"bad mode {inst.mode!r}")
    issues = check_args(t, inst.bindings)
    if issues:
        raise UnboundArg("; ".join(str(i) for i in issues))

    body = t.body
    for _ in range(4):  # free vars may nest a few levels
        expanded = _TEMPLATE_VAR_RE.sub(
            lambda m: inst.var_values[m.group(1)] if m.group(1) in inst.var_values else m.group(0), body
        )
        if expanded == body:
            break
        body = expanded

    meta_fields: set[str] = set()

    def sub_dim_var(m: re.Match) -> str:
        var = m.group(1)
        if var in inst.var_values:
            return inst.var_values[var]
        hit = t._resolve_dim_var(var)
        if hit is None:
            raise UnknownTemplateVar(f"%({var}) in template '{t.name}'")
        arg, dim, kind = hit
        if inst.mode == STATIC:
            spec = inst.bindings.get(arg)
            if spec is None or not spec.has_dim(dim):
                raise UnresolvedInStatic(f"%({var}): no size bound for '{arg}.{dim}'")
            return str(spec.size_of(dim) if kind == "size" else spec.stride_of(dim))
        meta_fields.add(var)
        return f"{META_ARG}->{var}"

    body = _TEMPLATE_VAR_RE.sub(sub_dim_var, body)
    if "%(" in body:
        raise UnknownTemplateVar(f"unresolved template variable near: {body[body.index('%('):][:40]!r}")

    decls = []
    for a in t.args:
        const = " const" if a.direction == "in" else ""
        decls.append(f"GLOBAL_MEM float{const}* {a.name}")
    prologue = ""
    if inst.mode == DYNAMIC:
        decls.append(f"GLOBAL_MEM {META_TYPE} const* {META_ARG}")
        lines = "".join(f"  int {f};\n" for f in sorted(meta_fields))
        prologue = "typedef struct {\n" + lines + f"}} {META_TYPE};\n"
    sig = f"KERNEL_QUAL void {t.name}( " + ", ".join(decls) + " ) {"
    return prologue + sig + "\n" + body.rstrip("\n") + "\n}\n"


def meta_values(inst: Instantiation, fields) -> dict[str, int]:
    """Resolve dynamic-mode metadata fields to integers from the bindings."""
    out = {}
    for f in fields:
        hit = inst.template._resolve_dim_var(f)
        if hit is None:
            raise UnknownTemplateVar(f"metadata field '{f}' is not derivable")
        arg, dim, kind = hit
        spec = inst.bindings[arg]
        out[f] = spec.size_of(dim) if kind == "size" else spec.stride_of(dim)
    return out


# ---------------------------------------------------------------------------
# dialect rendering


def _check_idioms(src: str):
    stripped = _IDIOM_RE.sub("", src)
    for m in _CAPS_TOKEN_RE.finditer(stripped):
        raise UnknownIdiom(f"unknown idiom token {m.group(0)!r}")


def _apply_raw_regions(src: str, dialect: str) -> str:
    return _RAW_RE.sub(lambda m: m.group(2) if m.group(1) == dialect else "", src)


def render_dialect(src: str, dialect: str) -> str:
    """Rewrite idiom tokens to one platform's spelling. Purely textual."""
    if dialect not in (OPENCL, CUDA):
        raise CuclgenError(f"unknown dialect {dialect!r}")
    src = _apply_raw_regions(src, dialect)
    _check_idioms(src)
    col = 0 if dialect == OPENCL else 1

    def sub(m: re.Match) -> str:
        expansion = IDIOM_TABLE[m.group(1)][col]
        return expansion + m.group(2) if expansion else ""

    return _IDIOM_SITE_RE.sub(sub, src)


def unrender_dialect(text: str, dialect: str) -> str:
    """Map one dialect's spellings back to idiom tokens.

    Empty expansions (CUDA's global/local pointer qualifiers) cannot be
    restored; the kernel grammar treats those qualifiers as optional, and both
    __local spellings map back to LOCAL_MEM.
    """
    if dialect not in (OPENCL, CUDA):
        raise CuclgenError(f"unknown dialect {dialect!r}")
    col = 0 if dialect == OPENCL else 1
    pairs = sorted(
        ((texts[col], idiom) for idiom, texts in IDIOM_TABLE.items() if texts[col]),
        key=lambda p: -len(p[0]),
    )
    for expansion, idiom in pairs:
        if idiom == "LOCAL_PTR":
            continue  # same expansion as LOCAL_MEM; normalize to that
        text = text.replace(expansion, idiom)
    return text


def dialect_segments(src: str) -> list[tuple[str, str, str]]:
    """Split idiom-form text into ("plain", text, "") and ("idiom", name, sp) pieces.

    The plain pieces are byte-identical across both renderings; only the idiom
    pieces differ.  Site boundaries match render_dialect exactly (sp is the
    absorbed trailing space, if any).
    """
    out = []
    pos = 0
    for m in _IDIOM_SITE_RE.finditer(src):
        if m.start() > pos:
            out.append(("plain", src[pos : m.start()], ""))
        out.append(("idiom", m.group(1), m.group(2)))
        pos = m.end()
    if pos < len(src):
        out.append(("plain", src[pos:], ""))
    return out


def render_segment(kind: str, text: str, space: str, dialect: str) -> str:
    """Render one segment; concatenating all segments equals render_dialect."""
    if kind == "plain":
        return text
    expansion = IDIOM_TABLE[text][0 if dialect == OPENCL else 1]
    return expansion + space if expansion else ""
