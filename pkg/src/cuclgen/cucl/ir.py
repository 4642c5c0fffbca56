"""Parsed kernel form: a statement tree over a small C-like expression language.

Buffer spaces (global vs. local) are resolved at execution time from what a
subscript's base name refers to, so the same tree serves both dialect
renderings of a kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# expression nodes -----------------------------------------------------------


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class FloatLit:
    value: float


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class IdiomRef:
    # LOCAL_ID_1D | GROUP_ID_1D | LOCAL_SZ_1D
    name: str


@dataclass(frozen=True)
class MetaRef:
    field: str


@dataclass(frozen=True)
class Bin:
    op: str  # + - * / % < > <= >= == != && ||
    left: object
    right: object


@dataclass(frozen=True)
class Un:
    op: str  # - !
    operand: object


@dataclass(frozen=True)
class Ternary:
    cond: object
    then: object
    other: object


@dataclass(frozen=True)
class Load:
    base: str
    index: object


@dataclass(frozen=True)
class VecLoad:
    base: str
    offset: object  # element offset of lane 0
    index: object  # trailing subscript, in units of `width` elements
    width: int


@dataclass(frozen=True)
class Member:
    value: object
    comp: int


@dataclass(frozen=True)
class Fma:
    a: object
    b: object
    c: object


# lvalues ---------------------------------------------------------------------


@dataclass(frozen=True)
class NameLhs:
    name: str


@dataclass(frozen=True)
class IndexLhs:
    base: str
    index: object


@dataclass(frozen=True)
class VecIndexLhs:
    base: str
    offset: object
    index: object
    width: int


@dataclass(frozen=True)
class MemberLhs:
    name: str
    comp: int


# statements ------------------------------------------------------------------


@dataclass(frozen=True)
class VarDecl:
    type: str  # int | float | float2 | float4 | float8
    name: str
    init: object | None


@dataclass(frozen=True)
class LocalDecl:
    name: str
    size: int  # element count; must fold to a constant at parse time


@dataclass(frozen=True)
class PtrDecl:
    name: str
    base: str
    offset: object


@dataclass(frozen=True)
class Assign:
    lhs: object
    op: str  # = | += | -= | *=
    value: object


@dataclass(frozen=True)
class If:
    cond: object
    body: tuple


@dataclass(frozen=True)
class For:
    var: str
    lo: object
    hi: object
    body: tuple
    static_trip: int | None  # folded trip count when bounds are literal


@dataclass(frozen=True)
class Barrier:
    site: int  # unique per syntactic barrier, for divergence detection


@dataclass(frozen=True)
class Block:
    body: tuple


@dataclass(frozen=True)
class Pragma:
    text: str  # unroll hint; semantically void


# kernel ----------------------------------------------------------------------


@dataclass(frozen=True)
class ArgDecl:
    name: str
    is_const: bool
    is_meta: bool = False


@dataclass(frozen=True)
class Kernel:
    name: str
    args: tuple[ArgDecl, ...]
    body: tuple
    meta_fields: tuple[str, ...] = field(default=())

    @property
    def buffer_args(self):
        return tuple(a for a in self.args if not a.is_meta)

    @property
    def meta_arg(self):
        for a in self.args:
            if a.is_meta:
                return a
        return None


VEC_WIDTHS = {"float": 1, "float2": 2, "float4": 4, "float8": 8}

# component spellings per vector width
COMP_NAMES = {
    2: {"x": 0, "y": 1},
    4: {"x": 0, "y": 1, "z": 2, "w": 3},
    8: {f"s{i}": i for i in range(8)},
}


def comp_index(name: str) -> int:
    for table in COMP_NAMES.values():
        if name in table:
            return table[name]
    raise KeyError(name)
