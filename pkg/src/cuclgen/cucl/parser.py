"""Recursive-descent parser for instantiated kernels (idiom form, no template vars).

The accepted language is deliberately tiny: declarations, assignments,
compound assignments, `if` (no else; selection is the ternary operator),
constant-bound `for`, barriers, and vector loads/stores written as pointer
casts.  `&&`, `||`, and `?:` evaluate both sides -- expressions here are
side-effect free, so this only pins down the operation counters.
"""

from __future__ import annotations

import re

from .ir import (
    ArgDecl,
    Assign,
    Barrier,
    Bin,
    Block,
    FloatLit,
    Fma,
    For,
    IdiomRef,
    If,
    IndexLhs,
    IntLit,
    Kernel,
    Load,
    LocalDecl,
    Member,
    MemberLhs,
    MetaRef,
    NameLhs,
    Pragma,
    PtrDecl,
    Ternary,
    Un,
    VarDecl,
    VarRef,
    VecIndexLhs,
    VecLoad,
    VEC_WIDTHS,
    comp_index,
)
from ..errors import CuclgenError

NULLARY_IDIOMS = ("LOCAL_ID_1D", "GROUP_ID_1D", "LOCAL_SZ_1D")
QUAL_TOKENS = ("GLOBAL_MEM", "LOCAL_PTR", "LOCAL_MEM")
KEYWORDS = ("void", "int", "float", "float2", "float4", "float8", "const", "if", "for", "typedef", "struct")
TYPE_TOKENS = ("float", "float2", "float4", "float8")


class ParseError(CuclgenError):
    def __init__(self, line: int, col: int, expected: str, got: str = ""):
        msg = f"{line}:{col}: expected {expected}"
        if got:
            msg += f", got {got!r}"
        super().__init__(msg)
        self.line = line
        self.col = col
        self.expected = expected


class UnsupportedConstruct(CuclgenError):
    pass


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col

    def __repr__(self):
        return f"{self.kind}:{self.text!r}"


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<pragma>\#[^\n]*)
  | (?P<float>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?f|\d+\.\d*(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>->|\+\+|\+=|-=|\*=|<=|>=|==|!=|&&|\|\||[()\[\]{};,=<>+\-*/%?:.!])
    """,
    re.VERBOSE | re.DOTALL,
)


def tokenize(src: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    n = len(src)
    while pos < n:
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(line, pos - line_start + 1, "token", src[pos])
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "comment":
            line += text.count("\n")
        elif kind not in ("ws",):
            if kind == "pragma":
                text = text.strip()
            toks.append(_Tok(kind, text, line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class KernelParser:
    def __init__(self, src: str):
        self.toks = tokenize(src)
        self.pos = 0
        self.meta_fields: tuple[str, ...] = ()
        self.meta_arg_name: str | None = None
        self.barrier_count = 0

    # token helpers -----------------------------------------------------------

    def peek(self, ahead=0) -> _Tok:
        toks = self.toks
        i = self.pos + ahead
        return toks[i] if i < len(toks) else toks[-1]

    def at(self, text: str) -> bool:
        t = self.peek()
        return t.text == text and t.kind in ("punct", "ident")

    def take(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.take()
        if t.text != text:
            raise ParseError(t.line, t.col, f"'{text}'", t.text)
        return t

    def expect_ident(self) -> str:
        t = self.take()
        if t.kind != "ident" or t.text in KEYWORDS:
            raise ParseError(t.line, t.col, "identifier", t.text)
        return t.text

    def err(self, expected: str):
        t = self.peek()
        raise ParseError(t.line, t.col, expected, t.text)

    # entry --------------------------------------------------------------------

    def parse(self) -> Kernel:
        if self.at("typedef"):
            self.parse_meta_typedef()
        self.expect("KERNEL_QUAL")
        self.expect("void")
        name = self.expect_ident()
        self.expect("(")
        args = []
        while not self.at(")"):
            if args:
                self.expect(",")
            args.append(self.parse_arg())
        self.expect(")")
        body = self.parse_block()
        t = self.peek()
        if t.kind != "eof":
            raise ParseError(t.line, t.col, "end of kernel", t.text)
        return Kernel(name=name, args=tuple(args), body=body, meta_fields=self.meta_fields)

    def parse_meta_typedef(self):
        self.expect("typedef")
        self.expect("struct")
        self.expect("{")
        fields = []
        while not self.at("}"):
            self.expect("int")
            fields.append(self.expect_ident())
            self.expect(";")
        self.expect("}")
        self.expect_ident()  # struct type name
        self.expect(";")
        self.meta_fields = tuple(fields)

    def parse_arg(self) -> ArgDecl:
        if self.at("GLOBAL_MEM"):
            self.take()
        t = self.take()
        if t.kind != "ident":
            raise ParseError(t.line, t.col, "argument type", t.text)
        is_meta = t.text not in ("float",) and t.text != "int"
        if t.text == "int":
            raise UnsupportedConstruct("scalar int kernel arguments are not supported; use the metadata argument")
        is_const = False
        if self.at("const"):
            self.take()
            is_const = True
        self.expect("*")
        name = self.expect_ident()
        if is_meta:
            self.meta_arg_name = name
        return ArgDecl(name=name, is_const=is_const, is_meta=is_meta)

    # statements ----------------------------------------------------------------

    def parse_block(self) -> tuple:
        self.expect("{")
        stmts = []
        while not self.at("}"):
            stmts.append(self.parse_stmt())
        self.expect("}")
        return tuple(stmts)

    def parse_stmt(self):
        t = self.peek()
        if t.kind == "pragma":
            self.take()
            return Pragma(t.text)
        if t.text == "{":
            return Block(self.parse_block())
        if t.text == "BARRIER_SYNC":
            self.take()
            self.expect(";")
            self.barrier_count += 1
            return Barrier(site=self.barrier_count)
        if t.text == "if":
            return self.parse_if()
        if t.text == "for":
            return self.parse_for()
        if t.text in ("LOCAL_MEM", "LOCAL_PTR", "GLOBAL_MEM"):
            qual = self.take().text
            # LOCAL_MEM float name[N]; declares workgroup storage; with a '*'
            # or 'const' it is a pointer declaration like the other qualifiers
            if qual == "LOCAL_MEM" and self.peek().text == "float" and self.peek(1).kind == "ident":
                return self.parse_local_decl()
            return self.parse_float_decl()
        if t.text in ("float", "float2", "float4", "float8"):
            return self.parse_float_decl()
        if t.text == "int":
            self.take()
            name = self.expect_ident()
            self.expect("=")
            init = self.parse_expr()
            self.expect(";")
            return VarDecl("int", name, init)
        if t.text in ("while", "else", "return", "goto", "switch", "do", "break", "continue"):
            raise UnsupportedConstruct(f"'{t.text}' is outside the supported kernel language")
        if t.kind == "ident" or t.text == "(":
            return self.parse_assign()
        self.err("statement")

    def parse_local_decl(self):
        self.expect("float")
        name = self.expect_ident()
        self.expect("[")
        size_expr = self.parse_expr()
        self.expect("]")
        self.expect(";")
        size = _fold_int(size_expr)
        if size is None or size < 1:
            raise UnsupportedConstruct(f"local array '{name}' size must be a positive constant")
        return LocalDecl(name, size)

    def parse_float_decl(self):
        ty = self.take().text  # float | float2 | float4 | float8
        if self.at("const"):
            self.take()
            self.expect("*")
            name = self.expect_ident()
            return self.parse_ptr_init(name)
        if self.at("*"):
            self.take()
            name = self.expect_ident()
            return self.parse_ptr_init(name)
        name = self.expect_ident()
        init = None
        if self.at("="):
            self.take()
            init = self.parse_expr()
        self.expect(";")
        return VarDecl(ty, name, init)

    def parse_ptr_init(self, name):
        self.expect("=")
        base = self.expect_ident()
        if self.at("+"):
            self.take()
            off = self.parse_expr()
        else:
            off = IntLit(0)
        self.expect(";")
        return PtrDecl(name, base, off)

    def parse_if(self):
        self.expect("if")
        self.expect("(")
        cond = self.parse_expr()
        self.expect(")")
        if self.at("{"):
            body = self.parse_block()
        else:
            body = (self.parse_stmt(),)
        return If(cond, body)

    def parse_for(self):
        self.expect("for")
        self.expect("(")
        self.expect("int")
        var = self.expect_ident()
        self.expect("=")
        lo = self.parse_expr()
        self.expect(";")
        v2 = self.expect_ident()
        if v2 != var:
            raise UnsupportedConstruct(f"for-loop condition must test '{var}'")
        self.expect("<")
        hi = self.parse_expr()
        self.expect(";")
        self.expect("++")
        v3 = self.expect_ident()
        if v3 != var:
            raise UnsupportedConstruct(f"for-loop increment must be '++{var}'")
        self.expect(")")
        if self.at("{"):
            body = self.parse_block()
        else:
            body = (self.parse_stmt(),)
        lo_c, hi_c = _fold_int(lo), _fold_int(hi)
        trip = max(0, hi_c - lo_c) if lo_c is not None and hi_c is not None else None
        return For(var, lo, hi, body, trip)

    def parse_assign(self):
        lhs = self.parse_lhs()
        t = self.take()
        if t.text not in ("=", "+=", "-=", "*="):
            raise ParseError(t.line, t.col, "assignment operator", t.text)
        value = self.parse_expr()
        self.expect(";")
        return Assign(lhs, t.text, value)

    def parse_lhs(self):
        if self.at("("):
            cast = self.parse_veccast()
            return VecIndexLhs(cast[0], cast[1], cast[2], cast[3])
        name = self.expect_ident()
        if self.at("["):
            self.take()
            idx = self.parse_expr()
            self.expect("]")
            return IndexLhs(name, idx)
        if self.at("."):
            self.take()
            comp = self.expect_ident()
            try:
                return MemberLhs(name, comp_index(comp))
            except KeyError:
                self.err("vector component")
        return NameLhs(name)

    # expressions ---------------------------------------------------------------

    def parse_expr(self):
        return self.parse_ternary()

    def parse_ternary(self):
        cond = self.parse_or()
        if self.at("?"):
            self.take()
            then = self.parse_ternary()
            self.expect(":")
            other = self.parse_ternary()
            return Ternary(cond, then, other)
        return cond

    def parse_or(self):
        e = self.parse_and()
        while self.at("||"):
            self.take()
            e = Bin("||", e, self.parse_and())
        return e

    def parse_and(self):
        e = self.parse_cmp()
        while self.at("&&"):
            self.take()
            e = Bin("&&", e, self.parse_cmp())
        return e

    def parse_cmp(self):
        e = self.parse_add()
        t = self.peek()
        if t.text in ("<", ">", "<=", ">=", "==", "!="):
            self.take()
            return Bin(t.text, e, self.parse_add())
        return e

    def parse_add(self):
        e = self.parse_mul()
        while self.peek().text in ("+", "-") and self.peek().kind == "punct":
            op = self.take().text
            e = Bin(op, e, self.parse_mul())
        return e

    def parse_mul(self):
        e = self.parse_unary()
        while self.peek().text in ("*", "/", "%") and self.peek().kind == "punct":
            op = self.take().text
            e = Bin(op, e, self.parse_unary())
        return e

    def parse_unary(self):
        t = self.peek()
        if t.text == "-" and t.kind == "punct":
            self.take()
            return Un("-", self.parse_unary())
        if t.text == "!" and t.kind == "punct":
            self.take()
            return Un("!", self.parse_unary())
        return self.parse_postfix()

    def parse_postfix(self):
        e = self.parse_primary()
        while True:
            if self.at("["):
                self.take()
                idx = self.parse_expr()
                self.expect("]")
                if isinstance(e, VarRef):
                    e = Load(e.name, idx)
                else:
                    raise UnsupportedConstruct("subscript base must be a named buffer or pointer")
            elif self.at("."):
                self.take()
                comp = self.expect_ident()
                try:
                    e = Member(e, comp_index(comp))
                except KeyError:
                    self.err("vector component")
            elif self.at("->"):
                self.take()
                field = self.expect_ident()
                if not isinstance(e, VarRef) or (self.meta_arg_name and e.name != self.meta_arg_name):
                    raise UnsupportedConstruct("'->' is only valid on the metadata argument")
                e = MetaRef(field)
            else:
                return e

    def _at_veccast(self) -> bool:
        if not self.at("("):
            return False
        t1 = self.peek(1)
        t2 = self.peek(2)
        return t1.text == "(" and (t2.text in QUAL_TOKENS or t2.text in TYPE_TOKENS)

    def parse_veccast(self):
        # (( QUAL? floatN const? * )( base + off ))[ idx ]
        self.expect("(")
        self.expect("(")
        if self.peek().text in QUAL_TOKENS:
            self.take()
        ty = self.take().text
        if ty not in VEC_WIDTHS:
            self.err("vector type in cast")
        width = VEC_WIDTHS[ty]
        if self.at("const"):
            self.take()
        self.expect("*")
        self.expect(")")
        self.expect("(")
        base = self.expect_ident()
        if self.at("+"):
            self.take()
            off = self.parse_expr()
        else:
            off = IntLit(0)
        self.expect(")")
        self.expect(")")
        self.expect("[")
        idx = self.parse_expr()
        self.expect("]")
        return (base, off, idx, width)

    def parse_primary(self):
        t = self.peek()
        if t.kind == "int":
            self.take()
            return IntLit(int(t.text))
        if t.kind == "float":
            self.take()
            return FloatLit(float(t.text.rstrip("f")))
        if t.text in NULLARY_IDIOMS:
            self.take()
            return IdiomRef(t.text)
        if t.text == "fma":
            self.take()
            self.expect("(")
            a = self.parse_expr()
            self.expect(",")
            b = self.parse_expr()
            self.expect(",")
            c = self.parse_expr()
            self.expect(")")
            return Fma(a, b, c)
        if self._at_veccast():
            base, off, idx, width = self.parse_veccast()
            return VecLoad(base, off, idx, width)
        if t.text == "(":
            self.take()
            e = self.parse_expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            if t.text in KEYWORDS or t.text in QUAL_TOKENS:
                raise UnsupportedConstruct(f"'{t.text}' cannot appear in an expression")
            self.take()
            return VarRef(t.text)
        self.err("expression")


def _fold_int(expr):
    """Fold an expression of integer literals to an int, else None."""
    if isinstance(expr, IntLit):
        return expr.value
    if isinstance(expr, Un) and expr.op == "-":
        v = _fold_int(expr.operand)
        return None if v is None else -v
    if isinstance(expr, Bin):
        l, r = _fold_int(expr.left), _fold_int(expr.right)
        if l is None or r is None:
            return None
        if expr.op == "+":
            return l + r
        if expr.op == "-":
            return l - r
        if expr.op == "*":
            return l * r
        if expr.op == "/":
            return _c_div(l, r)
        if expr.op == "%":
            return _c_mod(l, r)
    return None


def _c_div(a: int, b: int) -> int:
    """C integer division: truncation toward zero."""
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _c_mod(a: int, b: int) -> int:
    return a - _c_div(a, b) * b


def parse_kernel(src: str) -> Kernel:
    """Parse instantiated (template-free) kernel text into executable form."""
    if "%(" in src:
        raise UnsupportedConstruct("kernel text still contains template variables")
    return KernelParser(src).parse()
