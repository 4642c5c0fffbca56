"""Deterministic simulated-GPU execution of parsed kernels.

Execution semantics: workgroups are independent; within a workgroup execution
proceeds in barrier-delimited phases.  The strict engine runs each thread of a
phase to completion in a configurable (default ascending) order, which is the
reference semantics.  The default vector engine runs all threads of a
workgroup in lockstep with numpy lanes and masked control flow; for race-free
kernels (all shipped generators) the two produce bit-identical results, which
the test suite checks by permuting the strict engine's thread order.

Counting rules, shared by both engines and the static analyzer: every binary
or unary arithmetic/comparison/logic operation, ternary select, and fma counts
one ALU op per executing thread; every load/store instruction (scalar or
vector) counts once per executing thread against its address space; `&&`,
`||`, and `?:` evaluate both sides.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cucl import Instantiation, instantiate, render_dialect
from .cucl.ir import (
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
)
from .errors import CuclgenError
from .ndarray import NdArray

ITER_CAP_DEFAULT = 2**24


class InterpError(CuclgenError):
    pass


class BarrierDivergence(InterpError):
    pass


class OutOfBoundsAccess(InterpError):
    def __init__(self, buffer: str, offset: int, length: int):
        super().__init__(f"out-of-bounds access to '{buffer}': offset {offset}, length {length}")
        self.buffer = buffer
        self.offset = offset
        self.length = length


class MisalignedVectorAccess(InterpError):
    pass


class NonTerminating(InterpError):
    pass


@dataclass(frozen=True)
class LaunchConfig:
    group_count: int
    local_size: int

    def __post_init__(self):
        if self.group_count < 1 or self.local_size < 1:
            raise InterpError(f"bad launch {self}")
        if self.local_size > 1024:
            raise InterpError(f"local_size {self.local_size} exceeds 1024")

    @property
    def total_threads(self) -> int:
        return self.group_count * self.local_size


@dataclass
class CostReport:
    alu_ops: int = 0
    global_loads: int = 0
    global_stores: int = 0
    local_loads: int = 0
    local_stores: int = 0
    barriers: int = 0
    wall_ns: int = 0

    def counters(self) -> tuple[int, ...]:
        """Deterministic counters only (wall clock excluded)."""
        return (self.alu_ops, self.global_loads, self.global_stores, self.local_loads, self.local_stores, self.barriers)

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(*(a + b for a, b in zip(self.counters(), other.counters())), self.wall_ns + other.wall_ns)


@dataclass(frozen=True)
class CostWeights:
    """Weighted-counter model standing in for hardware time at desk scale.

    Defaults approximate a 16:1 global-memory-to-ALU cost ratio.
    """

    alu_ops: float = 1
    global_loads: float = 16
    global_stores: float = 16
    local_loads: float = 2
    local_stores: float = 2
    barriers: float = 32
    wall_ns: float = 0


def cost(report: CostReport, w: CostWeights = CostWeights()):
    """Weighted counter sum; integral whenever the weights are integral."""
    return (
        w.alu_ops * report.alu_ops
        + w.global_loads * report.global_loads
        + w.global_stores * report.global_stores
        + w.local_loads * report.local_loads
        + w.local_stores * report.local_stores
        + w.barriers * report.barriers
        + w.wall_ns * report.wall_ns
    )


# ---------------------------------------------------------------------------
# shared helpers


def _c_div_np(a, b):
    """C-style integer division (truncate toward zero) for ints or arrays."""
    if isinstance(a, int) and isinstance(b, int):
        if b == 0:
            raise InterpError("integer division by zero")
        q = abs(a) // abs(b)
        return -q if (a < 0) != (b < 0) else q
    a = np.asarray(a)
    b = np.asarray(b)
    if np.any(b == 0):
        raise InterpError("integer division by zero")
    q = np.abs(a) // np.abs(b)
    return np.where((a < 0) != (b < 0), -q, q)


def _c_mod_np(a, b):
    return a - _c_div_np(a, b) * b


_F32D = np.dtype(np.float32)


def _is_float_val(v) -> bool:
    t = type(v)
    return t is np.float32 or (t is np.ndarray and v.dtype is _F32D) or t is float


def _to_f32(v):
    if isinstance(v, np.ndarray):
        return v if v.dtype == np.float32 else v.astype(np.float32)
    return np.float32(v)


def _fma_vals(a, b, c):
    # single-rounding fused multiply-add: the float64 product of float32
    # inputs is exact, so only the final add rounds
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) or isinstance(c, np.ndarray):
        r = np.multiply(a, b, dtype=np.float64)
        r += c
        return r.astype(np.float32)
    return np.float32(np.float64(a) * np.float64(b) + np.float64(c))


def _collect_local_decls(stmts, out: dict[str, int]):
    for s in stmts:
        if isinstance(s, LocalDecl):
            if s.name in out and out[s.name] != s.size:
                raise InterpError(f"conflicting sizes for local '{s.name}'")
            out[s.name] = s.size
        elif isinstance(s, (If, Block)):
            _collect_local_decls(s.body, out)
        elif isinstance(s, For):
            _collect_local_decls(s.body, out)


_ZERO_DEFAULTS = {"int": 0, "float": np.float32(0.0)}


# ---------------------------------------------------------------------------
# lockstep vector engine


class _Pointer:
    __slots__ = ("space", "name", "arr", "base")

    def __init__(self, space, name, arr, base):
        self.space = space
        self.name = name
        self.arr = arr
        self.base = base  # int or per-lane int vector


class _VectorExec:
    """Lockstep engine: one numpy lane per thread of a workgroup.

    The statement tree is compiled once into a tree of closures, each taking
    the current (mask, active-lane-count); uniform values stay Python/numpy
    scalars and only fan out to per-lane vectors when thread-dependent.
    Counters live in a plain list for speed: [alu, gl, gs, ll, ls, barriers].
    """

    def __init__(self, ir: Kernel, launch: LaunchConfig, buffers, meta, report: CostReport, iter_cap: int):
        self.ir = ir
        self.launch = launch
        self.buffers = buffers
        self.meta = meta or {}
        self.report = report
        self.iter_cap = iter_cap
        self.iters = 0
        self.n = launch.local_size
        self.lane = np.arange(self.n, dtype=np.int64)
        self.local_sizes: dict[str, int] = {}
        _collect_local_decls(ir.body, self.local_sizes)
        self.c = [0, 0, 0, 0, 0, 0]
        # block scoping via undo records: a pop restores (or removes) exactly
        # the names declared in that block
        self.env: dict = {}
        self.undo: list[list] = []
        self.group_id = 0
        self.prog = [self._cs(s) for s in ir.body]

    def run(self):
        for gid in range(self.launch.group_count):
            self.group_id = gid
            self.locals_mem = {name: np.zeros(size, dtype=np.float32) for name, size in self.local_sizes.items()}
            self.env.clear()
            self.undo.clear()
            n = self.n
            for f in self.prog:
                f(None, n)
        c = self.c
        self.report.alu_ops += c[0]
        self.report.global_loads += c[1]
        self.report.global_stores += c[2]
        self.report.local_loads += c[3]
        self.report.local_stores += c[4]
        self.report.barriers += c[5]

    # --- environment ---------------------------------------------------------

    def _lookup(self, name):
        v = self.env.get(name)
        if v is None:
            raise InterpError(f"undefined variable '{name}'")
        return v

    def _assign_existing(self, name, value):
        if name not in self.env:
            raise InterpError(f"assignment to undeclared variable '{name}'")
        self.env[name] = value

    def _declare(self, name, value):
        if self.undo:
            self.undo[-1].append((name, self.env.get(name)))
        self.env[name] = value

    def _push(self):
        self.undo.append([])

    def _pop(self):
        env = self.env
        for name, old in self.undo.pop():
            if old is None:
                env.pop(name, None)
            else:
                env[name] = old

    def _resolve_buf(self, name):
        v = self.env.get(name)
        if v is not None:
            if isinstance(v, _Pointer):
                return v.space, v.arr, v.base
            raise InterpError(f"'{name}' is not subscriptable")
        arr = self.locals_mem.get(name)
        if arr is not None:
            return "local", arr, 0
        arr = self.buffers.get(name)
        if arr is not None:
            return "global", arr, 0
        raise InterpError(f"unknown buffer '{name}'")

    def _merge(self, mask, new, old):
        if isinstance(new, np.ndarray) and new.ndim == 2:
            return np.where(mask[:, None], new, self._as_vecn(old, new.shape[1]))
        if _is_float_val(new) or _is_float_val(old):
            return np.where(mask, _to_f32(new), _to_f32(old))
        return np.where(mask, new, old)

    def _as_vecn(self, v, w):
        if isinstance(v, np.ndarray) and v.ndim == 2 and v.shape[1] == w:
            return v
        out = np.empty((self.n, w), dtype=np.float32)
        if isinstance(v, np.ndarray):
            out[:] = _to_f32(v)[:, None]
        else:
            out[:] = _to_f32(v)
        return out

    # --- memory --------------------------------------------------------------

    def _bounds_check(self, name, eff, length, mask, span=1):
        if isinstance(eff, np.ndarray):
            chk = eff if mask is None else eff[mask]
            if chk.size and (int(chk.min()) < 0 or int(chk.max()) + span - 1 >= length):
                bad = chk[(chk < 0) | (chk + span - 1 >= length)]
                raise OutOfBoundsAccess(name, int(bad[0]), length)
        else:
            if eff < 0 or eff + span - 1 >= length:
                raise OutOfBoundsAccess(name, int(eff), length)

    def _load(self, name, eff, mask, active):
        space, arr, base = self._resolve_buf(name)
        if isinstance(base, np.ndarray) or base != 0:
            eff = base + eff
        self._bounds_check(name, eff, len(arr), mask)
        self.c[1 if space == "global" else 3] += active
        if not isinstance(eff, np.ndarray):
            return arr[eff]
        if mask is None:
            return arr[eff]
        out = np.zeros(self.n, dtype=np.float32)
        out[mask] = arr[eff[mask]]
        return out

    def _store(self, name, eff, val, mask, active):
        space, arr, base = self._resolve_buf(name)
        if isinstance(base, np.ndarray) or base != 0:
            eff = base + eff
        self._bounds_check(name, eff, len(arr), mask)
        self.c[2 if space == "global" else 4] += active
        v = _to_f32(val)
        if not isinstance(eff, np.ndarray):
            if isinstance(v, np.ndarray):
                raise InterpError("per-lane value stored through uniform address")
            arr[eff] = v
            return
        if mask is None:
            arr[eff] = v
        else:
            arr[eff[mask]] = v[mask] if isinstance(v, np.ndarray) else v

    def _check_aligned(self, eff, width, mask):
        if isinstance(eff, np.ndarray):
            chk = eff if mask is None else eff[mask]
            if chk.size and np.any(chk % width != 0):
                bad = chk[chk % width != 0]
                raise MisalignedVectorAccess(f"offset {int(bad[0])} not a multiple of {width}")
        elif eff % width != 0:
            raise MisalignedVectorAccess(f"offset {int(eff)} not a multiple of {width}")

    def _vec_load(self, name, eff, width, mask, active):
        space, arr, base = self._resolve_buf(name)
        eff = base + eff
        self._check_aligned(eff, width, mask)
        self._bounds_check(name, eff, len(arr), mask, span=width)
        self.c[1 if space == "global" else 3] += active
        if not isinstance(eff, np.ndarray):
            eff = np.full(self.n, eff, dtype=np.int64)
        gather = eff[:, None] + np.arange(width, dtype=np.int64)
        if mask is None:
            return arr[gather]
        out = np.zeros((self.n, width), dtype=np.float32)
        out[mask] = arr[gather[mask]]
        return out

    def _vec_store(self, name, eff, width, val, mask, active):
        space, arr, base = self._resolve_buf(name)
        eff = base + eff
        self._check_aligned(eff, width, mask)
        self._bounds_check(name, eff, len(arr), mask, span=width)
        self.c[2 if space == "global" else 4] += active
        v = self._as_vecn(val, width)
        if not isinstance(eff, np.ndarray):
            eff = np.full(self.n, eff, dtype=np.int64)
        scatter = eff[:, None] + np.arange(width, dtype=np.int64)
        if mask is None:
            arr[scatter] = v
        else:
            arr[scatter[mask]] = v[mask]

    # --- expression compilation ----------------------------------------------

    def _ce(self, e):
        ty = type(e)
        c = self.c
        if ty is IntLit:
            v = e.value
            return lambda m, a: v
        if ty is FloatLit:
            v = np.float32(e.value)
            return lambda m, a: v
        if ty is VarRef:
            name = e.name
            look = self._lookup

            def f_var(m, a):
                v = look(name)
                if type(v) is _Pointer:
                    raise InterpError(f"pointer '{name}' used as a value")
                return v

            return f_var
        if ty is Bin:
            return self._c_bin(e.op, self._ce(e.left), self._ce(e.right))
        if ty is Load:
            name = e.base
            fi = self._ce(e.index)
            load = self._load
            return lambda m, a: load(name, fi(m, a), m, a)
        if ty is IdiomRef:
            if e.name == "LOCAL_ID_1D":
                return lambda m, a: self.lane
            if e.name == "GROUP_ID_1D":
                return lambda m, a: self.group_id
            return lambda m, a: self.n
        if ty is Fma:
            fa, fb, fc = self._ce(e.a), self._ce(e.b), self._ce(e.c)

            def f_fma(m, a):
                c[0] += a
                return _fma_vals(_to_f32(fa(m, a)), _to_f32(fb(m, a)), _to_f32(fc(m, a)))

            return f_fma
        if ty is Ternary:
            fcnd, ft, fo = self._ce(e.cond), self._ce(e.then), self._ce(e.other)
            as_vecn = self._as_vecn

            def f_tern(m, a):
                c[0] += a
                cv = fcnd(m, a)
                t = ft(m, a)
                o = fo(m, a)
                if not isinstance(cv, np.ndarray):
                    return t if cv else o
                if isinstance(t, np.ndarray) and t.ndim == 2:
                    return np.where((cv != 0)[:, None], t, as_vecn(o, t.shape[1]))
                if _is_float_val(t) or _is_float_val(o):
                    return np.where(cv != 0, _to_f32(t), _to_f32(o))
                return np.where(cv != 0, t, o)

            return f_tern
        if ty is Un:
            fo = self._ce(e.operand)
            if e.op == "-":

                def f_neg(m, a):
                    c[0] += a
                    return -fo(m, a)

                return f_neg

            def f_not(m, a):
                c[0] += a
                v = fo(m, a)
                if isinstance(v, np.ndarray):
                    return (v == 0).astype(np.int64)
                return 0 if v else 1

            return f_not
        if ty is Member:
            fv = self._ce(e.value)
            comp = e.comp

            def f_member(m, a):
                v = fv(m, a)
                if not (isinstance(v, np.ndarray) and v.ndim == 2):
                    raise InterpError("component access on non-vector value")
                return v[:, comp]

            return f_member
        if ty is VecLoad:
            name = e.base
            foff, fidx = self._ce(e.offset), self._ce(e.index)
            width = e.width
            vload = self._vec_load
            return lambda m, a: vload(name, foff(m, a) + fidx(m, a) * width, width, m, a)
        if ty is MetaRef:
            field = e.field
            meta = self.meta

            def f_meta(m, a):
                try:
                    return meta[field]
                except KeyError:
                    raise InterpError(f"missing metadata field '{field}'") from None

            return f_meta
        raise InterpError(f"cannot evaluate {ty.__name__}")

    def _c_bin(self, op, fl, fr):
        c = self.c
        if op in ("&&", "||"):
            both = op == "&&"

            def f_logic(m, a):
                c[0] += a
                l = fl(m, a)
                r = fr(m, a)
                lt = l != 0 if isinstance(l, np.ndarray) else bool(l)
                rt = r != 0 if isinstance(r, np.ndarray) else bool(r)
                if isinstance(lt, np.ndarray) or isinstance(rt, np.ndarray):
                    return (lt & rt) if both else (lt | rt)
                return int((lt and rt) if both else (lt or rt))

            return f_logic
        if op in ("<", ">", "<=", ">=", "==", "!="):
            import operator

            cmp = {
                "<": operator.lt,
                ">": operator.gt,
                "<=": operator.le,
                ">=": operator.ge,
                "==": operator.eq,
                "!=": operator.ne,
            }[op]

            def f_cmp(m, a):
                c[0] += a
                res = cmp(fl(m, a), fr(m, a))
                return res if isinstance(res, np.ndarray) else int(res)

            return f_cmp
        if op in ("+", "-", "*"):
            import operator

            arith = {"+": operator.add, "-": operator.sub, "*": operator.mul}[op]

            def f_arith(m, a):
                c[0] += a
                l = fl(m, a)
                r = fr(m, a)
                if _is_float_val(l) != _is_float_val(r):
                    l = _to_f32(l)
                    r = _to_f32(r)
                return arith(l, r)

            return f_arith
        if op == "/":

            def f_div(m, a):
                c[0] += a
                l = fl(m, a)
                r = fr(m, a)
                if _is_float_val(l) or _is_float_val(r):
                    return _to_f32(l) / _to_f32(r)
                return _c_div_np(l, r)

            return f_div
        if op == "%":

            def f_mod(m, a):
                c[0] += a
                l = fl(m, a)
                r = fr(m, a)
                if _is_float_val(l) or _is_float_val(r):
                    raise InterpError("'%' requires integer operands")
                return _c_mod_np(l, r)

            return f_mod
        raise InterpError(f"unknown operator {op!r}")

    # --- statement compilation -------------------------------------------------

    def _cs_body(self, body):
        return [self._cs(s) for s in body]

    def _cs(self, s):
        ty = type(s)
        c = self.c
        if ty is Assign:
            return self._c_assign(s)
        if ty is VarDecl:
            name = s.name
            decl_type = s.type
            width = VEC_WIDTHS.get(decl_type, 1)
            if s.init is not None:
                fi = self._ce(s.init)
            elif decl_type == "int":
                fi = lambda m, a: 0  # noqa: E731
            elif decl_type == "float":
                fi = lambda m, a: np.float32(0.0)  # noqa: E731
            else:
                fi = None

            def f_decl(m, a):
                if fi is None:
                    v = np.zeros((self.n, width), dtype=np.float32)
                else:
                    v = fi(m, a)
                    if width > 1:
                        v = self._as_vecn(v, width)
                self._declare(name, v)

            return f_decl
        if ty is If:
            fcnd = self._ce(s.cond)
            body = self._cs_body(s.body)
            n = self.n

            def f_if(m, a):
                cv = fcnd(m, a)
                if not isinstance(cv, np.ndarray):
                    if cv:
                        self._push()
                        for f in body:
                            f(m, a)
                        self._pop()
                    return
                m2 = cv != 0
                if m is not None:
                    m2 = m & m2
                a2 = int(m2.sum())
                if a2 == 0:
                    return
                if a2 == n:
                    m2 = None
                self._push()
                for f in body:
                    f(m2, a2)
                self._pop()

            return f_if
        if ty is For:
            return self._c_for(s)
        if ty is Barrier:
            site = s.site
            n = self.n

            def f_bar(m, a):
                if m is not None:
                    raise BarrierDivergence(f"barrier {site} reached under divergent control flow")
                c[5] += n

            return f_bar
        if ty is Block:
            body = self._cs_body(s.body)

            def f_blk(m, a):
                self._push()
                for f in body:
                    f(m, a)
                self._pop()

            return f_blk
        if ty is PtrDecl:
            name, base = s.name, s.base
            foff = self._ce(s.offset)
            resolve = self._resolve_buf

            def f_ptr(m, a):
                space, arr, b0 = resolve(base)
                self._declare(name, _Pointer(space, base, arr, b0 + foff(m, a)))

            return f_ptr
        if ty is LocalDecl or ty is Pragma:
            return lambda m, a: None
        raise InterpError(f"cannot execute {ty.__name__}")

    def _c_assign(self, s):
        lhs = s.lhs
        lty = type(lhs)
        fv = self._ce(s.value)
        if s.op != "=":
            # compound assignment: read-modify-write through the same lhs
            fv = self._c_bin(s.op[0], self._c_lhs_read(lhs), fv)
        if lty is NameLhs:
            name = lhs.name

            def f_set(m, a):
                v = fv(m, a)
                if m is None:
                    self._assign_existing(name, v)
                else:
                    self._assign_existing(name, self._merge(m, v, self._lookup(name)))

            return f_set
        if lty is MemberLhs:
            name, comp = lhs.name, lhs.comp

            def f_setm(m, a):
                vec = self._lookup(name)
                if not (isinstance(vec, np.ndarray) and vec.ndim == 2):
                    raise InterpError(f"'{name}' is not a vector value")
                v = fv(m, a)
                if m is None:
                    vec[:, comp] = v
                else:
                    vec[m, comp] = v[m] if isinstance(v, np.ndarray) else v

            return f_setm
        if lty is IndexLhs:
            name = lhs.base
            fi = self._ce(lhs.index)
            store = self._store
            return lambda m, a: store(name, fi(m, a), fv(m, a), m, a)
        if lty is VecIndexLhs:
            name = lhs.base
            foff, fidx = self._ce(lhs.offset), self._ce(lhs.index)
            width = lhs.width
            vstore = self._vec_store
            return lambda m, a: vstore(name, foff(m, a) + fidx(m, a) * width, width, fv(m, a), m, a)
        raise InterpError(f"cannot assign to {lty.__name__}")

    def _c_lhs_read(self, lhs):
        lty = type(lhs)
        if lty is NameLhs:
            name = lhs.name
            look = self._lookup
            return lambda m, a: look(name)
        if lty is MemberLhs:
            name, comp = lhs.name, lhs.comp
            look = self._lookup
            return lambda m, a: look(name)[:, comp]
        if lty is IndexLhs:
            name = lhs.base
            fi = self._ce(lhs.index)
            load = self._load
            return lambda m, a: load(name, fi(m, a), m, a)
        raise InterpError("unsupported compound-assignment target")

    def _c_for(self, s):
        flo = self._ce(s.lo)
        fhi = self._ce(s.hi)
        var = s.var
        body = self._cs_body(s.body)
        n = self.n

        def f_for(m, a):
            lo = flo(m, a)
            hi = fhi(m, a)
            if isinstance(lo, np.ndarray):
                raise InterpError("loop start must be uniform")
            env = self.env
            self._push()
            self._declare(var, lo)
            push, pop = self._push, self._pop
            if not isinstance(hi, np.ndarray):
                trips = hi - lo
                if trips > 0:
                    self.iters += trips * a
                    if self.iters > self.iter_cap:
                        raise NonTerminating(f"loop iteration cap {self.iter_cap} exceeded")
                for i in range(lo, hi):
                    env[var] = i
                    push()
                    for f in body:
                        f(m, a)
                    pop()
            else:
                i = lo
                hi_max = int(hi.max()) if m is None else int(hi[m].max(initial=lo))
                while i < hi_max:
                    m2 = hi > i
                    if m is not None:
                        m2 = m & m2
                    a2 = int(m2.sum())
                    if a2 == 0:
                        break
                    self.iters += a2
                    if self.iters > self.iter_cap:
                        raise NonTerminating(f"loop iteration cap {self.iter_cap} exceeded")
                    if a2 == n:
                        m2 = None
                    env[var] = i
                    push()
                    for f in body:
                        f(m2, a2)
                    pop()
                    i += 1
            self._pop()

        return f_for


# ---------------------------------------------------------------------------
# strict per-thread engine (reference semantics; generator-based barrier phases)


class _StrictThread:
    def __init__(self, parent: "_StrictExec", tid: int):
        self.p = parent
        self.tid = tid
        self.scopes = [{}]

    def run(self):
        yield from self.stmts(self.p.ir.body)

    def stmts(self, body):
        for s in body:
            yield from self.stmt(s)

    def stmt(self, s):
        p = self.p
        ty = type(s)
        if ty is Assign:
            if s.op == "=":
                val = self.eval(s.value)
            else:
                val = self.binop(s.op[0], self.read_lhs(s.lhs), self.eval(s.value))
            self.write_lhs(s.lhs, val)
        elif ty is VarDecl:
            if s.init is not None:
                val = self.eval(s.init)
            elif s.type in _ZERO_DEFAULTS:
                val = _ZERO_DEFAULTS[s.type]
            else:
                val = np.zeros(VEC_WIDTHS[s.type], dtype=np.float32)
            if s.type in VEC_WIDTHS and s.type != "float" and not (isinstance(val, np.ndarray) and val.ndim == 1):
                raise InterpError("vector declaration initialized with scalar")
            self.scopes[-1][s.name] = val
        elif ty is If:
            if self.eval(s.cond):
                self.scopes.append({})
                yield from self.stmts(s.body)
                self.scopes.pop()
        elif ty is For:
            lo = self.eval(s.lo)
            hi = self.eval(s.hi)
            self.scopes.append({})
            for i in range(lo, hi):
                p.iters += 1
                if p.iters > p.iter_cap:
                    raise NonTerminating(f"loop iteration cap {p.iter_cap} exceeded")
                self.scopes[-1][s.var] = i
                self.scopes.append({})
                yield from self.stmts(s.body)
                self.scopes.pop()
            self.scopes.pop()
        elif ty is Barrier:
            p.ct.barriers += 1
            yield s.site
        elif ty is Block:
            self.scopes.append({})
            yield from self.stmts(s.body)
            self.scopes.pop()
        elif ty is PtrDecl:
            space, arr, base = self.resolve_buf(s.base)
            self.scopes[-1][s.name] = _Pointer(space, s.base, arr, base + self.eval(s.offset))
        elif ty is LocalDecl or ty is Pragma:
            pass
        else:
            raise InterpError(f"cannot execute {ty.__name__}")

    def lookup(self, name):
        for sc in reversed(self.scopes):
            if name in sc:
                return sc[name]
        raise InterpError(f"undefined variable '{name}'")

    def resolve_buf(self, name):
        for sc in reversed(self.scopes):
            if name in sc:
                v = sc[name]
                if isinstance(v, _Pointer):
                    return v.space, v.arr, v.base
                raise InterpError(f"'{name}' is not subscriptable")
        if name in self.p.locals_mem:
            return "local", self.p.locals_mem[name], 0
        if name in self.p.buffers:
            return "global", self.p.buffers[name], 0
        raise InterpError(f"unknown buffer '{name}'")

    def read_lhs(self, lhs):
        ty = type(lhs)
        if ty is NameLhs:
            return self.lookup(lhs.name)
        if ty is MemberLhs:
            return self.lookup(lhs.name)[lhs.comp]
        if ty is IndexLhs:
            return self.load(lhs.base, self.eval(lhs.index))
        raise InterpError("unsupported compound-assignment target")

    def write_lhs(self, lhs, val):
        ty = type(lhs)
        if ty is NameLhs:
            for sc in reversed(self.scopes):
                if lhs.name in sc:
                    sc[lhs.name] = val
                    return
            raise InterpError(f"assignment to undeclared variable '{lhs.name}'")
        if ty is MemberLhs:
            self.lookup(lhs.name)[lhs.comp] = _to_f32(val)
        elif ty is IndexLhs:
            self.store(lhs.base, self.eval(lhs.index), val)
        elif ty is VecIndexLhs:
            eff = self.eval(lhs.offset) + self.eval(lhs.index) * lhs.width
            space, arr, base = self.resolve_buf(lhs.base)
            eff += base
            if eff % lhs.width != 0:
                raise MisalignedVectorAccess(f"offset {eff} not a multiple of {lhs.width}")
            if eff < 0 or eff + lhs.width > len(arr):
                raise OutOfBoundsAccess(lhs.base, eff, len(arr))
            self.p.count_store(space)
            arr[eff : eff + lhs.width] = _to_f32(val)
        else:
            raise InterpError(f"cannot assign to {ty.__name__}")

    def load(self, name, idx):
        space, arr, base = self.resolve_buf(name)
        eff = base + idx
        if eff < 0 or eff >= len(arr):
            raise OutOfBoundsAccess(name, eff, len(arr))
        self.p.count_load(space)
        return arr[eff]

    def store(self, name, idx, val):
        space, arr, base = self.resolve_buf(name)
        eff = base + idx
        if eff < 0 or eff >= len(arr):
            raise OutOfBoundsAccess(name, eff, len(arr))
        self.p.count_store(space)
        arr[eff] = _to_f32(val)

    def eval(self, e):
        p = self.p
        ty = type(e)
        if ty is IntLit:
            return e.value
        if ty is FloatLit:
            return np.float32(e.value)
        if ty is VarRef:
            v = self.lookup(e.name)
            if isinstance(v, _Pointer):
                raise InterpError(f"pointer '{e.name}' used as a value")
            return v
        if ty is Bin:
            return self.binop(e.op, self.eval(e.left), self.eval(e.right))
        if ty is Load:
            return self.load(e.base, self.eval(e.index))
        if ty is IdiomRef:
            if e.name == "LOCAL_ID_1D":
                return self.tid
            if e.name == "GROUP_ID_1D":
                return p.group_id
            return p.launch.local_size
        if ty is Fma:
            p.ct.alu_ops += 1
            return _fma_vals(_to_f32(self.eval(e.a)), _to_f32(self.eval(e.b)), _to_f32(self.eval(e.c)))
        if ty is Ternary:
            p.ct.alu_ops += 1
            c = self.eval(e.cond)
            t = self.eval(e.then)
            o = self.eval(e.other)
            return t if c else o
        if ty is Un:
            v = self.eval(e.operand)
            p.ct.alu_ops += 1
            if e.op == "-":
                return -v
            return 0 if v else 1
        if ty is Member:
            v = self.eval(e.value)
            return v[e.comp]
        if ty is VecLoad:
            eff = self.eval(e.offset) + self.eval(e.index) * e.width
            space, arr, base = self.resolve_buf(e.base)
            eff += base
            if eff % e.width != 0:
                raise MisalignedVectorAccess(f"offset {eff} not a multiple of {e.width}")
            if eff < 0 or eff + e.width > len(arr):
                raise OutOfBoundsAccess(e.base, eff, len(arr))
            p.count_load(space)
            return arr[eff : eff + e.width].copy()
        if ty is MetaRef:
            try:
                return self.p.meta[e.field]
            except KeyError:
                raise InterpError(f"missing metadata field '{e.field}'") from None
        raise InterpError(f"cannot evaluate {ty.__name__}")

    def binop(self, op, l, r):
        self.p.ct.alu_ops += 1
        if op == "&&":
            return int(bool(l) and bool(r))
        if op == "||":
            return int(bool(l) or bool(r))
        fl, fr = _is_float_val(l), _is_float_val(r)
        if fl or fr:
            l = _to_f32(l)
            r = _to_f32(r)
            if op == "%":
                raise InterpError("'%' requires integer operands")
        if op == "+":
            return l + r
        if op == "-":
            return l - r
        if op == "*":
            return l * r
        if op == "/":
            return l / r if (fl or fr) else _c_div_np(l, r)
        if op == "%":
            return _c_mod_np(l, r)
        if op == "<":
            return int(l < r)
        if op == ">":
            return int(l > r)
        if op == "<=":
            return int(l <= r)
        if op == ">=":
            return int(l >= r)
        if op == "==":
            return int(l == r)
        return int(l != r)


class _StrictExec:
    def __init__(self, ir, launch, buffers, meta, report, iter_cap, thread_order=None):
        self.ir = ir
        self.launch = launch
        self.buffers = buffers
        self.meta = meta or {}
        self.ct = report
        self.iter_cap = iter_cap
        self.iters = 0
        self.local_sizes: dict[str, int] = {}
        _collect_local_decls(ir.body, self.local_sizes)
        n = launch.local_size
        order = list(thread_order) if thread_order is not None else list(range(n))
        if sorted(order) != list(range(n)):
            raise InterpError("thread_order must be a permutation of thread ids")
        self.order = order

    def count_load(self, space):
        if space == "global":
            self.ct.global_loads += 1
        else:
            self.ct.local_loads += 1

    def count_store(self, space):
        if space == "global":
            self.ct.global_stores += 1
        else:
            self.ct.local_stores += 1

    def run(self):
        for gid in range(self.launch.group_count):
            self.group_id = gid
            self.locals_mem = {name: np.zeros(size, dtype=np.float32) for name, size in self.local_sizes.items()}
            gens = {t: _StrictThread(self, t).run() for t in self.order}
            alive = list(self.order)
            while alive:
                sites = {}
                finished = []
                for t in alive:
                    try:
                        sites[t] = next(gens[t])
                    except StopIteration:
                        finished.append(t)
                if sites and finished:
                    raise BarrierDivergence("some threads finished while others wait at a barrier")
                if len(set(sites.values())) > 1:
                    raise BarrierDivergence(f"threads reached different barrier sites: {sorted(set(sites.values()))}")
                alive = [t for t in alive if t not in finished]
                if not sites:
                    break


# ---------------------------------------------------------------------------
# entry points


def _buffer_arrays(ir: Kernel, buffers) -> dict[str, np.ndarray]:
    arrs = {}
    for a in ir.buffer_args:
        if a.name not in buffers:
            raise InterpError(f"no buffer bound for kernel argument '{a.name}'")
        b = buffers[a.name]
        arrs[a.name] = b.elems if isinstance(b, NdArray) else b
    return arrs


def run_kernel(
    ir: Kernel,
    launch: LaunchConfig,
    buffers: dict,
    meta: dict | None = None,
    engine: str = "vector",
    thread_order=None,
    iter_cap: int = ITER_CAP_DEFAULT,
):
    """Execute a kernel; output buffers are updated in place.

    Returns (buffers, CostReport).  `thread_order` (a permutation of thread
    ids) forces the strict engine, which runs threads of each barrier phase
    sequentially in that order.
    """
    arrs = _buffer_arrays(ir, buffers)
    if ir.meta_fields:
        missing = [f for f in ir.meta_fields if not meta or f not in meta]
        if missing:
            raise InterpError(f"missing metadata values: {missing}")
    report = CostReport()
    t0 = time.perf_counter_ns()
    if engine == "strict" or thread_order is not None:
        _StrictExec(ir, launch, arrs, meta, report, iter_cap, thread_order).run()
    elif engine == "vector":
        _VectorExec(ir, launch, arrs, meta, report, iter_cap).run()
    else:
        raise InterpError(f"unknown engine {engine!r}")
    report.wall_ns = time.perf_counter_ns() - t0
    return buffers, report


# ---------------------------------------------------------------------------
# static per-thread cost analysis


def static_cost_report(ir: Kernel, launch: LaunchConfig) -> CostReport:
    """Analytic counters for a kernel with literal loop bounds.

    Per-thread counts from one walk of the statement tree, multiplied by the
    launch size.  Guarded statements are assumed taken, so this is an upper
    bound; it is deterministic and comparable across variants, which is all
    the tuner needs.
    """
    spaces: dict[str, str] = {a.name: "global" for a in ir.buffer_args}

    def expr(e, ct):
        ty = type(e)
        if ty in (IntLit, FloatLit, VarRef, IdiomRef, MetaRef):
            return
        if ty is Bin:
            ct[0] += 1
            expr(e.left, ct)
            expr(e.right, ct)
        elif ty is Un:
            ct[0] += 1
            expr(e.operand, ct)
        elif ty is Ternary:
            ct[0] += 1
            expr(e.cond, ct)
            expr(e.then, ct)
            expr(e.other, ct)
        elif ty is Fma:
            ct[0] += 1
            expr(e.a, ct)
            expr(e.b, ct)
            expr(e.c, ct)
        elif ty is Load:
            _count_access(e.base, ct, 1, 0)
            expr(e.index, ct)
        elif ty is VecLoad:
            _count_access(e.base, ct, 1, 0)
            expr(e.offset, ct)
            expr(e.index, ct)
        elif ty is Member:
            expr(e.value, ct)
        else:
            raise InterpError(f"cannot analyze {ty.__name__}")

    def _count_access(base, ct, loads, stores):
        space = spaces.get(base)
        if space is None:
            raise InterpError(f"unknown buffer '{base}' in static analysis")
        if space == "global":
            ct[1] += loads
            ct[2] += stores
        else:
            ct[3] += loads
            ct[4] += stores

    def stmts(body, ct):
        for s in body:
            stmt(s, ct)

    def stmt(s, ct):
        ty = type(s)
        if ty is Assign:
            if s.op != "=":
                ct[0] += 1
            lhs = s.lhs
            lty = type(lhs)
            if lty is IndexLhs:
                _count_access(lhs.base, ct, 1 if s.op != "=" else 0, 1)
                expr(lhs.index, ct)
            elif lty is VecIndexLhs:
                _count_access(lhs.base, ct, 0, 1)
                expr(lhs.offset, ct)
                expr(lhs.index, ct)
            expr(s.value, ct)
        elif ty is VarDecl:
            if s.init is not None:
                expr(s.init, ct)
        elif ty is PtrDecl:
            if s.base not in spaces:
                raise InterpError(f"unknown pointer base '{s.base}' in static analysis")
            spaces[s.name] = spaces[s.base]
            expr(s.offset, ct)
        elif ty is If:
            expr(s.cond, ct)
            stmts(s.body, ct)
        elif ty is For:
            if s.static_trip is None:
                raise InterpError("static analysis requires literal loop bounds")
            # bounds are evaluated once; iteration control itself is free,
            # matching the interpreter's accounting
            expr(s.lo, ct)
            expr(s.hi, ct)
            inner = [0, 0, 0, 0, 0, 0]
            stmts(s.body, inner)
            for i in range(6):
                ct[i] += s.static_trip * inner[i]
        elif ty is Barrier:
            ct[5] += 1
        elif ty is Block:
            stmts(s.body, ct)
        elif ty in (LocalDecl, Pragma):
            pass
        else:
            raise InterpError(f"cannot analyze {ty.__name__}")

    local_names: dict[str, int] = {}
    _collect_local_decls(ir.body, local_names)
    for name in local_names:
        spaces[name] = "local"
    ct = [0, 0, 0, 0, 0, 0]
    stmts(ir.body, ct)
    t = launch.total_threads
    return CostReport(
        alu_ops=ct[0] * t,
        global_loads=ct[1] * t,
        global_stores=ct[2] * t,
        local_loads=ct[3] * t,
        local_stores=ct[4] * t,
        barriers=ct[5] * t,
    )


# ---------------------------------------------------------------------------
# source emission


def emit_source(inst: Instantiation, dialect: str) -> str:
    """Instantiate and render to one platform's source text."""
    return render_dialect(instantiate(inst), dialect)


def source_filename(signature: str, variant: str, dialect: str) -> str:
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in signature)
    return f"{safe}.{variant}.{dialect}.c"
