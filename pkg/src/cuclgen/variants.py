"""Host-level metacode: generators that turn operations into CUCL instantiations.

Each operation kind has one or more kernel variants with different
applicability regimes and layout requirements; a convolution always has the
one-thread-per-output fallback, and more specialized variants (register/thread
blocked tiling, 1x1, whole-image filters) rank above it when they apply.
Generators are pure functions of (op params, shapes, tuning parameters), so
the tuner can call them freely.

Size and stride references are emitted as %(arg_dim_size)/%(arg_dim_stride)
template variables throughout, so the same generated text serves static
(constants baked) and dynamic (metadata argument) instantiation; only regions
whose *shape* depends on sizes (e.g. how many unrolled statements to emit)
differ between the two modes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backend import LaunchConfig
from .cucl import STATIC, CuclTemplate, Instantiation, TemplateArg
from .errors import CuclgenError
from .frontend import KIND_ACT, KIND_CONV, KIND_CONVERT, KIND_POOL, OpNode
from .graphopt import VariantFormats
from .ndarray import DimsSpec

WG_LINEAR = 256  # workgroup size for one-thread-per-element kernels


class Inapplicable(CuclgenError):
    pass


# ---------------------------------------------------------------------------
# tuning parameters


@dataclass(frozen=True)
class TuneParams:
    """Blocking/unroll/vector knobs: MNt register blocking, MNb thread
    blocking, Kb reduction unroll, vw vector width, plus local staging flags."""

    mnt: tuple[int, int] = (4, 4)
    mnb: tuple[int, int] = (16, 16)
    kb: int = 4
    vw: int = 4
    use_local_filts: bool = True
    use_local_in: bool = True

    def __post_init__(self):
        if self.mnt[0] < 1 or self.mnt[1] < 1 or self.mnb[0] < 1 or self.mnb[1] < 1 or self.kb < 1:
            raise CuclgenError(f"bad tune params {self}")
        if self.threads > 1024:
            raise CuclgenError(f"workgroup of {self.threads} threads exceeds 1024")
        if self.vw not in (1, 2, 4, 8):
            raise CuclgenError(f"vector width must be one of 1,2,4,8, got {self.vw}")
        if self.mnt[1] % self.vw != 0:
            raise CuclgenError(f"vector width {self.vw} must divide register block {self.mnt[1]}")

    @property
    def threads(self) -> int:
        return self.mnb[0] * self.mnb[1]

    def to_string(self) -> str:
        lf = 1 if self.use_local_filts else 0
        li = 1 if self.use_local_in else 0
        return (
            f"MNt={self.mnt[0]}:{self.mnt[1]},MNb={self.mnb[0]}:{self.mnb[1]},"
            f"Kb={self.kb},vw={self.vw},lf={lf},li={li}"
        )

    @staticmethod
    def from_string(text: str) -> "TuneParams":
        vals = {}
        for part in text.split(","):
            key, _, v = part.partition("=")
            vals[key] = v
        try:
            mnt = tuple(int(x) for x in vals["MNt"].split(":"))
            mnb = tuple(int(x) for x in vals["MNb"].split(":"))
            return TuneParams(
                mnt=mnt,
                mnb=mnb,
                kb=int(vals["Kb"]),
                vw=int(vals["vw"]),
                use_local_filts=vals.get("lf", "1") == "1",
                use_local_in=vals.get("li", "1") == "1",
            )
        except (KeyError, ValueError) as e:
            raise CuclgenError(f"bad tune-params string {text!r}: {e}") from None


DEFAULT_TUNE = TuneParams()


# ---------------------------------------------------------------------------
# cooperative loads


@dataclass(frozen=True)
class CoopLoadSpec:
    words: int  # W: words to load
    threads: int  # N: loading threads
    src: str
    dst: str

    def __post_init__(self):
        if self.words < 1 or self.threads < 1:
            raise CuclgenError(f"bad coop-load spec {self}")


def gen_coop_load(spec: CoopLoadSpec) -> list[str]:
    """Unrolled cooperative load: ceil(W/N) statements, the i-th loading
    offset i*N + thread_id, guarded only when it could run past W."""
    w, n = spec.words, spec.threads
    stmts = []
    for i in range((w - 1) // n + 1):
        base = i * n
        ix = f"{base}+thread_id" if i > 0 else "thread_id"
        stmt = f"{spec.dst}[{base}+thread_id] = {spec.src}[{ix}];"
        if base + (n - 1) >= w:
            stmt = f"if({ix}<{w}){{{stmt}}}"
        stmts.append(stmt)
    return stmts


def coop_load_loop(spec_words_txt: str, threads: int, src: str, dst: str) -> list[str]:
    """Loop form of the cooperative load, for bounds only known at run time."""
    return [
        "#pragma unroll",
        f"for( int ld = 0; ld < ( ( {spec_words_txt} - 1 ) / {threads} + 1 ); ++ld ) {{",
        f"  int ldx = ld * {threads} + thread_id;",
        f"  if( ldx < {spec_words_txt} ) {{ {dst}[ ldx ] = {src}[ ldx ]; }}",
        "}",
    ]


# ---------------------------------------------------------------------------
# shared pieces

CONV_ARGS = (
    TemplateArg("in", "in", ("img", "chan", "y", "x")),
    TemplateArg("filts", "in", ("out_chan", "in_chan", "y", "x")),
    TemplateArg("bias", "in", ("out_chan",)),
    TemplateArg("out", "out", ("img", "chan", "y", "x")),
)

OUT_TOTAL = "( %(out_img_size) * %(out_img_stride) )"

DECOMPOSE_GID = """  int img = gid / %(out_img_stride);
  int oc = ( gid % %(out_img_stride) ) / %(out_chan_stride);
  int oy = ( gid % %(out_chan_stride) ) / %(out_y_stride);
  int ox = gid % %(out_y_stride);
"""

IN_AT = "in[ {b} * %(in_img_stride) + {c} * %(in_chan_stride) + {y} * %(in_y_stride) + {x} * %(in_x_stride) ]"


def xform_snippet(act: str | None) -> str:
    if act is None:
        return "ov"
    if act == "relu":
        return "( ( ov > 0.0f ) ? ov : 0.0f )"
    raise Inapplicable(f"no fused form for activation '{act}'")


def _conv_shapes(node: OpNode, edges):
    ind = edges[node.inputs[0]]
    outd = edges[node.outputs[0]]
    if ind is None or outd is None:
        raise CuclgenError(f"node '{node.name}': shapes not inferred")
    b, ic, h, w = (ind.size_of(d) for d in ("img", "chan", "y", "x"))
    oc, oy, ox = outd.size_of("chan"), outd.size_of("y"), outd.size_of("x")
    return b, ic, h, w, oc, oy, ox


def _linear_launch(total: int) -> LaunchConfig:
    return LaunchConfig(group_count=(total + WG_LINEAR - 1) // WG_LINEAR, local_size=WG_LINEAR)


def _canonical_bindings(node: OpNode, edges) -> dict[str, DimsSpec]:
    return {
        "in": edges[node.inputs[0]],
        "filts": edges[node.inputs[1]],
        "bias": edges[node.inputs[2]],
        "out": edges[node.outputs[0]],
    }


def _kernel_name(prefix: str, node: OpNode, edges) -> str:
    b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
    p = node.params
    return f"{prefix}_b{b}_ic{ic}_y{h}_x{w}_oc{oc}_k{p.ksz}_s{p.stride}_p{p.pad}"


# ---------------------------------------------------------------------------
# variant base


class Variant:
    name: str
    rank: int
    kind: str

    def applies(self, node: OpNode, edges, params: TuneParams) -> str | None:
        """None when applicable, else the reason it is not."""
        if node.kind != self.kind:
            return f"kind {node.kind} != {self.kind}"
        return None

    def required_formats(self, node: OpNode, edges, params: TuneParams) -> VariantFormats:
        return VariantFormats(inputs={}, output=None)

    def generate(self, node: OpNode, edges, params: TuneParams, mode: str) -> Instantiation:
        raise NotImplementedError

    def tune_candidates(self, node: OpNode, edges, candidates):
        """Filter a TuneParams list to those this variant can use here."""
        return [p for p in candidates if self.applies(node, edges, p) is None]


class ConvSimple(Variant):
    """General-case fallback: one thread per output element."""

    name = "conv_simple"
    rank = 0
    kind = KIND_CONV

    def generate(self, node, edges, params, mode):
        p = node.params
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        inner = "          acc = fma( " + IN_AT.format(b="img", c="ic", y="iy", x="ix") + (
            ", filts[ oc * %(filts_out_chan_stride) + ic * %(filts_in_chan_stride)"
            " + ky * %(filts_y_stride) + kx * %(filts_x_stride) ], acc );"
        )
        if p.pad > 0:
            inner = (
                "          if( iy >= 0 && iy < %(in_y_size) && ix >= 0 && ix < %(in_x_size) ) {\n"
                "  " + inner + "\n          }"
            )
        body = (
            f"  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;\n"
            f"  if( gid < {OUT_TOTAL} ) {{\n"
            + DECOMPOSE_GID.replace("  int", "    int")
            + "    float acc = bias[ oc ];\n"
            "    for( int ic = 0; ic < %(filts_in_chan_size); ++ic ) {\n"
            "      for( int ky = 0; ky < %(filts_y_size); ++ky ) {\n"
            "        for( int kx = 0; kx < %(filts_x_size); ++kx ) {\n"
            "          int iy = oy * %(stride) - %(pad) + ky;\n"
            "          int ix = ox * %(stride) - %(pad) + kx;\n"
            f"{inner}\n"
            "        }\n"
            "      }\n"
            "    }\n"
            "    float ov = acc;\n"
            "    out[ gid ] = %(out_write_xform);\n"
            "  }"
        )
        tmpl = CuclTemplate(
            name=_kernel_name("conv_simple", node, edges),
            args=CONV_ARGS,
            body=body,
            free_vars=frozenset({"stride", "pad", "out_write_xform"}),
        )
        return Instantiation(
            template=tmpl,
            bindings=_canonical_bindings(node, edges),
            mode=mode,
            var_values={
                "stride": str(p.stride),
                "pad": str(p.pad),
                "out_write_xform": xform_snippet(node.fused_activation),
            },
            launch=_linear_launch(b * oc * oy * ox),
        )


class Conv1x1(Variant):
    """Pointwise convolution: the window loops and pad checks vanish."""

    name = "conv_1x1"
    rank = 2
    kind = KIND_CONV

    def applies(self, node, edges, params):
        r = super().applies(node, edges, params)
        if r:
            return r
        if node.params.ksz != 1:
            return f"kernel size {node.params.ksz} != 1"
        if node.params.pad != 0:
            return "padding not supported"
        return None

    def generate(self, node, edges, params, mode):
        p = node.params
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        body = (
            f"  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;\n"
            f"  if( gid < {OUT_TOTAL} ) {{\n"
            + DECOMPOSE_GID.replace("  int", "    int")
            + "    float acc = bias[ oc ];\n"
            "    for( int ic = 0; ic < %(filts_in_chan_size); ++ic ) {\n"
            "      acc = fma( "
            + IN_AT.format(b="img", c="ic", y="( oy * %(stride) )", x="( ox * %(stride) )")
            + ", filts[ oc * %(filts_out_chan_stride) + ic * %(filts_in_chan_stride) ], acc );\n"
            "    }\n"
            "    float ov = acc;\n"
            "    out[ gid ] = %(out_write_xform);\n"
            "  }"
        )
        tmpl = CuclTemplate(
            name=_kernel_name("conv_1x1", node, edges),
            args=CONV_ARGS,
            body=body,
            free_vars=frozenset({"stride", "out_write_xform"}),
        )
        return Instantiation(
            template=tmpl,
            bindings=_canonical_bindings(node, edges),
            mode=mode,
            var_values={"stride": str(p.stride), "out_write_xform": xform_snippet(node.fused_activation)},
            launch=_linear_launch(b * oc * oy * ox),
        )


class ConvFC(Variant):
    """Filters spanning the full input image: a matrix-vector per image, no
    sliding-window indexing at all."""

    name = "conv_fc"
    rank = 3
    kind = KIND_CONV

    def applies(self, node, edges, params):
        r = super().applies(node, edges, params)
        if r:
            return r
        p = node.params
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        if not (p.ksz == h and p.ksz == w and p.pad == 0 and oy == 1 and ox == 1):
            return "filters must cover the whole input with 1x1 output"
        return None

    def generate(self, node, edges, params, mode):
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        body = (
            "  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;\n"
            f"  if( gid < {OUT_TOTAL} ) {{\n"
            "    int img = gid / %(out_img_stride);\n"
            "    int oc = gid % %(out_img_stride);\n"
            "    float acc = bias[ oc ];\n"
            "    for( int k = 0; k < %(in_img_stride); ++k ) {\n"
            "      acc = fma( in[ img * %(in_img_stride) + k ], filts[ oc * %(filts_out_chan_stride) + k ], acc );\n"
            "    }\n"
            "    float ov = acc;\n"
            "    out[ gid ] = %(out_write_xform);\n"
            "  }"
        )
        tmpl = CuclTemplate(
            name=_kernel_name("conv_fc", node, edges),
            args=CONV_ARGS,
            body=body,
            free_vars=frozenset({"out_write_xform"}),
        )
        return Instantiation(
            template=tmpl,
            bindings=_canonical_bindings(node, edges),
            mode=mode,
            var_values={"out_write_xform": xform_snippet(node.fused_activation)},
            launch=_linear_launch(b * oc),
        )


class ConvTiled(Variant):
    """Register/thread-blocked GEMM-view convolution.

    M is the flattened (img, y, x) output-pixel axis, N is out_chan, and the
    reduction K runs over (in_chan, ky, kx).  Each workgroup of MNb.0 x MNb.1
    threads computes an (MNb.0*MNt.0) x (MNb.1*MNt.1) output tile; filters
    come from a k-major layout padded in out_chan so every access in the hot
    loop is unguarded and vector loads/stores stay aligned.  Out-of-range
    output rows compute into registers and skip their stores.
    """

    name = "conv_tiled"
    rank = 1
    kind = KIND_CONV

    def applies(self, node, edges, params):
        r = super().applies(node, edges, params)
        if r:
            return r
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        mt, nt = params.mnt
        if b * oy * ox < mt:
            return f"only {b * oy * ox} output pixels for register block of {mt}"
        if oc < nt:
            return f"only {oc} output channels for register block of {nt}"
        if params.vw > 4:
            return "float8 is outside the shipped CUDA/OpenCL intersection subset"
        return None

    def _geometry(self, node, edges, t: TuneParams):
        b, ic, h, w, oc, oy, ox = _conv_shapes(node, edges)
        p = node.params
        mt, nt = t.mnt
        mb, nb = t.mnb
        mtile, ntile = mb * mt, nb * nt
        m = b * oy * ox
        n_pad = -(-oc // ntile) * ntile
        k = ic * p.ksz * p.ksz
        return b, ic, h, w, oc, oy, ox, p, mt, nt, mb, nb, mtile, ntile, m, n_pad, k

    def required_formats(self, node, edges, params):
        b, ic, h, w, oc, oy, ox, p, mt, nt, mb, nb, mtile, ntile, m, n_pad, k = self._geometry(node, edges, params)
        return VariantFormats(
            inputs={
                node.inputs[1]: DimsSpec.row_major(("in_chan", "y", "x", "out_chan"), (ic, p.ksz, p.ksz, n_pad)),
                node.inputs[2]: DimsSpec.row_major(("out_chan",), (n_pad,)),
            },
            output=DimsSpec.row_major(("img", "y", "x", "chan"), (b, oy, ox, n_pad)),
        )

    def generate(self, node, edges, params, mode):
        reason = self.applies(node, edges, params)
        if reason:
            raise Inapplicable(f"{self.name} on '{node.name}': {reason}")
        t = params
        b, ic, h, w, oc, oy, ox, p, mt, nt, mb, nb, mtile, ntile, m, n_pad, k = self._geometry(node, edges, t)
        kb, vw, threads = t.kb, t.vw, t.threads
        lf, li = t.use_local_filts, t.use_local_in
        ksz2 = p.ksz * p.ksz
        xform = xform_snippet(node.fused_activation)

        k_txt = "( %(filts_in_chan_size) * %(filts_y_size) * %(filts_x_size) )"
        m_txt = "( %(out_img_size) * %(out_y_size) * %(out_x_size) )"
        npad_txt = "%(filts_out_chan_size)"
        oyox_txt = "( %(out_y_size) * %(out_x_size) )"
        groups_n_txt = f"( {npad_txt} / {ntile} )"

        L: list[str] = []

        def E(line=""):
            L.append(line)

        if lf:
            E(f"  LOCAL_MEM float filts_buf[{kb * ntile}];")
        if li:
            E(f"  LOCAL_MEM float in_buf[{kb * mtile}];")
        E("  int thread_id = LOCAL_ID_1D;")
        E(f"  int gm = GROUP_ID_1D / {groups_n_txt};")
        E(f"  int gn = GROUP_ID_1D % {groups_n_txt};")
        E(f"  int tm = thread_id / {nb};")
        E(f"  int tn = thread_id % {nb};")
        E(f"  int m_base = gm * {mtile} + tm * {mt};")
        E(f"  int n_base = gn * {ntile} + tn * {nt};")
        for i in range(mt):
            E(f"  int mm_{i} = m_base + {i};")
        if not li:
            for i in range(mt):
                E(f"  int mb_{i} = mm_{i} / {oyox_txt};")
                E(f"  int my_{i} = ( mm_{i} % {oyox_txt} ) / %(out_x_size);")
                E(f"  int mx_{i} = mm_{i} % %(out_x_size);")
        for j in range(nt):
            E(f"  float bi_{j} = bias[ n_base + {j} ];")
        for i in range(mt):
            for j in range(nt):
                E(f"  float acc_{i}_{j} = bi_{j};")

        def emit_gather(ind, kbase_txt, kk_txt, i, dst_expr):
            """Guarded input fetch for output row i at reduction index kbase+kk."""
            pad_chk = ""
            if p.pad > 0:
                pad_chk = " && aiy >= 0 && aiy < %(in_y_size) && aix >= 0 && aix < %(in_x_size)"
            return [
                f"{ind}int gk = {kbase_txt} + {kk_txt};",
                f"{ind}int gic = gk / {ksz2};",
                f"{ind}int gky = ( gk % {ksz2} ) / {p.ksz};",
                f"{ind}int gkx = gk % {p.ksz};",
                f"{ind}int aiy = my_{i} * {p.stride} - {p.pad} + gky;",
                f"{ind}int aix = mx_{i} * {p.stride} - {p.pad} + gkx;",
                f"{ind}if( mm_{i} < {m_txt}{pad_chk} ) {{",
                f"{ind}  {dst_expr} = " + IN_AT.format(b=f"mb_{i}", c="gic", y="aiy", x="aix") + ";",
                f"{ind}}}",
            ]

        def emit_stage(ind, kbase_txt, rows, rows_txt=None):
            """Stage filter rows / input tile into local memory.

            rows is an int for unrolled emission; rows_txt switches to loop
            form for a run-time row count.
            """
            if not (lf or li):
                return
            E(f"{ind}BARRIER_SYNC;")
            if lf:
                if rows_txt is None:
                    for r in range(rows):
                        E(f"{ind}GLOBAL_MEM float const* fsrc_{r} = filts + ( ( {kbase_txt} + {r} ) * {npad_txt} + gn * {ntile} );")
                        E(f"{ind}LOCAL_PTR float* fdst_{r} = filts_buf + {r * ntile};")
                        for s in gen_coop_load(CoopLoadSpec(ntile, threads, f"fsrc_{r}", f"fdst_{r}")):
                            E(f"{ind}{s}")
                else:
                    E("#pragma unroll")
                    E(f"{ind}for( int lr = 0; lr < {rows_txt}; ++lr ) {{")
                    E(f"{ind}  GLOBAL_MEM float const* fsrc = filts + ( ( {kbase_txt} + lr ) * {npad_txt} + gn * {ntile} );")
                    E(f"{ind}  LOCAL_PTR float* fdst = filts_buf + lr * {ntile};")
                    for s in coop_load_loop(str(ntile), threads, "fsrc", "fdst"):
                        E(f"{ind}  {s}")
                    E(f"{ind}}}")
            if li:
                if rows_txt is None:
                    words = rows * mtile
                    for pp in range((words - 1) // threads + 1):
                        E(f"{ind}{{")
                        E(f"{ind}  int sw = {pp * threads} + thread_id;")
                        guard = pp * threads + threads > words
                        bind = ind + ("    " if guard else "  ")
                        if guard:
                            E(f"{ind}  if( sw < {words} ) {{")
                        E(f"{bind}int sr = sw / {mtile};")
                        E(f"{bind}int si = sw % {mtile};")
                        E(f"{bind}int sm = gm * {mtile} + si;")
                        E(f"{bind}int smb = sm / {oyox_txt};")
                        E(f"{bind}int smy = ( sm % {oyox_txt} ) / %(out_x_size);")
                        E(f"{bind}int smx = sm % %(out_x_size);")
                        E(f"{bind}int sk = {kbase_txt} + sr;")
                        E(f"{bind}int sic = sk / {ksz2};")
                        E(f"{bind}int sky = ( sk % {ksz2} ) / {p.ksz};")
                        E(f"{bind}int skx = sk % {p.ksz};")
                        E(f"{bind}int siy = smy * {p.stride} - {p.pad} + sky;")
                        E(f"{bind}int six = smx * {p.stride} - {p.pad} + skx;")
                        E(f"{bind}float av = 0.0f;")
                        pad_chk = ""
                        if p.pad > 0:
                            pad_chk = " && siy >= 0 && siy < %(in_y_size) && six >= 0 && six < %(in_x_size)"
                        E(f"{bind}if( sm < {m_txt}{pad_chk} ) {{")
                        E(f"{bind}  av = " + IN_AT.format(b="smb", c="sic", y="siy", x="six") + ";")
                        E(f"{bind}}}")
                        E(f"{bind}in_buf[ sw ] = av;")
                        if guard:
                            E(f"{ind}  }}")
                        E(f"{ind}}}")
                else:
                    words_txt = f"( {rows_txt} * {mtile} )"
                    E("#pragma unroll")
                    E(f"{ind}for( int lw = 0; lw < ( ( {words_txt} - 1 ) / {threads} + 1 ); ++lw ) {{")
                    E(f"{ind}  int sw = lw * {threads} + thread_id;")
                    E(f"{ind}  if( sw < {words_txt} ) {{")
                    bind = ind + "    "
                    E(f"{bind}int sr = sw / {mtile};")
                    E(f"{bind}int si = sw % {mtile};")
                    E(f"{bind}int sm = gm * {mtile} + si;")
                    E(f"{bind}int smb = sm / {oyox_txt};")
                    E(f"{bind}int smy = ( sm % {oyox_txt} ) / %(out_x_size);")
                    E(f"{bind}int smx = sm % %(out_x_size);")
                    E(f"{bind}int sk = {kbase_txt} + sr;")
                    E(f"{bind}int sic = sk / {ksz2};")
                    E(f"{bind}int sky = ( sk % {ksz2} ) / {p.ksz};")
                    E(f"{bind}int skx = sk % {p.ksz};")
                    E(f"{bind}int siy = smy * {p.stride} - {p.pad} + sky;")
                    E(f"{bind}int six = smx * {p.stride} - {p.pad} + skx;")
                    E(f"{bind}float av = 0.0f;")
                    pad_chk = ""
                    if p.pad > 0:
                        pad_chk = " && siy >= 0 && siy < %(in_y_size) && six >= 0 && six < %(in_x_size)"
                    E(f"{bind}if( sm < {m_txt}{pad_chk} ) {{")
                    E(f"{bind}  av = " + IN_AT.format(b="smb", c="sic", y="siy", x="six") + ";")
                    E(f"{bind}}}")
                    E(f"{bind}in_buf[ sw ] = av;")
                    E(f"{ind}  }}")
                    E(f"{ind}}}")
            E(f"{ind}BARRIER_SYNC;")

        vec_comps = {1: ("",), 2: ("x", "y"), 4: ("x", "y", "z", "w")}[vw]

        def emit_b_loads(ind, kbase_txt, kk_txt, kk_tag):
            """Per-thread filter values for one reduction step; returns the
            per-column value expressions."""
            exprs = []
            if lf:
                for j0 in range(0, nt, vw):
                    off = f"{kk_txt} * {ntile} + tn * {nt} + {j0}"
                    if vw == 1:
                        E(f"{ind}float bv_{kk_tag}_{j0} = filts_buf[ {off} ];")
                        exprs.append(f"bv_{kk_tag}_{j0}")
                    else:
                        E(f"{ind}float{vw} bv_{kk_tag}_{j0} = ( ( LOCAL_PTR float{vw} const* )( filts_buf + {off} ) )[ 0 ];")
                        exprs.extend(f"bv_{kk_tag}_{j0}.{c}" for c in vec_comps)
            else:
                for j0 in range(0, nt, vw):
                    off = f"( {kbase_txt} + {kk_txt} ) * {npad_txt} + n_base + {j0}"
                    if vw == 1:
                        E(f"{ind}float bv_{kk_tag}_{j0} = filts[ {off} ];")
                        exprs.append(f"bv_{kk_tag}_{j0}")
                    else:
                        E(f"{ind}float{vw} bv_{kk_tag}_{j0} = ( ( GLOBAL_MEM float{vw} const* )( filts + {off} ) )[ 0 ];")
                        exprs.extend(f"bv_{kk_tag}_{j0}.{c}" for c in vec_comps)
            return exprs

        def emit_compute(ind, kbase_txt, kk_txt, kk_tag):
            # one reduction step: A values per output row, B values per column, MNt fmas
            for i in range(mt):
                if li:
                    E(f"{ind}float av_{kk_tag}_{i} = in_buf[ {kk_txt} * {mtile} + tm * {mt} + {i} ];")
                else:
                    E(f"{ind}float av_{kk_tag}_{i} = 0.0f;")
                    E(f"{ind}{{")
                    for line in emit_gather(ind + "  ", kbase_txt, kk_txt, i, f"av_{kk_tag}_{i}"):
                        E(line)
                    E(f"{ind}}}")
            b_exprs = emit_b_loads(ind, kbase_txt, kk_txt, kk_tag)
            for i in range(mt):
                for j in range(nt):
                    E(f"{ind}acc_{i}_{j} = fma( av_{kk_tag}_{i}, {b_exprs[j]}, acc_{i}_{j} );")

        # full tiles: identical in both modes (tile shape is a tuning constant)
        E(f"  for( int kt = 0; kt < ( {k_txt} / {kb} ); ++kt ) {{")
        emit_stage("    ", f"kt * {kb}", kb)
        for kk in range(kb):
            emit_compute("    ", f"kt * {kb}", str(kk), str(kk))
        E("  }")

        # remainder: unrolled with known counts in static mode, loop form in dynamic
        rem = k % kb
        if mode == STATIC:
            if rem:
                kbase = str((k // kb) * kb)
                emit_stage("  ", kbase, rem)
                for kk in range(rem):
                    emit_compute("  ", kbase, str(kk), f"r{kk}")
        else:
            rem_txt = f"( {k_txt} % {kb} )"
            kbase = f"( ( {k_txt} / {kb} ) * {kb} )"
            E(f"  if( ( {rem_txt} ) > 0 ) {{")
            emit_stage("    ", kbase, kb, rows_txt=rem_txt)
            E(f"    for( int kk = 0; kk < {rem_txt}; ++kk ) {{")
            emit_compute("      ", kbase, "kk", "r")
            E("    }")
            E("  }")

        # epilogue: guarded on the output-pixel axis only; the padded chan-last
        # output layout keeps every n in range and every vector store aligned
        for i in range(mt):
            E(f"  if( mm_{i} < {m_txt} ) {{")
            for j0 in range(0, nt, vw):
                if vw == 1:
                    E(f"    {{ float ov = acc_{i}_{j0}; out[ mm_{i} * %(out_chan_size) + n_base + {j0} ] = %(out_write_xform); }}")
                else:
                    E("    {")
                    E(f"      float{vw} ovec;")
                    for c, comp in enumerate(vec_comps):
                        E(f"      {{ float ov = acc_{i}_{j0 + c}; ovec.{comp} = %(out_write_xform); }}")
                    E(f"      ( ( GLOBAL_MEM float{vw}* )( out + mm_{i} * %(out_chan_size) + n_base + {j0} ) )[ 0 ] = ovec;")
                    E("    }")
            E("  }")

        fmts = self.required_formats(node, edges, t)
        bindings = {
            "in": edges[node.inputs[0]],
            "filts": fmts.inputs[node.inputs[1]],
            "bias": fmts.inputs[node.inputs[2]],
            "out": fmts.output,
        }
        tmpl = CuclTemplate(
            name=_kernel_name("conv_tiled", node, edges),
            args=(
                TemplateArg("in", "in", ("img", "chan", "y", "x")),
                TemplateArg("filts", "in", ("in_chan", "y", "x", "out_chan")),
                TemplateArg("bias", "in", ("out_chan",)),
                TemplateArg("out", "out", ("img", "y", "x", "chan")),
            ),
            body="\n".join(L),
            free_vars=frozenset({"out_write_xform"}),
        )
        groups = -(-m // mtile) * (n_pad // ntile)
        return Instantiation(
            template=tmpl,
            bindings=bindings,
            mode=mode,
            var_values={"out_write_xform": xform},
            launch=LaunchConfig(group_count=groups, local_size=threads),
        )


class PoolMax(Variant):
    """Window max, one thread per output element."""

    name = "pool_max"
    rank = 0
    kind = KIND_POOL

    def generate(self, node, edges, params, mode):
        p = node.params
        ind = edges[node.inputs[0]]
        outd = edges[node.outputs[0]]
        b, c = outd.size_of("img"), outd.size_of("chan")
        oy, ox = outd.size_of("y"), outd.size_of("x")
        load = IN_AT.format(b="img", c="oc", y="iy", x="ix")
        if p.pad > 0:
            inner = (
                "        if( iy >= 0 && iy < %(in_y_size) && ix >= 0 && ix < %(in_x_size) ) {\n"
                f"          float v = {load};\n"
                "          m = ( v > m ) ? v : m;\n"
                "        }"
            )
        else:
            inner = f"        {{ float v = {load}; m = ( v > m ) ? v : m; }}"
        body = (
            "  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;\n"
            f"  if( gid < {OUT_TOTAL} ) {{\n"
            + DECOMPOSE_GID.replace("  int", "    int")
            + "    float m = -3.402823466e+38f;\n"
            "    for( int ky = 0; ky < %(win); ++ky ) {\n"
            "      for( int kx = 0; kx < %(win); ++kx ) {\n"
            "        int iy = oy * %(stride) - %(pad) + ky;\n"
            "        int ix = ox * %(stride) - %(pad) + kx;\n"
            f"{inner}\n"
            "      }\n"
            "    }\n"
            "    out[ gid ] = m;\n"
            "  }"
        )
        tmpl = CuclTemplate(
            name=f"pool_max_b{b}_c{c}_oy{oy}_ox{ox}_k{p.ksz}_s{p.stride}_p{p.pad}",
            args=(
                TemplateArg("in", "in", ("img", "chan", "y", "x")),
                TemplateArg("out", "out", ("img", "chan", "y", "x")),
            ),
            body=body,
            free_vars=frozenset({"win", "stride", "pad"}),
        )
        return Instantiation(
            template=tmpl,
            bindings={"in": ind, "out": outd},
            mode=mode,
            var_values={"win": str(p.ksz), "stride": str(p.stride), "pad": str(p.pad)},
            launch=_linear_launch(b * c * oy * ox),
        )


class Activation(Variant):
    name = "activation"
    rank = 0
    kind = KIND_ACT

    def generate(self, node, edges, params, mode):
        ind = edges[node.inputs[0]]
        outd = edges[node.outputs[0]]
        if node.params.func != "relu":
            raise Inapplicable(f"unknown activation '{node.params.func}'")
        body = (
            "  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;\n"
            f"  if( gid < {OUT_TOTAL} ) {{\n"
            "    float v = in[ gid ];\n"
            "    out[ gid ] = ( v > 0.0f ) ? v : 0.0f;\n"
            "  }"
        )
        tmpl = CuclTemplate(
            name=f"relu_n{outd.num_elems}",
            args=(
                TemplateArg("in", "in", ind.names),
                TemplateArg("out", "out", outd.names),
            ),
            body=body,
        )
        return Instantiation(
            template=tmpl,
            bindings={"in": ind, "out": outd},
            mode=mode,
            var_values={},
            launch=_linear_launch(outd.num_elems),
        )


class Xpose(Variant):
    """Data-format conversion: permute named dims, zero-pad growth, crop shrink."""

    name = "xpose"
    rank = 0
    kind = KIND_CONVERT

    def generate(self, node, edges, params, mode):
        src = edges[node.inputs[0]]
        dst = edges[node.outputs[0]]
        if set(src.names) != set(dst.names):
            raise Inapplicable(f"no conversion from {src.names} to {dst.names}")
        lines = [
            "  int gid = GROUP_ID_1D * LOCAL_SZ_1D + LOCAL_ID_1D;",
            f"  if( gid < ( %(out_{dst.names[0]}_size) * %(out_{dst.names[0]}_stride) ) ) {{",
        ]
        for i, name in enumerate(dst.names):
            if i == 0:
                lines.append(f"    int d_{name} = gid / %(out_{name}_stride);")
            else:
                lines.append(f"    int d_{name} = ( gid / %(out_{name}_stride) ) % %(out_{name}_size);")
        grown = [n for n in dst.names if dst.size_of(n) > src.size_of(n)]
        src_off = " + ".join(f"d_{n} * %(in_{n}_stride)" for n in src.names)
        if grown:
            guard = " && ".join(f"d_{n} < %(in_{n}_size)" for n in grown)
            lines += [
                "    float v = 0.0f;",
                f"    if( {guard} ) {{",
                f"      v = in[ {src_off} ];",
                "    }",
                "    out[ gid ] = v;",
            ]
        else:
            lines.append(f"    out[ gid ] = in[ {src_off} ];")
        lines.append("  }")
        tmpl = CuclTemplate(
            name=f"xpose_{'_'.join(dst.names)}_n{dst.num_elems}",
            args=(
                TemplateArg("in", "in", src.names),
                TemplateArg("out", "out", dst.names),
            ),
            body="\n".join(lines),
        )
        return Instantiation(
            template=tmpl,
            bindings={"in": src, "out": dst},
            mode=mode,
            var_values={},
            launch=_linear_launch(dst.num_elems),
        )


VARIANTS: dict[str, Variant] = {
    v.name: v for v in (ConvSimple(), ConvTiled(), Conv1x1(), ConvFC(), PoolMax(), Activation(), Xpose())
}


def variants_for_kind(kind: str) -> list[Variant]:
    """Variants for an op kind, most specialized first."""
    return sorted((v for v in VARIANTS.values() if v.kind == kind), key=lambda v: -v.rank)


def select_variant(node: OpNode, edges, db=None) -> tuple[Variant, TuneParams]:
    """Choose a variant and parameters for one node.

    With a tuning database the stored best record wins; otherwise the
    most-specialized applicable variant with the single global default
    parameters.
    """
    if db is not None:
        from .tuner import op_signature

        rec = db.records.get(op_signature(node, edges))
        if rec is not None:
            return VARIANTS[rec.variant], rec.params
    for v in variants_for_kind(node.kind):
        if v.applies(node, edges, DEFAULT_TUNE) is None:
            return v, DEFAULT_TUNE
    raise Inapplicable(f"no variant for node '{node.name}' of kind {node.kind}")
