"""The embedded benchmark corpus: 43 convolution operations drawn from
AlexNet-, Network-in-Network-, and Inception-class networks at batch size 5.

Each row records kernel size (square), stride, output channels, batch, input
and output extents (y, x, chan), and the published per-operation FLOP count.
Padding is not part of the source table; it is recovered as the unique
smallest value consistent with the listed output extent and committed to the
CSV so the derivation stays auditable.

One row (the 6x6/4096-channel fully-connected convolution) publishes a FLOP
count exactly 10x what the table's own accounting gives; the row directly
above it has the identical arithmetic product listed at the consistent
magnitude.  The published string is kept verbatim and the discrepancy is
exposed via `flops_published_consistent`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .errors import CuclgenError
from .frontend import ConvParams, ComputeGraph, conv_graph, window_out
from .ndarray import DimsSpec

# (ksz, stride, oc, batch, in_y, in_x, in_chan, out_y, out_x, out_chan, flops)
_TABLE = (
    (5, 1, 32, 5, 28, 28, 16, 28, 28, 32, "1.00352e+08"),
    (5, 1, 64, 5, 14, 14, 32, 14, 14, 64, "1.00352e+08"),
    (1, 1, 256, 5, 7, 7, 832, 7, 7, 256, "1.04366e+08"),
    (1, 1, 112, 5, 14, 14, 512, 14, 14, 112, "1.12394e+08"),
    (1, 1, 128, 5, 14, 14, 512, 14, 14, 128, "1.28451e+08"),
    (1, 1, 64, 5, 28, 28, 256, 28, 28, 64, "1.28451e+08"),
    (1, 1, 64, 5, 56, 56, 64, 56, 56, 64, "1.28451e+08"),
    (1, 1, 128, 5, 14, 14, 528, 14, 14, 128, "1.32465e+08"),
    (1, 1, 144, 5, 14, 14, 512, 14, 14, 144, "1.44507e+08"),
    (1, 1, 96, 5, 28, 28, 192, 28, 28, 96, "1.44507e+08"),
    (1, 1, 384, 5, 7, 7, 832, 7, 7, 384, "1.56549e+08"),
    (1, 1, 160, 5, 14, 14, 512, 14, 14, 160, "1.60563e+08"),
    (1, 1, 160, 5, 14, 14, 528, 14, 14, 160, "1.65581e+08"),
    (1, 1, 4096, 5, 1, 1, 4096, 1, 1, 4096, "1.67772e+08"),
    (1, 1, 192, 5, 14, 14, 480, 14, 14, 192, "1.80634e+08"),
    (5, 1, 128, 5, 14, 14, 32, 14, 14, 128, "2.00704e+08"),
    (3, 1, 320, 5, 7, 7, 160, 7, 7, 320, "2.25792e+08"),
    (1, 1, 384, 5, 13, 13, 384, 13, 13, 384, "2.49201e+08"),
    (1, 1, 128, 5, 28, 28, 256, 28, 28, 128, "2.56901e+08"),
    (1, 1, 256, 5, 14, 14, 528, 14, 14, 256, "2.64929e+08"),
    (1, 1, 96, 5, 54, 54, 96, 54, 54, 96, "2.68739e+08"),
    (3, 1, 384, 5, 7, 7, 192, 7, 7, 384, "3.2514e+08"),
    (3, 1, 208, 5, 14, 14, 96, 14, 14, 208, "3.52236e+08"),
    (1, 1, 1000, 5, 6, 6, 1024, 6, 6, 1000, "3.6864e+08"),
    (1, 1, 1024, 5, 6, 6, 1024, 6, 6, 1024, "3.77487e+08"),
    (6, 1, 4096, 5, 6, 6, 256, 1, 1, 4096, "3.77487e+09"),
    (3, 1, 224, 5, 14, 14, 112, 14, 14, 224, "4.42552e+08"),
    (1, 1, 256, 5, 27, 27, 256, 27, 27, 256, "4.77757e+08"),
    (3, 1, 256, 5, 14, 14, 128, 14, 14, 256, "5.78028e+08"),
    (5, 1, 96, 5, 28, 28, 32, 28, 28, 96, "6.02112e+08"),
    (3, 1, 288, 5, 14, 14, 144, 14, 14, 288, "7.31566e+08"),
    (3, 1, 128, 5, 28, 28, 96, 28, 28, 128, "8.67041e+08"),
    (3, 1, 320, 5, 14, 14, 160, 14, 14, 320, "9.03168e+08"),
    (11, 4, 96, 5, 224, 224, 3, 54, 54, 96, "1.01617e+09"),
    (11, 4, 96, 5, 227, 227, 3, 55, 55, 96, "1.05415e+09"),
    (7, 2, 64, 5, 224, 224, 3, 112, 112, 64, "1.18014e+09"),
    (3, 1, 1024, 5, 6, 6, 384, 6, 6, 1024, "1.27402e+09"),
    (3, 1, 256, 5, 13, 13, 384, 13, 13, 256, "1.4952e+09"),
    (3, 1, 384, 5, 13, 13, 256, 13, 13, 384, "1.4952e+09"),
    (3, 1, 192, 5, 28, 28, 128, 28, 28, 192, "1.73408e+09"),
    (3, 1, 384, 5, 13, 13, 384, 13, 13, 384, "2.24281e+09"),
    (3, 1, 192, 5, 56, 56, 64, 56, 56, 192, "3.46817e+09"),
    (5, 1, 256, 5, 27, 27, 96, 27, 27, 256, "4.47898e+09"),
)

CSV_HEADER = ("ksz", "stride", "pad", "oc", "b", "in_y", "in_x", "in_c", "out_y", "out_x", "out_c", "flops")


class CorpusParseError(CuclgenError):
    pass


def recover_pad(ksz: int, stride: int, in_sz: int, out_sz: int) -> int:
    """Smallest padding consistent with the listed output extent."""
    pad = max(0, -(-((out_sz - 1) * stride + ksz - in_sz) // 2))
    if window_out(in_sz, ksz, stride, pad) != out_sz:
        raise CorpusParseError(
            f"no consistent pad for ksz={ksz} stride={stride} in={in_sz} out={out_sz}"
        )
    return pad


@dataclass(frozen=True)
class BenchOp:
    ksz: int
    stride: int
    pad: int
    out_chans: int
    batch: int
    in_y: int
    in_x: int
    in_chans: int
    out_y: int
    out_x: int
    out_chans_listed: int
    flops_published: str

    @property
    def conv_params(self) -> ConvParams:
        return ConvParams(ksz=self.ksz, stride=self.stride, pad=self.pad, out_chans=self.out_chans)

    @property
    def input_dims(self) -> DimsSpec:
        return DimsSpec.row_major(("img", "chan", "y", "x"), (self.batch, self.in_chans, self.in_y, self.in_x))

    @property
    def flops_computed(self) -> int:
        return 2 * self.ksz * self.ksz * self.in_chans * self.out_chans * self.out_y * self.out_x * self.batch

    @property
    def flops_published_consistent(self) -> bool:
        return f"{self.flops_computed:.6g}" == self.flops_published

    def graph(self) -> ComputeGraph:
        return conv_graph(self.conv_params, self.input_dims)


def _row_to_op(ksz, stride, oc, b, iy, ix, ic, oy, ox, oc2, flops) -> BenchOp:
    pad = recover_pad(ksz, stride, iy, oy)
    pad_x = recover_pad(ksz, stride, ix, ox)
    if pad != pad_x:
        raise CorpusParseError("non-uniform padding is not supported")
    return BenchOp(ksz, stride, pad, oc, b, iy, ix, ic, oy, ox, oc2, flops)


def corpus() -> list[BenchOp]:
    return [_row_to_op(*row) for row in _TABLE]


def to_csv(ops) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for op in ops:
        w.writerow(
            (op.ksz, op.stride, op.pad, op.out_chans, op.batch, op.in_y, op.in_x, op.in_chans, op.out_y, op.out_x, op.out_chans_listed, op.flops_published)
        )
    return buf.getvalue()


def from_csv(text: str) -> list[BenchOp]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise CorpusParseError(f"expected header {','.join(CSV_HEADER)}")
    ops = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CorpusParseError(f"line {i}: expected {len(CSV_HEADER)} fields")
        try:
            vals = [int(v) for v in row[:-1]]
        except ValueError as e:
            raise CorpusParseError(f"line {i}: {e}") from None
        op = BenchOp(*vals, row[-1])
        if window_out(op.in_y, op.ksz, op.stride, op.pad) != op.out_y:
            raise CorpusParseError(f"line {i}: output extent inconsistent with parameters")
        ops.append(op)
    return ops


def load_corpus(path) -> list[BenchOp]:
    try:
        with open(path, encoding="utf-8") as f:
            return from_csv(f.read())
    except OSError as e:
        raise CorpusParseError(f"cannot read {path}: {e}") from None


def shipped_corpus_path() -> str:
    import importlib.resources as res

    return str(res.files("cuclgen").joinpath("data/bench_corpus.csv"))
