"""Brute-force reference implementations and tolerance-based comparison.

Every kernel the generators emit is cross-checked against these.  The
references accumulate in float64 so that reference-side rounding never eats
into the tolerance budget of the float32 kernels under test.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import CuclgenError
from .ndarray import NdArray, nda_from_np


class ShapeMismatch(CuclgenError):
    pass


@dataclass(frozen=True)
class ToleranceSpec:
    """Relative tolerance with an absolute floor for near-zero values."""

    rel_tol: float = 1e-5
    abs_floor: float = 1e-6


# Reductions longer than this get the loose end of the tolerance band.
LONG_REDUCTION_TERMS = 4096


def tolerance_for(reduction_terms: int) -> ToleranceSpec:
    if reduction_terms > LONG_REDUCTION_TERMS:
        return ToleranceSpec(rel_tol=1e-3)
    return ToleranceSpec()


@dataclass(frozen=True)
class CompareResult:
    ok: bool
    max_rel_err: float
    worst_index: tuple[int, ...]


def seed_for(signature: str) -> int:
    """Stable per-signature seed (process-independent, unlike hash())."""
    return int.from_bytes(hashlib.sha256(signature.encode()).digest()[:8], "little")


def noise(names, sizes, seed: int) -> NdArray:
    """All-non-zero pseudo-random test data, uniform in [0.1, 1.0)."""
    rng = np.random.default_rng(seed)
    total = 1
    for s in sizes:
        total *= s
    vals = rng.uniform(0.1, 1.0, size=total).astype(np.float32)
    return nda_from_np(names, vals.reshape(tuple(sizes)))


def _as4d(nda: NdArray, names) -> np.ndarray:
    if nda.dims.names != tuple(names):
        raise ShapeMismatch(f"expected dims {tuple(names)}, got {nda.dims.names}")
    return nda.to_np()


def ref_conv(input_nda: NdArray, filters: NdArray, bias: NdArray, p, act=None) -> NdArray:
    """Direct convolution: out[b,oc,oy,ox] = act(bias[oc] + sum in*filt over window).

    Out-of-range input (from padding) contributes zero.  float64 accumulation;
    at the tolerances used here the summation order is immaterial.
    """
    inp = _as4d(input_nda, ("img", "chan", "y", "x")).astype(np.float64)
    flt = _as4d(filters, ("out_chan", "in_chan", "y", "x")).astype(np.float64)
    if bias.dims.names != ("out_chan",):
        raise ShapeMismatch(f"bias dims {bias.dims.names}")
    bvec = bias.to_np().astype(np.float64)
    b, ic, h, w = inp.shape
    oc, fic, ky, kx = flt.shape
    if fic != ic or ky != p.ksz or kx != p.ksz or oc != p.out_chans or len(bvec) != oc:
        raise ShapeMismatch("conv operand shapes inconsistent with params")
    oy = (h + 2 * p.pad - p.ksz) // p.stride + 1
    ox = (w + 2 * p.pad - p.ksz) // p.stride + 1
    if oy < 1 or ox < 1:
        raise ShapeMismatch("non-positive output dims")
    padded = np.pad(inp, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    out = np.empty((b, oc, oy, ox), dtype=np.float64)
    for yy in range(oy):
        for xx in range(ox):
            win = padded[:, :, yy * p.stride : yy * p.stride + p.ksz, xx * p.stride : xx * p.stride + p.ksz]
            out[:, :, yy, xx] = np.tensordot(win, flt, axes=([1, 2, 3], [1, 2, 3]))
    out += bvec[None, :, None, None]
    if act == "relu":
        out = np.maximum(out, 0.0)
    elif act is not None:
        raise ShapeMismatch(f"unknown activation '{act}'")
    return nda_from_np(("img", "chan", "y", "x"), out.astype(np.float32))


def ref_pool_max(input_nda: NdArray, p) -> NdArray:
    """Per-channel window max; out-of-range positions use the -inf identity."""
    inp = _as4d(input_nda, ("img", "chan", "y", "x")).astype(np.float64)
    b, c, h, w = inp.shape
    oy = (h + 2 * p.pad - p.ksz) // p.stride + 1
    ox = (w + 2 * p.pad - p.ksz) // p.stride + 1
    if oy < 1 or ox < 1:
        raise ShapeMismatch("non-positive output dims")
    padded = np.pad(inp, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)), constant_values=-np.inf)
    out = np.empty((b, c, oy, ox), dtype=np.float64)
    for yy in range(oy):
        for xx in range(ox):
            win = padded[:, :, yy * p.stride : yy * p.stride + p.ksz, xx * p.stride : xx * p.stride + p.ksz]
            out[:, :, yy, xx] = win.max(axis=(2, 3))
    return nda_from_np(("img", "chan", "y", "x"), out.astype(np.float32))


def ref_relu(input_nda: NdArray) -> NdArray:
    out = np.maximum(input_nda.to_np(), np.float32(0.0))
    return nda_from_np(input_nda.dims.names, out)


def compare(a: NdArray, b: NdArray, tol: ToleranceSpec = ToleranceSpec()) -> CompareResult:
    """Elementwise check: |a-b| <= max(abs_floor, rel_tol * max(|a|,|b|))."""
    if a.dims != b.dims:
        raise ShapeMismatch(f"{a.dims.names}{a.dims.sizes} vs {b.dims.names}{b.dims.sizes}")
    av = a.to_np().astype(np.float64)
    bv = b.to_np().astype(np.float64)
    diff = np.abs(av - bv)
    mag = np.maximum(np.abs(av), np.abs(bv))
    ok_mask = diff <= np.maximum(tol.abs_floor, tol.rel_tol * mag)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(mag > 0, diff / mag, 0.0)
    worst_flat = int(np.argmax(rel))
    worst_index = tuple(int(i) for i in np.unravel_index(worst_flat, av.shape))
    return CompareResult(bool(ok_mask.all()), float(rel.flat[worst_flat]), worst_index)
