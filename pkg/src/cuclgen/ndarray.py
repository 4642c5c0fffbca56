"""Named-dimension N-D arrays.

Every dimension of every array carries a mnemonic name alongside its size and
stride.  Kernel generators specialize on the sizes; the names are what gets
type-checked when an array is bound to a kernel argument, so that e.g. a batch
of images (img:chan:y:x) can never be passed where a filter bank
(out_chan:in_chan:y:x) is expected.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import CuclgenError

DIM_NAME_RE = re.compile(r"[a-z_][a-z0-9_]*\Z")


class DimError(CuclgenError):
    pass


class DuplicateDimName(DimError):
    pass


class EmptyDims(DimError):
    pass


class IndexOutOfBounds(DimError):
    def __init__(self, dim_name, index, size):
        super().__init__(f"index {index} out of bounds for dim '{dim_name}' of size {size}")
        self.dim_name = dim_name
        self.index = index
        self.size = size


class NameSetMismatch(DimError):
    pass


@dataclass(frozen=True)
class DimInfo:
    """One named dimension: size in elements, stride in elements (not bytes)."""

    name: str
    size: int
    stride: int

    def __post_init__(self):
        if not DIM_NAME_RE.match(self.name):
            raise DimError(f"bad dim name {self.name!r}: must match [a-z_][a-z0-9_]*")
        if self.size < 1:
            raise DimError(f"dim '{self.name}': size must be >= 1, got {self.size}")
        if self.stride < 0:
            raise DimError(f"dim '{self.name}': stride must be >= 0, got {self.stride}")


@dataclass(frozen=True)
class DimsSpec:
    """An ordered tuple of named dimensions."""

    dims: tuple[DimInfo, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise DuplicateDimName(f"duplicate dim names in {names}")

    @staticmethod
    def row_major(names, sizes) -> "DimsSpec":
        """Dense row-major spec: last dim has stride 1."""
        names = list(names)
        sizes = list(sizes)
        if len(names) != len(sizes):
            raise DimError("names and sizes must have equal length")
        if not names:
            raise EmptyDims("need at least one dimension")
        strides = [0] * len(sizes)
        acc = 1
        for i in range(len(sizes) - 1, -1, -1):
            strides[i] = acc
            acc *= sizes[i]
        return DimsSpec(tuple(DimInfo(n, s, st) for n, s, st in zip(names, sizes, strides)))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.dims)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(d.stride for d in self.dims)

    def __len__(self):
        return len(self.dims)

    def dim(self, name: str) -> DimInfo:
        for d in self.dims:
            if d.name == name:
                return d
        raise DimError(f"no dim named '{name}' in {self.names}")

    def size_of(self, name: str) -> int:
        return self.dim(name).size

    def stride_of(self, name: str) -> int:
        return self.dim(name).stride

    def has_dim(self, name: str) -> bool:
        return any(d.name == name for d in self.dims)

    @property
    def num_elems(self) -> int:
        """Dense element count (product of sizes)."""
        acc = 1
        for d in self.dims:
            acc *= d.size
        return acc

    @property
    def buffer_len(self) -> int:
        """Smallest flat buffer that holds every addressable element."""
        return sum((d.size - 1) * d.stride for d in self.dims) + 1

    @property
    def is_dense_row_major(self) -> bool:
        acc = 1
        for d in reversed(self.dims):
            if d.stride != acc:
                return False
            acc *= d.size
        return True


@dataclass(frozen=True)
class DimsMismatch:
    """Structured result of a failed dims_check: arity or a name at a position."""

    kind: str  # "arity" | "name"
    position: int
    declared: object
    actual: object

    def __str__(self):
        if self.kind == "arity":
            return f"arity mismatch: declared {self.declared} dims vs actual {self.actual}"
        return (
            f"dim name mismatch at position {self.position}: "
            f"declared '{self.declared}' vs actual '{self.actual}'"
        )


def dims_check(declared: DimsSpec, actual: DimsSpec):
    """Names-only structural check; sizes and strides are free to differ.

    Returns None when compatible, else a DimsMismatch. Never raises.
    """
    if len(declared) != len(actual):
        return DimsMismatch("arity", -1, len(declared), len(actual))
    for i, (d, a) in enumerate(zip(declared.names, actual.names)):
        if d != a:
            return DimsMismatch("name", i, d, a)
    return None


class NdArray:
    """Flat float32 storage addressed through a DimsSpec."""

    __slots__ = ("dims", "elems")

    def __init__(self, dims: DimsSpec, elems: np.ndarray):
        if elems.dtype != np.float32 or elems.ndim != 1:
            raise DimError("elems must be a 1-D float32 array")
        if len(elems) < dims.buffer_len:
            raise DimError(f"buffer of {len(elems)} elements too small for {dims}")
        self.dims = dims
        self.elems = elems

    def __repr__(self):
        pairs = ",".join(f"{d.name}:{d.size}" for d in self.dims.dims)
        return f"NdArray({pairs})"

    def at(self, *idx) -> float:
        return float(self.elems[index_flatten(self.dims, idx)])

    def set_at(self, *idx_and_value):
        *idx, value = idx_and_value
        self.elems[index_flatten(self.dims, idx)] = np.float32(value)

    def to_np(self) -> np.ndarray:
        """View as a shaped numpy array. Requires dense row-major layout."""
        if not self.dims.is_dense_row_major:
            raise DimError("to_np requires dense row-major layout")
        return self.elems[: self.dims.num_elems].reshape(self.dims.sizes)

    def copy(self) -> "NdArray":
        return NdArray(self.dims, self.elems.copy())


def make_nda(dim_names, dim_sizes) -> NdArray:
    """Dense row-major zero-filled array."""
    spec = DimsSpec.row_major(dim_names, dim_sizes)
    return NdArray(spec, np.zeros(spec.num_elems, dtype=np.float32))


def nda_from_np(names, arr: np.ndarray) -> NdArray:
    spec = DimsSpec.row_major(names, arr.shape)
    return NdArray(spec, np.ascontiguousarray(arr, dtype=np.float32).reshape(-1))


def index_flatten(dims: DimsSpec, idx) -> int:
    """Flat offset of a multi-index: sum of idx[i] * stride[i]."""
    idx = tuple(idx)
    if len(idx) != len(dims):
        raise IndexOutOfBounds("<arity>", len(idx), len(dims))
    off = 0
    for d, i in zip(dims.dims, idx):
        if not 0 <= i < d.size:
            raise IndexOutOfBounds(d.name, i, d.size)
        off += i * d.stride
    return off


def convert_format(src: NdArray, target: DimsSpec) -> NdArray:
    """Reorder/resize an array to a new named layout.

    Target names must be a permutation of source names.  Per name, a larger
    target size zero-pads and a smaller one crops, so a pad-then-restore round
    trip is the identity.  Returns a fresh dense row-major array.
    """
    if set(target.names) != set(src.dims.names):
        raise NameSetMismatch(f"cannot convert {src.dims.names} to {target.names}")
    a = src.to_np()
    perm = [src.dims.names.index(n) for n in target.names]
    a = np.transpose(a, perm)
    for axis, want in enumerate(target.sizes):
        have = a.shape[axis]
        if want < have:
            a = a[tuple(slice(None) if ax != axis else slice(want) for ax in range(a.ndim))]
        elif want > have:
            pad = [(0, 0)] * a.ndim
            pad[axis] = (0, want - have)
            a = np.pad(a, pad)
    out_spec = DimsSpec.row_major(target.names, target.sizes)
    return NdArray(out_spec, np.ascontiguousarray(a, dtype=np.float32).reshape(-1))
