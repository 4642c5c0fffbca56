import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuclgen.ndarray import (
    DimError,
    DimsSpec,
    DuplicateDimName,
    EmptyDims,
    IndexOutOfBounds,
    NameSetMismatch,
    convert_format,
    dims_check,
    index_flatten,
    make_nda,
    nda_from_np,
)


def test_make_nda_canonical_image_batch():
    a = make_nda(["img", "chan", "y", "x"], [5, 3, 227, 227])
    assert len(a.elems) == 772_935
    assert a.dims.stride_of("img") == 154_587
    assert np.all(a.elems == 0)


def test_make_nda_singleton():
    a = make_nda(["k"], [1])
    assert len(a.elems) == 1
    assert a.dims.stride_of("k") == 1


def test_make_nda_row_major_strides():
    a = make_nda(["y", "x"], [2, 3])
    assert a.dims.strides == (3, 1)


def test_make_nda_rejects_duplicates_and_empty():
    with pytest.raises(DuplicateDimName):
        make_nda(["a", "a"], [2, 2])
    with pytest.raises(EmptyDims):
        make_nda([], [])


def test_dim_name_grammar():
    with pytest.raises(DimError):
        make_nda(["Chan"], [2])
    with pytest.raises(DimError):
        make_nda(["2x"], [2])


def test_index_flatten_basics():
    spec = DimsSpec.row_major(["y", "x"], [2, 3])
    assert index_flatten(spec, (1, 2)) == 5
    assert index_flatten(spec, (0, 0)) == 0


def test_index_flatten_last_element_is_count_minus_one():
    spec = DimsSpec.row_major(["img", "chan", "y", "x"], [5, 3, 227, 227])
    assert index_flatten(spec, (4, 2, 226, 226)) == spec.num_elems - 1


def test_index_flatten_bounds():
    spec = DimsSpec.row_major(["y", "x"], [2, 3])
    with pytest.raises(IndexOutOfBounds) as exc:
        index_flatten(spec, (0, 3))
    assert exc.value.dim_name == "x"
    with pytest.raises(IndexOutOfBounds):
        index_flatten(spec, (0, -1))


def test_index_flatten_bijective_exhaustive():
    # every dense array up to 4096 elements in a few rank patterns
    for sizes in [(4096,), (64, 64), (16, 16, 16), (8, 8, 8, 8), (2, 3, 5, 7)]:
        names = ["a", "b", "c", "d"][: len(sizes)]
        spec = DimsSpec.row_major(names, sizes)
        seen = set()
        for idx in itertools.product(*(range(s) for s in sizes)):
            off = index_flatten(spec, idx)
            assert off not in seen
            seen.add(off)
        assert seen == set(range(spec.num_elems))


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4))
@settings(max_examples=60, deadline=None)
def test_index_flatten_bijective_property(sizes):
    names = ["a", "b", "c", "d"][: len(sizes)]
    spec = DimsSpec.row_major(names, sizes)
    offs = {index_flatten(spec, idx) for idx in itertools.product(*(range(s) for s in sizes))}
    assert offs == set(range(spec.num_elems))


def test_dims_check_name_mismatch_position():
    filts = DimsSpec.row_major(["in_chan", "out_chan", "y", "x"], [1, 1, 1, 1])
    imgs = DimsSpec.row_major(["img", "chan", "y", "x"], [5, 3, 2, 2])
    m = dims_check(filts, imgs)
    assert m is not None and m.kind == "name" and m.position == 0
    assert m.declared == "in_chan" and m.actual == "img"


def test_dims_check_sizes_do_not_matter():
    a = DimsSpec.row_major(["img", "chan", "y", "x"], [1, 1, 1, 1])
    b = DimsSpec.row_major(["img", "chan", "y", "x"], [5, 3, 227, 227])
    assert dims_check(a, b) is None


def test_dims_check_arity():
    a = DimsSpec.row_major(["a", "b"], [1, 1])
    b = DimsSpec.row_major(["a", "b", "c"], [1, 1, 1])
    m = dims_check(a, b)
    assert m is not None and m.kind == "arity"


def test_dims_check_reflexive_symmetric():
    a = DimsSpec.row_major(["a", "b"], [2, 3])
    b = DimsSpec.row_major(["a", "b"], [9, 1])
    assert dims_check(a, a) is None
    assert (dims_check(a, b) is None) == (dims_check(b, a) is None)


def test_convert_format_transpose_two_elements():
    src = make_nda(["img", "chan", "y", "x"], [1, 2, 1, 1])
    src.elems[:] = [7, 9]
    out = convert_format(src, DimsSpec.row_major(["chan", "img", "y", "x"], [2, 1, 1, 1]))
    assert list(out.elems) == [7, 9]
    assert out.dims.names == ("chan", "img", "y", "x")


def test_convert_format_zero_pad():
    src = make_nda(["chan"], [3])
    src.elems[:] = [1, 2, 3]
    out = convert_format(src, DimsSpec.row_major(["chan"], [4]))
    assert list(out.elems) == [1, 2, 3, 0]


def test_convert_format_crop_inverts_pad():
    src = make_nda(["chan"], [3])
    src.elems[:] = [4, 5, 6]
    padded = convert_format(src, DimsSpec.row_major(["chan"], [8]))
    back = convert_format(padded, src.dims)
    assert np.array_equal(back.elems, src.elems)


def test_convert_format_name_set_mismatch():
    src = make_nda(["a", "b"], [2, 2])
    with pytest.raises(NameSetMismatch):
        convert_format(src, DimsSpec.row_major(["a", "c"], [2, 2]))


@given(st.permutations(["img", "chan", "y", "x"]), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_convert_format_roundtrip_property(perm, seed):
    rng = np.random.default_rng(seed)
    sizes = tuple(int(rng.integers(1, 5)) for _ in range(4))
    src = nda_from_np(("img", "chan", "y", "x"), rng.uniform(0.1, 1, sizes).astype(np.float32))
    by_name = dict(zip(src.dims.names, src.dims.sizes))
    grown = DimsSpec.row_major(perm, [by_name[n] + int(rng.integers(0, 3)) for n in perm])
    there = convert_format(src, grown)
    back = convert_format(there, src.dims)
    assert np.array_equal(back.elems, src.elems)


def test_convert_format_roundtrip_brute_force():
    rng = np.random.default_rng(7)
    src = nda_from_np(("img", "chan", "y", "x"), rng.uniform(0.1, 1, (2, 3, 4, 5)).astype(np.float32))
    target = DimsSpec.row_major(("x", "img", "chan", "y"), (5, 2, 3, 4))
    out = convert_format(src, target)
    for i in range(2):
        for c in range(3):
            for y in range(4):
                for x in range(5):
                    assert out.at(x, i, c, y) == src.at(i, c, y, x)
