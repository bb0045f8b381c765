import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irloc.core import (
    DescriptorSet,
    centroid,
    decode_descriptor_set,
    decode_matches,
    encode_descriptor_set,
    encode_matches,
    hamming_distance,
    hamming_matrix,
    l2_distance,
    read_descriptor_set,
    sq_l2_matrix,
    write_descriptor_set,
)
from irloc.errors import EmptyInputError, FormatError, SignatureError
from oracles import hamming_bits, l2_loop


def test_hamming_all_bits_differ():
    assert hamming_distance(np.array([0xFF], np.uint8), np.array([0x00], np.uint8)) == 8


def test_hamming_identity(rng):
    a = rng.integers(0, 256, 32, dtype=np.uint8)
    assert hamming_distance(a, a) == 0


def test_hamming_matches_bit_loop(rng):
    for _ in range(20):
        a = rng.integers(0, 256, 32, dtype=np.uint8)
        b = rng.integers(0, 256, 32, dtype=np.uint8)
        assert hamming_distance(a, b) == hamming_bits(a, b)


def test_hamming_frozen_value():
    # fixed pair; value from the per-bit oracle
    a = np.arange(32, dtype=np.uint8)
    b = (np.arange(32, dtype=np.uint8) * 7 + 3).astype(np.uint8)
    assert hamming_distance(a, b) == hamming_bits(a, b) == 136


def test_hamming_rejects_mismatch():
    with pytest.raises(SignatureError):
        hamming_distance(np.zeros(4, np.uint8), np.zeros(8, np.uint8))
    with pytest.raises(SignatureError):
        hamming_distance(np.zeros(4, np.uint8), np.zeros(4, np.float32))


def test_l2_analytic():
    z = np.zeros(4, np.float32)
    assert l2_distance(z, z) == 0.0
    assert l2_distance(np.array([1, 0], np.float32), np.array([0, 1], np.float32)) == pytest.approx(np.sqrt(2))


def test_l2_matches_loop(rng):
    for _ in range(10):
        a = rng.standard_normal(256).astype(np.float32)
        b = rng.standard_normal(256).astype(np.float32)
        assert l2_distance(a, b) == pytest.approx(l2_loop(a, b), rel=1e-6)


def test_l2_rejects_nonfinite():
    a = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(SignatureError):
        l2_distance(a, np.zeros(2, np.float32))


def test_matrix_kernels_agree_with_scalar(rng):
    A = rng.integers(0, 256, (5, 32), dtype=np.uint8)
    B = rng.integers(0, 256, (4, 32), dtype=np.uint8)
    H = hamming_matrix(A, B)
    assert all(H[i, j] == hamming_bits(A[i], B[j]) for i in range(5) for j in range(4))
    Fa = rng.standard_normal((5, 16)).astype(np.float32)
    Fb = rng.standard_normal((4, 16)).astype(np.float32)
    D = np.sqrt(sq_l2_matrix(Fa, Fb))
    assert all(abs(D[i, j] - l2_loop(Fa[i], Fb[j])) < 1e-5 for i in range(5) for j in range(4))


def test_centroid_majority_and_ties():
    m = np.array([[0b1100], [0b1100], [0b0011]], np.uint8)
    assert centroid(m)[0] == 0b1100
    assert centroid(np.array([[0b1], [0b0]], np.uint8))[0] == 0
    one = np.array([[0xA5, 0x3C]], np.uint8)
    assert np.array_equal(centroid(one), one[0])


def test_centroid_float_mean():
    m = np.array([[0, 2], [2, 4]], np.float32)
    assert np.allclose(centroid(m), [1, 3])


def test_centroid_empty():
    with pytest.raises(EmptyInputError):
        centroid(np.zeros((0, 4), np.uint8))


def _sets(rng):
    n = 7
    yield DescriptorSet(rng.integers(0, 256, (n, 32), dtype=np.uint8))
    yield DescriptorSet(rng.standard_normal((n, 256)).astype(np.float32), rng.random((n, 2)) * 100)
    yield DescriptorSet(
        rng.standard_normal((n, 8)).astype(np.float32), None, rng.integers(0, 1000, n)
    )
    yield DescriptorSet(
        rng.integers(0, 256, (n, 32), dtype=np.uint8), rng.random((n, 2)), rng.integers(0, 1000, n)
    )
    yield DescriptorSet.empty("float", 256)


def test_dsc_roundtrip(tmp_path, rng):
    for i, s in enumerate(_sets(rng)):
        p = tmp_path / f"{i}.dsc"
        write_descriptor_set(s, p)
        back = read_descriptor_set(p)
        assert back == s
        write_descriptor_set(back, tmp_path / "again.dsc")
        assert (tmp_path / "again.dsc").read_bytes() == p.read_bytes()


def test_dsc_bad_magic(rng):
    buf = bytearray(encode_descriptor_set(next(_sets(rng))))
    buf[:4] = b"XSC1"
    with pytest.raises(FormatError, match="bad magic at offset 0"):
        decode_descriptor_set(bytes(buf))


def test_dsc_truncated(rng):
    buf = encode_descriptor_set(next(_sets(rng)))
    with pytest.raises(FormatError, match="offset"):
        decode_descriptor_set(buf[:-5])


def test_dsc_header_layout():
    s = DescriptorSet(np.array([[1, 2]], np.uint8))
    buf = encode_descriptor_set(s)
    assert buf[:4] == b"DSC1"
    assert buf[4] == 0 and buf[5:7] == b"\x02\x00" and buf[7:11] == b"\x01\x00\x00\x00"
    assert buf[11:13] == b"\x01\x02" and buf[13] == 0


def test_matches_roundtrip():
    m = np.array([[0, 3], [4, 1]])
    assert np.array_equal(decode_matches(encode_matches(m)), m)


def test_descriptor_set_length_checks():
    with pytest.raises(SignatureError):
        DescriptorSet(np.zeros((3, 4), np.float32), np.zeros((2, 2)))


# ---------------------------------------------------------------- properties

bytes32 = st.binary(min_size=32, max_size=32).map(lambda b: np.frombuffer(b, np.uint8))
floats8 = st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=8).map(lambda v: np.array(v, np.float32))


@given(bytes32, bytes32, bytes32)
def test_hamming_is_metric(a, b, c):
    assert hamming_distance(a, b) == hamming_distance(b, a)
    assert (hamming_distance(a, b) == 0) == np.array_equal(a, b)
    assert hamming_distance(a, c) <= hamming_distance(a, b) + hamming_distance(b, c)


@given(floats8, floats8, floats8)
def test_l2_is_metric(a, b, c):
    assert l2_distance(a, b) == pytest.approx(l2_distance(b, a))
    assert (l2_distance(a, b) == 0) == np.array_equal(a, b)
    assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-6 * (1 + l2_distance(a, c))


@given(bytes32, st.integers(1, 6))
def test_centroid_of_copies_binary(a, n):
    assert np.array_equal(centroid(np.stack([a] * n)), a)


@given(floats8, st.integers(1, 6))
def test_centroid_of_copies_float(a, n):
    assert np.allclose(centroid(np.stack([a] * n)), a)


@given(
    st.integers(0, 6),
    st.sampled_from(["binary", "float"]),
    st.booleans(),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
def test_dsc_roundtrip_property(n, kind, with_kp, with_ids, seed):
    r = np.random.default_rng(seed)
    d = r.integers(0, 256, (n, 16), dtype=np.uint8) if kind == "binary" else r.standard_normal((n, 16)).astype(np.float32)
    s = DescriptorSet(d, r.random((n, 2)) if with_kp else None, r.integers(0, 2**32, n) if with_ids else None)
    buf = encode_descriptor_set(s)
    back, end = decode_descriptor_set(buf)
    assert end == len(buf)
    assert encode_descriptor_set(back) == buf
