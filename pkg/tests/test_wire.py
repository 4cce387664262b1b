from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from jamalert import wire


# Golden bytes, frozen by hand from the layout (big-endian, length-prefixed):
#   u8(7) u16(0x0102) u32(0x01020304) f64(1.5) text("ab") blob(b"\x00\xff")
GOLDEN = bytes.fromhex("07" "0102" "01020304" "3ff8000000000000" "0002" "6162" "0002" "00ff")


def test_writer_golden_bytes():
    w = wire.Writer()
    w.u8(7).u16(0x0102).u32(0x01020304).f64(1.5).text("ab").blob(b"\x00\xff")
    assert w.done() == GOLDEN


def test_reader_golden_bytes():
    r = wire.Reader(GOLDEN)
    assert r.u8() == 7
    assert r.u16() == 0x0102
    assert r.u32() == 0x01020304
    assert r.f64() == 1.5
    assert r.text() == "ab"
    assert r.blob() == b"\x00\xff"
    r.expect_end()


@given(
    st.integers(min_value=0, max_value=0xFF),
    st.integers(min_value=0, max_value=0xFFFF),
    st.integers(min_value=0, max_value=0xFFFFFFFF),
    st.floats(allow_nan=False),
    st.text(max_size=200),
    st.binary(max_size=200),
)
def test_round_trip(a, b, c, d, e, f):
    data = wire.Writer().u8(a).u16(b).u32(c).f64(d).text(e).blob(f).done()
    r = wire.Reader(data)
    assert r.u8() == a
    assert r.u16() == b
    assert r.u32() == c
    assert r.f64() == d
    assert r.text() == e
    assert r.blob() == f
    r.expect_end()


@given(st.floats(allow_nan=False), st.floats(allow_nan=False))
def test_point_round_trip(x, y):
    w = wire.Writer()
    wire.pack_point(w, (x, y))
    assert wire.unpack_point(wire.Reader(w.done())) == (x, y)


def test_truncated_input_raises():
    data = wire.Writer().u32(5).done()
    with pytest.raises(wire.MalformedBytes):
        wire.Reader(data[:2]).u32()


def test_truncated_blob_raises():
    data = wire.Writer().blob(b"abcdef").done()
    with pytest.raises(wire.MalformedBytes):
        wire.Reader(data[:-1]).blob()


def test_trailing_bytes_raise():
    data = wire.Writer().u8(1).u8(2).done()
    r = wire.Reader(data)
    r.u8()
    with pytest.raises(wire.MalformedBytes):
        r.expect_end()


def test_bad_utf8_raises():
    data = wire.Writer().u16(2)._raw(b"\xff\xfe").done()
    with pytest.raises(wire.MalformedBytes):
        wire.Reader(data).text()


def test_oversize_text_rejected():
    with pytest.raises(ValueError):
        wire.Writer().text("x" * 70000)
    with pytest.raises(ValueError):
        wire.Writer().blob(b"x" * 70000)


def test_encoding_is_stable():
    one = wire.Writer().text("hello").f64(2.5).done()
    two = wire.Writer().text("hello").f64(2.5).done()
    assert one == two
