from hypothesis import given, strategies as st

from libdebloat.ranges import ByteRange, normalize, subtract, total_length

ranges = st.lists(st.builds(ByteRange, st.integers(0, 200), st.integers(0, 40)), max_size=12)


def points(rs):
    return {i for r in rs for i in range(r.offset, r.end)}


def test_normalize_merges_touching():
    assert normalize([ByteRange(5, 5), ByteRange(0, 5), ByteRange(20, 0)]) == [ByteRange(0, 10)]


def test_subtract_splits():
    assert subtract([ByteRange(0, 10)], [ByteRange(3, 2)]) == [ByteRange(0, 3), ByteRange(5, 5)]


@given(ranges)
def test_normalize_preserves_points(rs):
    out = normalize(rs)
    assert points(out) == points(rs)
    assert all(a.end < b.offset for a, b in zip(out, out[1:]))
    assert total_length(rs) == len(points(rs))


@given(ranges, ranges)
def test_subtract_is_set_difference(a, b):
    assert points(subtract(a, b)) == points(a) - points(b)
