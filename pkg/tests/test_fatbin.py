import random
import struct

import pytest

from libdebloat import fatbin, fixtures
from libdebloat.elf import find_section, parse_library
from libdebloat.fatbin import (BadRegionMagic, ElementKind, ElementOverrun, cubin_index_map,
                               element_kernel_names, parse_fatbin, parse_library_fatbin)
from libdebloat.fixtures import ElementSpec

from conftest import small_spec


def section_of(data):
    image = parse_library(data)
    sec = find_section(image, ".nv_fatbin")
    return data[sec.file_range.offset:sec.file_range.end], sec.file_range.offset


def test_three_elements(built):
    data, manifest = built
    body, base = section_of(data)
    regions = parse_fatbin(body, base)
    assert len(regions) == 1
    els = regions[0].elements
    assert [e.index for e in els] == [1, 2, 3]
    assert [e.compute_capability for e in els] == [70, 75, 86]
    assert els[1].kernel_names == {"matmul", "matmul_splitk", "relu"}
    want = manifest.regions[0]["elements"]
    for e, m in zip(els, want):
        assert e.header_range.to_list() == m["header"]
        assert e.payload_range.to_list() == m["payload"]


def test_empty_section():
    assert parse_fatbin(b"", 0) == []


def test_corrupted_region_magic(built):
    body, base = section_of(built[0])
    bad = b"\x00\x11\x22\x33" + body[4:]
    with pytest.raises(BadRegionMagic):
        parse_fatbin(bad, base)


def test_element_overrun(built):
    body = bytearray(section_of(built[0])[0])
    # first element's payload_length is the last 8 bytes of its 20-byte header
    struct.pack_into("<Q", body, 16 + 12, 10**6)
    with pytest.raises(ElementOverrun):
        parse_fatbin(bytes(body), 0)


def test_unknown_kind_is_kept_opaque(built):
    body = bytearray(section_of(built[0])[0])
    struct.pack_into("<H", body, 16 + 4, 9)
    warnings = []
    regions = parse_fatbin(bytes(body), 0, warnings)
    el = regions[0].elements[0]
    assert el.kind is ElementKind.UNKNOWN and el.kernel_names == frozenset()
    assert any("unknown element kind" in w for w in warnings)


def test_unknown_region_version_skipped_by_length(built):
    body = bytearray(section_of(built[0])[0])
    struct.pack_into("<I", body, 4, 7)
    warnings = []
    regions = parse_fatbin(bytes(body), 0, warnings)
    assert len(regions) == 1 and regions[0].elements == ()
    assert regions[0].span.length == len(body)


def test_trailing_padding_tolerated():
    data, manifest = fixtures.build_fixture(small_spec(fatbin_padding=24))
    body, base = section_of(data)
    warnings = []
    regions = parse_fatbin(body, base, warnings)
    assert len(list(fatbin.iter_elements(regions))) == 3
    assert warnings == []


def test_gap_between_regions_warns():
    one = fatbin.encode_region_header(0)
    warnings = []
    regions = parse_fatbin(one + bytes(24) + one, 0, warnings)
    assert len(regions) == 2
    assert any("zero gap" in w for w in warnings)


def test_fixture_kernel_table():
    payload = fatbin.encode_kernel_table(["matmul", "relu"]) + b"\x90" * 32
    assert element_kernel_names(payload) == {"matmul", "relu"}
    assert element_kernel_names(fatbin.encode_kernel_table([])) == set()


def test_undecodable_payload_warns():
    warnings = []
    assert element_kernel_names(b"\xff\xff\xff\xff", warnings) == set()
    assert warnings


def test_real_cubin_matches_readelf_golden(data_dir):
    """The cubin was assembled offline by ptxas; the golden listing is readelf -sW output."""
    cubin = (data_dir / "minimal_sm75.cubin").read_bytes()
    golden = set()
    for line in (data_dir / "minimal_sm75.readelf.txt").read_text().splitlines():
        cols = line.split()
        if "FUNC" in cols:
            golden.add(cols[-1])
    assert golden == {"matmul", "relu"}
    assert element_kernel_names(cubin) == golden


def test_real_cubin_inside_fixture_element(data_dir):
    cubin = (data_dir / "minimal_sm75.cubin").read_bytes()
    body = fatbin.encode_region_header(20 + len(cubin))
    body += fatbin.encode_element_header(ElementKind.CUBIN, 75, len(cubin)) + cubin
    (region,) = parse_fatbin(body, 0x1000)
    assert region.elements[0].kernel_names == {"matmul", "relu"}
    assert region.elements[0].payload_range.offset == 0x1000 + 36


def nvidia_element(kind, arch, payload, flags=0, header_size=64):
    hdr = bytearray(header_size)
    struct.pack_into("<HHIQ", hdr, 0, kind, 0x101, header_size, len(payload))
    struct.pack_into("<I", hdr, 28, arch)
    struct.pack_into("<Q", hdr, 40, flags)
    return bytes(hdr) + payload


def test_nvidia_layout(data_dir):
    cubin = (data_dir / "minimal_sm75.cubin").read_bytes()
    els = (nvidia_element(2, 75, cubin) + nvidia_element(1, 75, b".version 7.0\n\0\0\0")
           + nvidia_element(2, 86, b"\x01" * 64, flags=0x2000))
    body = struct.pack("<IHHQ", fatbin.NVIDIA_REGION_MAGIC, 1, 16, len(els)) + els
    (region,) = parse_fatbin(body, 0)
    kinds = [(e.kind, e.compute_capability, e.compressed) for e in region.elements]
    assert kinds == [(ElementKind.CUBIN, 75, False), (ElementKind.PTX, 75, False),
                     (ElementKind.CUBIN, 86, True)]
    assert region.elements[0].kernel_names == {"matmul", "relu"}
    assert region.elements[2].kernel_names == frozenset()
    assert sum(e.span.length for e in region.elements) + 16 == len(body)


def test_index_map_two_regions():
    spec = small_spec(regions=[[ElementSpec(compute_capability=70), ElementSpec()],
                               [ElementSpec(compute_capability=86)]])
    data, _ = fixtures.build_fixture(spec)
    regions = parse_library_fatbin(parse_library(data))
    m = cubin_index_map(regions)
    assert list(m) == [1, 2, 3]
    assert [m[i].compute_capability for i in m] == [70, 75, 86]
    assert cubin_index_map([]) == {}


def test_index_map_follows_stream_order():
    rng = random.Random(7)
    elements = [ElementSpec(compute_capability=cc, kernels=(f"k{cc}",)) for cc in
                (50, 61, 70, 75, 86)]
    rng.shuffle(elements)
    data, manifest = fixtures.build_fixture(small_spec(regions=[elements]))
    m = cubin_index_map(parse_library_fatbin(parse_library(data)))
    assert [m[i].compute_capability for i in sorted(m)] == [e.compute_capability for e in elements]
    assert [m[i].header_range.offset for i in sorted(m)] == [e["header"][0]
                                                            for e in manifest.elements()]


@pytest.mark.parametrize("seed", range(25))
def test_accounting_and_header_consistency(seed):
    spec = fixtures.random_spec(seed)
    data, manifest = fixtures.build_fixture(spec)
    body, base = section_of(data)
    regions = parse_fatbin(body, base)
    accounted = sum(r.header_range.length for r in regions)
    accounted += sum(e.header_range.length + e.payload_range.length
                     for e in fatbin.iter_elements(regions))
    assert accounted + manifest.fatbin_padding == len(body)
    for e in fatbin.iter_elements(regions):
        raw = data[e.header_range.offset:e.header_range.end]
        kind, cc, length, compressed = fatbin.decode_element_header(raw)
        assert (kind, cc, length, compressed) == (e.kind, e.compute_capability,
                                                  e.payload_range.length, e.compressed)
        assert e.payload_range.offset == e.header_range.end


def test_walk_region_headers_survives_zeroed_elements(built):
    body, base = section_of(built[0])
    regions = parse_fatbin(body, base)
    wiped = bytearray(body)
    wiped[16:] = bytes(len(body) - 16)
    assert fatbin.walk_region_headers(bytes(wiped), base) == [r.header_range for r in regions]
