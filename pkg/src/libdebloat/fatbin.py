"""Decoder for the GPU code container stored in a library's ``.nv_fatbin`` section.

The section is a sequence of regions.  Each region is a region header followed
by a contiguous run of elements, and each element is an element header
followed by its payload (a cubin or PTX text).  Element indices run from 1 in
stream order across all regions, which is the numbering the CUDA object-dump
tool uses for the cubin files it extracts.

Two layouts are understood, dispatched on the region magic:

``fixture`` (bit-exact, little-endian; produced by :mod:`libdebloat.fixtures`)
    region header  = magic u32 (``FIXTURE_REGION_MAGIC``), version u32,
                     total_elements_length u64                       (16 bytes)
    element header = magic u32 (``FIXTURE_ELEMENT_MAGIC``), kind u16
                     (1 = cubin, 2 = PTX), flags u16 (bit 0 = compressed),
                     compute_capability u32, payload_length u64      (20 bytes)
    cubin payload  = count u32, then ``count`` names each as u32 length +
                     UTF-8 bytes, zero padded to 8-byte alignment, followed by
                     opaque code bytes up to payload_length.  A payload that
                     starts with the ELF magic is read as a real cubin instead.

``nvidia`` (the layout emitted by the CUDA toolchain, as publicly documented
by reverse-engineering efforts; only fields needed here are decoded)
    region header  = magic u32 (``NVIDIA_REGION_MAGIC``), version u16,
                     header_size u16, elements_length u64
    element header = kind u16 (1 = PTX, 2 = ELF cubin), version u16,
                     header_size u32, payload_size u64, ..., arch u32 at +28,
                     ..., flags u64 at +40 (``0x2000`` = compressed)

Regions with an unrecognized version are kept opaque: their declared length is
skipped and they contribute no elements.
"""
from __future__ import annotations

import enum
import logging
import re
import struct
from dataclasses import dataclass
from typing import Optional

from . import elf
from .ranges import ByteRange

log = logging.getLogger(__name__)

FIXTURE_REGION_MAGIC = 0xFA7B1A5E
FIXTURE_ELEMENT_MAGIC = 0xE1E3E470
FIXTURE_VERSION = 1
FIXTURE_REGION_HEADER = struct.Struct("<IIQ")
FIXTURE_ELEMENT_HEADER = struct.Struct("<IHHIQ")
FLAG_COMPRESSED = 0x1

NVIDIA_REGION_MAGIC = 0xBA55ED50
NVIDIA_REGION_HEADER = struct.Struct("<IHHQ")
NVIDIA_ELEMENT_PREFIX = struct.Struct("<HHIQ")
NVIDIA_MIN_ELEMENT_HEADER = 48
NVIDIA_FLAG_COMPRESSED = 0x2000

_NONZERO = re.compile(rb"[^\x00]")


class FatbinError(Exception):
    """Base class for GPU container decode failures."""


class BadRegionMagic(FatbinError):
    pass


class BadElementMagic(FatbinError):
    pass


class ElementOverrun(FatbinError):
    pass


class ElementKind(enum.Enum):
    CUBIN = "cubin"
    PTX = "ptx"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class FatbinElement:
    index: int
    kind: ElementKind
    compute_capability: int
    header_range: ByteRange
    payload_range: ByteRange
    kernel_names: frozenset = frozenset()
    compressed: bool = False
    decodable: bool = True

    @property
    def span(self) -> ByteRange:
        return ByteRange.span(self.header_range.offset, self.payload_range.end)


@dataclass(frozen=True)
class FatbinRegion:
    header_range: ByteRange
    format_version: int
    elements: tuple[FatbinElement, ...]
    layout: str = "fixture"
    elements_length: int = 0

    @property
    def span(self) -> ByteRange:
        return ByteRange(self.header_range.offset, self.header_range.length + self.elements_length)


def element_kernel_names(payload: bytes, warnings: Optional[list] = None) -> set[str]:
    """Return every kernel entry name found in a cubin payload.

    Real cubins (ELF objects) yield their function symbol names; fixture
    payloads yield their declared name table.  Anything undecodable yields an
    empty set and a warning.
    """
    payload = bytes(payload)
    try:
        if payload[:4] == elf.ELF_MAGIC:
            return elf.read_function_names(payload)
        return _fixture_names(payload)
    except (elf.ElfError, ValueError, struct.error, UnicodeDecodeError) as exc:
        msg = f"undecodable cubin payload: {exc}"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return set()


def _fixture_names(payload: bytes) -> set[str]:
    (count,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    names = set()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise ValueError("kernel name runs past payload end")
        names.add(payload[pos:pos + n].decode("utf-8"))
        pos += n
    return names


def encode_kernel_table(names) -> bytes:
    """Fixture cubin name table: count, length-prefixed names, zero padded to 8 bytes."""
    out = bytearray(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += bytes(-len(out) % 8)
    return bytes(out)


def encode_element_header(kind: ElementKind, compute_capability: int, payload_length: int,
                          compressed: bool = False) -> bytes:
    code = {ElementKind.CUBIN: 1, ElementKind.PTX: 2}[kind]
    return FIXTURE_ELEMENT_HEADER.pack(FIXTURE_ELEMENT_MAGIC, code,
                                       FLAG_COMPRESSED if compressed else 0,
                                       compute_capability, payload_length)


def encode_region_header(elements_length: int, version: int = FIXTURE_VERSION) -> bytes:
    return FIXTURE_REGION_HEADER.pack(FIXTURE_REGION_MAGIC, version, elements_length)


def decode_element_header(header: bytes) -> tuple[ElementKind, int, int, bool]:
    """Decode a fixture element header into (kind, compute capability, payload length, compressed)."""
    magic, kind, flags, cc, length = FIXTURE_ELEMENT_HEADER.unpack_from(header, 0)
    if magic != FIXTURE_ELEMENT_MAGIC:
        raise BadElementMagic(f"bad element magic {magic:#x}")
    kinds = {1: ElementKind.CUBIN, 2: ElementKind.PTX}
    return kinds.get(kind, ElementKind.UNKNOWN), cc, length, bool(flags & FLAG_COMPRESSED)


class _Cursor:
    def __init__(self, data: bytes, base: int, warnings: list):
        self.data = data
        self.base = base
        self.warnings = warnings
        self.index = 0

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def element(self, kind, cc, hdr_at, hdr_len, payload_len, compressed, region_end):
        if hdr_at + hdr_len + payload_len > region_end:
            raise ElementOverrun(
                f"element at {self.base + hdr_at:#x} claims {payload_len} payload bytes "
                f"past region end {self.base + region_end:#x}")
        self.index += 1
        start = hdr_at + hdr_len
        names: frozenset = frozenset()
        decodable = kind is ElementKind.CUBIN and not compressed
        if decodable:
            before = len(self.warnings)
            names = frozenset(element_kernel_names(self.data[start:start + payload_len],
                                                   self.warnings))
            decodable = len(self.warnings) == before
        return FatbinElement(self.index, kind, cc,
                             ByteRange(self.base + hdr_at, hdr_len),
                             ByteRange(self.base + start, payload_len),
                             names, compressed, decodable)


def _fixture_region(cur: _Cursor, pos: int) -> tuple[FatbinRegion, int]:
    data = cur.data
    if pos + FIXTURE_REGION_HEADER.size > len(data):
        raise ElementOverrun(f"region header at {cur.base + pos:#x} is truncated")
    _, version, total = FIXTURE_REGION_HEADER.unpack_from(data, pos)
    body = pos + FIXTURE_REGION_HEADER.size
    end = body + total
    if end > len(data):
        raise ElementOverrun(f"region at {cur.base + pos:#x} claims {total} bytes past section end")
    header = ByteRange(cur.base + pos, FIXTURE_REGION_HEADER.size)
    if version != FIXTURE_VERSION:
        cur.warn(f"region at {cur.base + pos:#x} has unknown version {version}; kept opaque")
        return FatbinRegion(header, version, (), "fixture", total), end
    elements = []
    at = body
    while at < end:
        if at + FIXTURE_ELEMENT_HEADER.size > end:
            raise ElementOverrun(f"element header at {cur.base + at:#x} runs past region end")
        kind, cc, length, compressed = decode_element_header(data[at:at + FIXTURE_ELEMENT_HEADER.size])
        if kind is ElementKind.UNKNOWN:
            cur.warn(f"unknown element kind at {cur.base + at:#x}; kept opaque")
        el = cur.element(kind, cc, at, FIXTURE_ELEMENT_HEADER.size, length, compressed, end)
        elements.append(el)
        at = el.payload_range.end - cur.base
    return FatbinRegion(header, version, tuple(elements), "fixture", total), end


def _nvidia_region(cur: _Cursor, pos: int) -> tuple[FatbinRegion, int]:
    data = cur.data
    if pos + NVIDIA_REGION_HEADER.size > len(data):
        raise ElementOverrun(f"region header at {cur.base + pos:#x} is truncated")
    _, version, hsize, total = NVIDIA_REGION_HEADER.unpack_from(data, pos)
    body = pos + hsize
    end = body + total
    if hsize < NVIDIA_REGION_HEADER.size or end > len(data):
        raise ElementOverrun(f"region at {cur.base + pos:#x} claims {total} bytes past section end")
    header = ByteRange(cur.base + pos, hsize)
    if version != 1:
        cur.warn(f"region at {cur.base + pos:#x} has unknown version {version}; kept opaque")
        return FatbinRegion(header, version, (), "nvidia", total), end
    elements = []
    at = body
    while at < end:
        if at + NVIDIA_MIN_ELEMENT_HEADER > end:
            raise ElementOverrun(f"element header at {cur.base + at:#x} runs past region end")
        code, _ver, ehsize, size = NVIDIA_ELEMENT_PREFIX.unpack_from(data, at)
        if ehsize < NVIDIA_MIN_ELEMENT_HEADER:
            raise ElementOverrun(f"element header at {cur.base + at:#x} declares size {ehsize}")
        (arch,) = struct.unpack_from("<I", data, at + 28)
        (flags,) = struct.unpack_from("<Q", data, at + 40)
        kind = {1: ElementKind.PTX, 2: ElementKind.CUBIN}.get(code, ElementKind.UNKNOWN)
        if kind is ElementKind.UNKNOWN:
            cur.warn(f"unknown element kind {code} at {cur.base + at:#x}; kept opaque")
        el = cur.element(kind, arch, at, ehsize, size, bool(flags & NVIDIA_FLAG_COMPRESSED), end)
        elements.append(el)
        at = el.payload_range.end - cur.base
    return FatbinRegion(header, version, tuple(elements), "nvidia", total), end


_REGION_READERS = {
    FIXTURE_REGION_MAGIC: _fixture_region,
    NVIDIA_REGION_MAGIC: _nvidia_region,
}


def _next_nonzero(data: bytes, pos: int) -> int:
    m = _NONZERO.search(data, pos)
    return m.start() if m else len(data)


def parse_fatbin(section_bytes: bytes, section_base: int = 0,
                 warnings: Optional[list] = None) -> list[FatbinRegion]:
    """Decode a ``.nv_fatbin`` section into regions with absolute file ranges.

    Zero bytes between or after regions are tolerated; gaps that are not
    plain 8-byte alignment are reported through ``warnings``.
    """
    data = memoryview(section_bytes).cast("B")
    cur = _Cursor(data, section_base, warnings if warnings is not None else [])
    regions = []
    pos = 0
    while pos < len(data):
        nxt = _next_nonzero(data, pos)
        if nxt == len(data):
            break
        if nxt != pos:
            if nxt - pos >= 8 or nxt % 8:
                cur.warn(f"unexplained {nxt - pos}-byte zero gap at {section_base + pos:#x}")
            pos = nxt
        if pos + 4 > len(data):
            raise BadRegionMagic(f"trailing garbage at {section_base + pos:#x}")
        (magic,) = struct.unpack_from("<I", data, pos)
        reader = _REGION_READERS.get(magic)
        if reader is None:
            raise BadRegionMagic(f"bad region magic {magic:#010x} at {section_base + pos:#x}")
        region, pos = reader(cur, pos)
        regions.append(region)
    return regions


def walk_region_headers(section_bytes: bytes, section_base: int = 0) -> list[ByteRange]:
    """Follow the region chain using declared lengths only, without decoding elements.

    This still works after whole elements have been zeroed out, as long as the
    region headers survive.
    """
    data = memoryview(section_bytes).cast("B")
    out = []
    pos = 0
    while pos < len(data):
        pos = _next_nonzero(data, pos)
        if pos >= len(data):
            break
        (magic,) = struct.unpack_from("<I", data, pos)
        if magic == FIXTURE_REGION_MAGIC:
            hsize = FIXTURE_REGION_HEADER.size
            _, _, total = FIXTURE_REGION_HEADER.unpack_from(data, pos)
        elif magic == NVIDIA_REGION_MAGIC:
            _, _, hsize, total = NVIDIA_REGION_HEADER.unpack_from(data, pos)
        else:
            raise BadRegionMagic(f"bad region magic {magic:#010x} at {section_base + pos:#x}")
        if pos + hsize + total > len(data):
            raise ElementOverrun(f"region at {section_base + pos:#x} runs past section end")
        out.append(ByteRange(section_base + pos, hsize))
        pos += hsize + total
    return out


def cubin_index_map(regions) -> dict[int, FatbinElement]:
    """Map each 1-based cubin index to its element, in stream order."""
    return {el.index: el for region in regions for el in region.elements}


def iter_elements(regions):
    for region in regions:
        yield from region.elements


def parse_library_fatbin(image: "elf.LibraryImage", warnings: Optional[list] = None,
                         section: str = ".nv_fatbin") -> list[FatbinRegion]:
    sec = elf.find_section(image, section)
    if sec is None:
        return []
    r = sec.file_range
    return parse_fatbin(memoryview(image.data)[r.offset:r.end], r.offset, warnings)
