"""Reader for 64-bit little-endian ELF shared libraries, and in-place byte-range zeroing.

Only the parts needed for debloating are decoded: the file header, the section
header table, the symbol tables and the few structures that name mandatory
functions (init/fini arrays, ``DT_INIT``/``DT_FINI`` and the entry point).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .ranges import ByteRange, normalize

log = logging.getLogger(__name__)

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1

EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
SHDR = struct.Struct("<IIQQQQIIQQ")
SYM = struct.Struct("<IBBHQQ")
RELA = struct.Struct("<QQq")
DYN = struct.Struct("<qQ")

SHT_NULL = 0
SHT_PROGBITS = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_RELA = 4
SHT_DYNAMIC = 6
SHT_NOBITS = 8
SHT_INIT_ARRAY = 14
SHT_FINI_ARRAY = 15
SHT_PREINIT_ARRAY = 16
SHT_DYNSYM = 11

SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4

SHN_UNDEF = 0
SHN_LORESERVE = 0xFF00
SHN_XINDEX = 0xFFFF

STT_FUNC = 2

DT_NULL = 0
DT_INIT = 12
DT_FINI = 13

R_X86_64_RELATIVE = 8

MANDATORY_NAMES = frozenset({"_init", "_fini"})


class ElfError(Exception):
    """Base class for shared-library parse failures."""


class BadMagic(ElfError):
    pass


class Truncated(ElfError):
    pass


class MalformedSectionTable(ElfError):
    pass


class RangeOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class SectionRecord:
    name: str
    file_range: ByteRange
    virtual_address: int
    flags: int
    type: int = SHT_PROGBITS
    index: int = 0

    def contains_address(self, addr: int) -> bool:
        return self.virtual_address <= addr < self.virtual_address + self.file_range.length


@dataclass(frozen=True)
class FunctionSymbol:
    name: str
    range: ByteRange
    is_mandatory: bool = False


@dataclass(frozen=True)
class LibraryImage:
    source_path: str
    data: bytes = field(repr=False)
    sections: tuple[SectionRecord, ...]
    functions: tuple[FunctionSymbol, ...]
    entry: int = 0
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.data)

    def section(self, name: str) -> Optional[SectionRecord]:
        return find_section(self, name)

    def section_bytes(self, name: str) -> Optional[memoryview]:
        sec = find_section(self, name)
        if sec is None:
            return None
        r = sec.file_range
        return memoryview(self.data)[r.offset:r.end]


@dataclass(frozen=True)
class _RawSection:
    name_off: int
    type: int
    flags: int
    addr: int
    offset: int
    size: int
    link: int
    info: int
    entsize: int

    @property
    def file_size(self) -> int:
        return 0 if self.type == SHT_NOBITS else self.size


def _check_ident(data: bytes) -> None:
    head = bytes(data[:4])
    if not data or ELF_MAGIC[:len(head)] != head:
        if not data:
            raise Truncated("empty input")
        raise BadMagic("not an ELF object (bad magic)")
    if len(data) < EHDR.size:
        raise Truncated(f"file is {len(data)} bytes, ELF header needs {EHDR.size}")
    if data[4] != ELFCLASS64 or data[5] != ELFDATA2LSB:
        raise BadMagic("only 64-bit little-endian ELF objects are supported")


def _cstr(table: bytes, off: int) -> str:
    end = table.find(b"\0", off)
    if end < 0:
        end = len(table)
    return table[off:end].decode("utf-8", "surrogateescape")


def _read_sections(data: bytes) -> tuple[tuple, list[_RawSection], int]:
    hdr = EHDR.unpack_from(data, 0)
    (_, _e_type, _machine, _ver, entry, _phoff, shoff,
     _flags, _ehsize, _phentsize, _phnum, shentsize, shnum, shstrndx) = hdr
    if shoff == 0:
        return hdr, [], 0
    if shentsize != SHDR.size:
        raise MalformedSectionTable(f"unexpected section header size {shentsize}")
    if shoff + SHDR.size > len(data):
        raise Truncated("section header table lies past end of file")
    first = _RawSection(*SHDR.unpack_from(data, shoff)[:8], SHDR.unpack_from(data, shoff)[9])
    if shnum == 0:
        shnum = first.size
    if shstrndx == SHN_XINDEX:
        shstrndx = first.link
    if shoff + shnum * SHDR.size > len(data):
        raise Truncated(f"section header table claims {shnum} entries past end of file")
    raw = []
    for i in range(shnum):
        name, typ, flags, addr, off, size, link, info, _align, entsize = SHDR.unpack_from(
            data, shoff + i * SHDR.size)
        raw.append(_RawSection(name, typ, flags, addr, off, size, link, info, entsize))
    for i, s in enumerate(raw):
        if s.file_size and s.offset + s.file_size > len(data):
            raise Truncated(f"section {i} claims bytes [{s.offset}, {s.offset + s.file_size}) "
                            f"past end of file ({len(data)})")
    live = sorted((s.offset, s.offset + s.file_size, i) for i, s in enumerate(raw)
                  if s.type != SHT_NULL and s.file_size)
    for (a0, a1, ai), (b0, b1, bi) in zip(live, live[1:]):
        if b0 < a1:
            raise MalformedSectionTable(f"sections {ai} and {bi} overlap at offset {b0:#x}")
    if shstrndx >= len(raw):
        raise MalformedSectionTable(f"section name table index {shstrndx} out of range")
    return hdr, raw, shstrndx


def _section_data(data: bytes, s: _RawSection) -> bytes:
    return data[s.offset:s.offset + s.file_size]


def _iter_symbols(data: bytes, raw: list[_RawSection], sym_type: int):
    """Yield ``(name, info, shndx, value, size)`` for every symbol of ``sym_type`` tables."""
    for s in raw:
        if s.type != sym_type or s.link >= len(raw):
            continue
        strtab = _section_data(data, raw[s.link])
        body = _section_data(data, s)
        usable = len(body) - len(body) % SYM.size
        for name_off, info, _other, shndx, value, size in SYM.iter_unpack(body[:usable]):
            yield _cstr(strtab, name_off), info, shndx, value, size


def read_function_names(data: bytes) -> set[str]:
    """Names of all defined function symbols in an ELF object (used for cubins)."""
    _check_ident(data)
    _, raw, _ = _read_sections(data)
    names = set()
    for sym_type in (SHT_SYMTAB, SHT_DYNSYM):
        for name, info, shndx, _value, _size in _iter_symbols(data, raw, sym_type):
            if name and info & 0xF == STT_FUNC and shndx != SHN_UNDEF:
                names.add(name)
    return names


def _mandatory_addresses(data: bytes, raw: list[_RawSection], names: list[str],
                         entry: int) -> set[int]:
    addrs = {entry} if entry else set()
    arrays = [(s.addr, s.addr + s.size) for s, n in zip(raw, names)
              if s.type in (SHT_INIT_ARRAY, SHT_FINI_ARRAY, SHT_PREINIT_ARRAY)
              or n in (".init_array", ".fini_array", ".preinit_array")]
    for s, n in zip(raw, names):
        if (s.type in (SHT_INIT_ARRAY, SHT_FINI_ARRAY, SHT_PREINIT_ARRAY)
                or n in (".init_array", ".fini_array", ".preinit_array")) and s.type != SHT_NOBITS:
            body = _section_data(data, s)
            body = body[:len(body) - len(body) % 8]
            addrs.update(v for (v,) in struct.iter_unpack("<Q", body) if v not in (0, 2**64 - 1))
        elif s.type == SHT_DYNAMIC:
            body = _section_data(data, s)
            for tag, val in DYN.iter_unpack(body[:len(body) - len(body) % DYN.size]):
                if tag == DT_NULL:
                    break
                if tag in (DT_INIT, DT_FINI) and val:
                    addrs.add(val)
        elif s.type == SHT_RELA and arrays:
            # position-independent init arrays are filled in by relative relocations
            body = _section_data(data, s)
            for r_off, r_info, addend in RELA.iter_unpack(body[:len(body) - len(body) % RELA.size]):
                if r_info & 0xFFFFFFFF == R_X86_64_RELATIVE and any(a <= r_off < b for a, b in arrays):
                    addrs.add(addend)
    return addrs


def parse_library(data: bytes, source_path: str = "<memory>") -> LibraryImage:
    """Parse a shared library into sections and ``.text`` function symbols.

    Raises:
        BadMagic: the input is not a 64-bit little-endian ELF object.
        Truncated: a header claims data beyond the end of the input.
        MalformedSectionTable: section headers are inconsistent or overlap.
    """
    return _parse(bytes(data), source_path)


def _parse(data, source_path: str) -> LibraryImage:
    # works on any buffer without copying it; the verifier uses this on a bytearray
    _check_ident(data)
    hdr, raw, shstrndx = _read_sections(data)
    entry = hdr[4]
    warnings: list[str] = []
    shstr = _section_data(data, raw[shstrndx]) if raw else b""
    names = [_cstr(shstr, s.name_off) for s in raw]

    sections = []
    seen = set()
    for i, (s, name) in enumerate(zip(raw, names)):
        if s.type == SHT_NULL and i == 0:
            continue
        if name in seen:
            warnings.append(f"duplicate section name {name!r} (index {i}); first one wins")
        seen.add(name)
        sections.append(SectionRecord(name, ByteRange(s.offset, s.file_size), s.addr,
                                      s.flags, s.type, i))

    text_idx = next((i for i, n in enumerate(names) if n == ".text"), None)
    functions: list[FunctionSymbol] = []
    if text_idx is not None:
        text = raw[text_idx]
        mandatory = _mandatory_addresses(data, raw, names, entry)
        found = {}
        for sym_type in (SHT_SYMTAB, SHT_DYNSYM):
            for name, info, shndx, value, size in _iter_symbols(data, raw, sym_type):
                if info & 0xF != STT_FUNC or shndx != text_idx or not size or not name:
                    continue
                start = text.offset + (value - text.addr)
                if value < text.addr or value + size > text.addr + text.size:
                    warnings.append(f"function {name!r} lies outside .text; ignored")
                    continue
                key = (name, start, size)
                if key in found:
                    continue
                is_mand = name in MANDATORY_NAMES or any(value <= a < value + size for a in mandatory)
                found[key] = FunctionSymbol(name, ByteRange(start, size), is_mand)
        functions = sorted(found.values(), key=lambda f: (f.range.offset, f.name))
        if not functions:
            warnings.append("no function symbols in .text; CPU code debloating will be skipped")
    for w in warnings:
        log.warning("%s: %s", source_path, w)
    return LibraryImage(source_path, data, tuple(sections), tuple(functions), entry,
                        tuple(warnings))


def load_library(path) -> LibraryImage:
    with open(path, "rb") as f:
        return parse_library(f.read(), str(path))


def find_section(image: LibraryImage, name: str) -> Optional[SectionRecord]:
    for sec in image.sections:
        if sec.name == name:
            return sec
    return None


_ZERO_CHUNK = bytes(1 << 20)


def zero_ranges(image: Union[LibraryImage, bytes, bytearray],
                ranges: Iterable[ByteRange]) -> bytearray:
    """Return a copy of the image bytes with every byte inside ``ranges`` set to 0x00.

    The input is never modified and the output has the same length, so every
    file offset keeps its meaning.
    """
    data = image.data if isinstance(image, LibraryImage) else image
    ranges = list(ranges)
    for r in ranges:
        if r.end > len(data):
            raise RangeOutOfBounds(f"range [{r.offset}, {r.end}) exceeds file size {len(data)}")
    out = bytearray(data)
    view = memoryview(out)
    for r in normalize(ranges):
        pos = r.offset
        while pos < r.end:
            n = min(len(_ZERO_CHUNK), r.end - pos)
            view[pos:pos + n] = _ZERO_CHUNK[:n]
            pos += n
    return out
