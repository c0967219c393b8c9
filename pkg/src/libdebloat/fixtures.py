"""Deterministic synthetic shared libraries with ground-truth manifests.

A fixture is a genuine ELF64 shared object: file header, one ``PT_LOAD``
segment, a section header table, ``.text`` filled with named functions,
``.nv_fatbin`` in the fixture container layout, optional init/fini arrays
and real ``.symtab``/``.strtab`` tables.  The manifest is computed from the
generator's own bookkeeping, never by parsing the output, so it can serve as
an oracle for the parsers.
"""
from __future__ import annotations

import hashlib
import json
import random
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

from . import elf
from .fatbin import ElementKind, encode_element_header, encode_kernel_table, encode_region_header
from .trace import UsageTrace

VADDR_BIAS = 0x400000
CAPABILITIES = (50, 52, 60, 61, 70, 72, 75, 80, 86, 87, 89, 90)
GAP_FILL = 0xCC

MAX_FUNCTIONS = 64
MAX_REGIONS = 4
MAX_ELEMENTS = 32
MAX_KERNELS = 16


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    size: int


@dataclass(frozen=True)
class ElementSpec:
    kind: str = "cubin"
    compute_capability: int = 75
    kernels: tuple = ()
    code_size: int = 64
    compressed: bool = False


@dataclass
class FixtureSpec:
    seed: int = 0
    functions: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    aliases: dict = field(default_factory=dict)       # alias name -> target function
    init_array: list = field(default_factory=list)
    fini_array: list = field(default_factory=list)
    entry: Optional[str] = None
    function_gap: int = 0
    fatbin_padding: int = 0
    stripped: bool = False
    gpu_section: bool = True

    def __post_init__(self):
        self.functions = [f if isinstance(f, FunctionSpec) else FunctionSpec(*f)
                          for f in self.functions]
        self.regions = [[e if isinstance(e, ElementSpec) else ElementSpec(**e) for e in region]
                        for region in self.regions]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["functions"] = [[f.name, f.size] for f in self.functions]
        for region in d["regions"]:
            for e in region:
                e["kernels"] = list(e["kernels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        d = dict(d)
        d["regions"] = [[{**e, "kernels": tuple(e.get("kernels", ()))} for e in r]
                        for r in d.get("regions", [])]
        return cls(**d)


@dataclass
class GroundTruthManifest:
    file_size: int
    sha256: str
    sections: dict
    functions: list
    regions: list
    metrics: dict
    fatbin_padding: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthManifest":
        return cls(**d)

    def elements(self) -> list:
        return [e for r in self.regions for e in r["elements"]]

    def dumps(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode()


@lru_cache(maxsize=256)
def _cycle(salt: int) -> bytes:
    # 255 distinct non-zero bytes starting at a salt-dependent value
    return bytes((salt + i) % 255 + 1 for i in range(255))


def fill(n: int, salt: int) -> bytes:
    """``n`` deterministic non-zero bytes."""
    if n <= 0:
        return b""
    pattern = _cycle(salt % 255)
    reps, rest = divmod(n, 255)
    return pattern * reps + pattern[:rest]


def _salt(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def validate(spec: FixtureSpec) -> None:
    names = [f.name for f in spec.functions] + list(spec.aliases)
    if len(set(names)) != len(names):
        raise InvalidSpec("function and alias names must be unique")
    if any(not n or "\0" in n for n in names):
        raise InvalidSpec("function names must be non-empty and NUL-free")
    if any(f.size <= 0 for f in spec.functions):
        raise InvalidSpec("function sizes must be positive")
    known = {f.name for f in spec.functions}
    for alias, target in spec.aliases.items():
        if target not in known:
            raise InvalidSpec(f"alias {alias!r} targets unknown function {target!r}")
    for name in [*spec.init_array, *spec.fini_array, *([spec.entry] if spec.entry else [])]:
        if name not in known:
            raise InvalidSpec(f"unknown mandatory function {name!r}")
    if spec.function_gap < 0 or spec.fatbin_padding < 0:
        raise InvalidSpec("padding must be non-negative")
    if spec.regions and not spec.gpu_section:
        raise InvalidSpec("regions given but gpu_section is disabled")
    for region in spec.regions:
        for e in region:
            if e.kind not in ("cubin", "ptx"):
                raise InvalidSpec(f"unknown element kind {e.kind!r}")
            if not 0 <= e.compute_capability < 2**32:
                raise InvalidSpec("compute capability must fit in 32 bits")
            if len(set(e.kernels)) != len(e.kernels) or any(not k for k in e.kernels):
                raise InvalidSpec("kernel names must be unique and non-empty within an element")
            if e.kernels and (e.kind != "cubin" or e.compressed):
                raise InvalidSpec("only uncompressed cubins carry a kernel table")
            if e.code_size < 0:
                raise InvalidSpec("code_size must be non-negative")


def _element_payload(e: ElementSpec, salt: int) -> bytes:
    if e.kind == "ptx":
        text = b"//\n// synthetic ptx\n//\n.version 7.0\n.target sm_%d\n" % e.compute_capability
        return text + fill(e.code_size, salt)
    if e.compressed:
        return fill(max(e.code_size, 8), salt)
    return encode_kernel_table(e.kernels) + fill(e.code_size, salt)


def _align(n: int, a: int) -> int:
    return -n % a


def build_fixture(spec: FixtureSpec) -> tuple[bytes, GroundTruthManifest]:
    """Emit the library bytes for ``spec`` plus the manifest describing them."""
    validate(spec)
    out = bytearray(elf.EHDR.size + 56)
    sections = {}        # name -> (offset, length, vaddr, type, flags, link, info, entsize, align)

    def place(name, body, align, typ, flags=0, link=0, info=0, entsize=0, alloc=False):
        out.extend(bytes(_align(len(out), align)))
        off = len(out)
        out.extend(body)
        sections[name] = [off, len(body), VADDR_BIAS + off if alloc else 0,
                          typ, flags, link, info, entsize, align]
        return off

    # .text
    text = bytearray()
    fn_ranges = {}
    for i, f in enumerate(spec.functions):
        if i and spec.function_gap:
            text.extend(bytes([GAP_FILL]) * spec.function_gap)
        fn_ranges[f.name] = (len(text), f.size)
        text.extend(fill(f.size, _salt(f.name)))
    if not text:
        text = bytearray(b"\xc3")
    text_off = place(".text", text, 16, elf.SHT_PROGBITS,
                     elf.SHF_ALLOC | elf.SHF_EXECINSTR, alloc=True)

    # .nv_fatbin
    regions = []
    if spec.gpu_section:
        body = bytearray()
        index = 0
        layout = []
        for region in spec.regions:
            payloads = []
            for e in region:
                index += 1
                payloads.append((index, e, _element_payload(e, spec.seed * 7919 + index)))
            total = sum(20 + len(p) for _, _, p in payloads)
            rstart = len(body)
            body.extend(encode_region_header(total))
            els = []
            for idx, e, p in payloads:
                hstart = len(body)
                kind = ElementKind.CUBIN if e.kind == "cubin" else ElementKind.PTX
                body.extend(encode_element_header(kind, e.compute_capability, len(p), e.compressed))
                pstart = len(body)
                body.extend(p)
                els.append((idx, e, hstart, pstart, len(p)))
            layout.append((rstart, els))
        body.extend(bytes(spec.fatbin_padding))
        fat_off = place(".nv_fatbin", body, 8, elf.SHT_PROGBITS, elf.SHF_ALLOC, alloc=True)
        for rstart, els in layout:
            regions.append({
                "header": [fat_off + rstart, 16],
                "version": 1,
                "elements": [{
                    "index": idx,
                    "kind": e.kind,
                    "compute_capability": e.compute_capability,
                    "compressed": e.compressed,
                    "header": [fat_off + h, 20],
                    "payload": [fat_off + p, n],
                    "kernels": sorted(e.kernels),
                } for idx, e, h, p, n in els],
            })

    text_va = VADDR_BIAS + text_off
    fn_va = {name: text_va + start for name, (start, _) in fn_ranges.items()}
    for name, target in spec.aliases.items():
        fn_va[name] = fn_va[target]
        fn_ranges[name] = fn_ranges[target]
    if spec.init_array:
        place(".init_array", b"".join(struct.pack("<Q", fn_va[n]) for n in spec.init_array),
              8, elf.SHT_INIT_ARRAY, 0x3, entsize=8, alloc=True)
    if spec.fini_array:
        place(".fini_array", b"".join(struct.pack("<Q", fn_va[n]) for n in spec.fini_array),
              8, elf.SHT_FINI_ARRAY, 0x3, entsize=8, alloc=True)
    load_end = len(out)

    mandatory_va = {fn_va[n] for n in [*spec.init_array, *spec.fini_array]}
    entry = fn_va[spec.entry] if spec.entry else 0
    if entry:
        mandatory_va.add(entry)

    names = ["", ".text"] + ([".nv_fatbin"] if spec.gpu_section else [])
    names += [n for n in (".init_array", ".fini_array") if n in sections]
    if not spec.stripped:
        names += [".symtab", ".strtab"]
    names.append(".shstrtab")
    index_of = {n: i for i, n in enumerate(names)}

    functions = []
    if not spec.stripped:
        strtab = bytearray(b"\0")

        def s(name):
            off = len(strtab)
            strtab.extend(name.encode("utf-8") + b"\0")
            return off

        syms = [elf.SYM.pack(0, 0, 0, 0, 0, 0),
                elf.SYM.pack(s("fixture.c"), 4, 0, 0xFFF1, 0, 0),          # STT_FILE, local
                elf.SYM.pack(0, 3, 0, index_of[".text"], text_va, 0)]      # STT_SECTION
        n_local = len(syms)
        all_fns = [f.name for f in spec.functions] + list(spec.aliases)
        for name in all_fns:
            start, size = fn_ranges[name]
            syms.append(elf.SYM.pack(s(name), 0x12, 0, index_of[".text"], fn_va[name], size))
            va = fn_va[name]
            functions.append({
                "name": name,
                "offset": text_off + start,
                "length": size,
                "mandatory": any(va <= a < va + size for a in mandatory_va),
            })
        if spec.gpu_section:
            syms.append(elf.SYM.pack(s("fatbinData"), 0x11, 0, index_of[".nv_fatbin"],
                                     sections[".nv_fatbin"][2], sections[".nv_fatbin"][1]))
        syms.append(elf.SYM.pack(s("memcpy"), 0x12, 0, 0, 0, 0))            # undefined import
        place(".symtab", b"".join(syms), 8, elf.SHT_SYMTAB, 0, index_of[".strtab"], n_local, 24)
        place(".strtab", strtab, 1, elf.SHT_STRTAB)
        functions.sort(key=lambda f: (f["offset"], f["name"]))

    shstrtab = bytearray(b"\0")
    name_off = {"": 0}
    for n in names[1:]:
        name_off[n] = len(shstrtab)
        shstrtab.extend(n.encode() + b"\0")
    place(".shstrtab", shstrtab, 1, elf.SHT_STRTAB)

    out.extend(bytes(_align(len(out), 8)))
    shoff = len(out)
    out.extend(bytes(elf.SHDR.size))
    for n in names[1:]:
        off, size, addr, typ, flags, link, info, entsize, align = sections[n]
        out.extend(elf.SHDR.pack(name_off[n], typ, flags, addr, off, size, link, info,
                                 align, entsize))

    ident = elf.ELF_MAGIC + bytes([elf.ELFCLASS64, elf.ELFDATA2LSB, 1, 0]) + bytes(8)
    out[0:elf.EHDR.size] = elf.EHDR.pack(ident, 3, 62, 1, entry, elf.EHDR.size, shoff, 0,
                                         elf.EHDR.size, 56, 1, elf.SHDR.size, len(names),
                                         index_of[".shstrtab"])
    out[elf.EHDR.size:elf.EHDR.size + 56] = struct.pack(
        "<IIQQQQQQ", 1, 5, 0, VADDR_BIAS, VADDR_BIAS, load_end, load_end, 0x1000)

    data = bytes(out)
    manifest = GroundTruthManifest(
        file_size=len(data),
        sha256=hashlib.sha256(data).hexdigest(),
        sections={n: {"offset": sections[n][0], "length": sections[n][1],
                      "vaddr": sections[n][2]} for n in names[1:]},
        functions=functions,
        regions=regions,
        metrics={
            "file_size": len(data),
            "cpu_code_size": len(text),
            "gpu_code_size": sections[".nv_fatbin"][1] if spec.gpu_section else 0,
            "function_count": len(functions),
            "element_count": sum(len(r) for r in spec.regions),
        },
        fatbin_padding=spec.fatbin_padding if spec.gpu_section else 0,
    )
    return data, manifest


_WORDS = ("gemm", "conv", "relu", "softmax", "norm", "reduce", "scan", "gather", "scatter",
          "transpose", "pool", "attn", "embed", "dropout", "cast", "copy")


def kernel_pool(rng: random.Random, n: int = 40) -> list:
    pool = []
    while len(pool) < n:
        w = rng.choice(_WORDS)
        style = rng.random()
        if style < 0.5:
            name = f"{w}_kernel_{len(pool)}"
        elif style < 0.9:
            name = f"_Z{len(w) + 3}{w}_{len(pool):02d}PfS_i"
        else:
            name = f"{w}_λ{len(pool)}"
        pool.append(name)
    return pool


def random_spec(seed: int) -> FixtureSpec:
    """Seeded spec within the documented bounds (functions, regions, elements, kernels)."""
    rng = random.Random(seed)
    n_fn = rng.randint(1, MAX_FUNCTIONS)
    functions = [FunctionSpec(f"fn_{i}_{rng.choice(_WORDS)}", rng.randint(1, 256))
                 for i in range(n_fn)]
    names = [f.name for f in functions]
    aliases = {}
    if rng.random() < 0.25:
        for j in range(rng.randint(1, 3)):
            aliases[f"alias_{j}"] = rng.choice(names)
    init = rng.sample(names, rng.randint(0, min(2, n_fn)))
    fini = rng.sample(names, rng.randint(0, 1))
    entry = rng.choice(names) if rng.random() < 0.3 else None

    pool = kernel_pool(rng)
    regions = []
    budget = rng.randint(0, MAX_ELEMENTS)
    for _ in range(rng.randint(1, MAX_REGIONS)):
        count = min(budget, rng.randint(0, 12))
        budget -= count
        region = []
        for _ in range(count):
            r = rng.random()
            cc = rng.choice(CAPABILITIES)
            if r < 0.08:
                region.append(ElementSpec("ptx", cc, (), rng.randint(0, 128)))
            elif r < 0.13:
                region.append(ElementSpec("cubin", cc, (), rng.randint(0, 128), compressed=True))
            else:
                kernels = tuple(rng.sample(pool, rng.randint(0, MAX_KERNELS)))
                region.append(ElementSpec("cubin", cc, kernels, rng.randint(1, 256)))
        regions.append(region)
    return FixtureSpec(
        seed=seed, functions=functions, regions=regions, aliases=aliases, init_array=init,
        fini_array=fini, entry=entry, function_gap=rng.choice([0, 0, 4, 16]),
        fatbin_padding=rng.choice([0, 0, 8, 16]),
    )


def random_trace(spec: FixtureSpec, seed: int, workload_id: Optional[str] = None) -> UsageTrace:
    """A plausible trace for ``spec``: mostly-present target arch, random used subsets."""
    rng = random.Random(seed ^ 0x5EED)
    ccs = sorted({e.compute_capability for r in spec.regions for e in r})
    target = rng.choice(ccs) if ccs and rng.random() < 0.85 else rng.choice(CAPABILITIES)
    kernels = sorted({k for r in spec.regions for e in r for k in e.kernels})
    used_k = set(rng.sample(kernels, rng.randint(0, len(kernels)))) if kernels else set()
    if rng.random() < 0.3:
        used_k.add(f"absent_kernel_{rng.randint(0, 99)}")
    fns = [f.name for f in spec.functions] + list(spec.aliases)
    used_f = set(rng.sample(fns, rng.randint(0, len(fns))))
    if rng.random() < 0.3:
        used_f.add("absent_function")
    return UsageTrace(workload_id or f"workload-{seed}", target, frozenset(used_k),
                      frozenset(used_f))
