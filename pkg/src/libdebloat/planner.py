"""Decide which byte ranges of a library survive debloating, apply and verify the result."""
from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from . import elf, fatbin
from .elf import FunctionSymbol, LibraryImage
from .fatbin import ElementKind, FatbinRegion
from .ranges import ByteRange, normalize, subtract
from .trace import UsageTrace


class RemovalReason(str, enum.Enum):
    ARCH_MISMATCH = "arch_mismatch"      # Reason I
    NO_USED_KERNEL = "no_used_kernel"    # Reason II
    UNUSED_FUNCTION = "unused_function"


class Mode(str, enum.Enum):
    WHOLE_ELEMENT = "whole"
    PAYLOAD_ONLY = "payload"


class PlanMismatch(ValueError):
    pass


@dataclass
class RetentionPlan:
    library: str
    mode: Mode = Mode.WHOLE_ELEMENT
    retained_ranges: list = field(default_factory=list)
    removed_elements: list = field(default_factory=list)
    removed_functions: list = field(default_factory=list)
    retained_elements: list = field(default_factory=list)
    target_compute_capability: Optional[int] = None
    workload_id: str = ""
    library_sha256: str = ""

    def reason_of(self, index: int) -> Optional[RemovalReason]:
        for i, reason in self.removed_elements:
            if i == index:
                return reason
        return None


def element_governed_range(el: fatbin.FatbinElement, mode: Mode) -> ByteRange:
    return el.span if mode is Mode.WHOLE_ELEMENT else el.payload_range


def element_decision(el: fatbin.FatbinElement, trace: UsageTrace) -> Optional[RemovalReason]:
    """None if the element is retained, otherwise why it goes."""
    if el.compute_capability != trace.target_compute_capability:
        return RemovalReason.ARCH_MISMATCH
    if el.kind is ElementKind.CUBIN and el.decodable and not el.kernel_names & trace.used_kernels:
        return RemovalReason.NO_USED_KERNEL
    # PTX, compressed and undecodable elements of the right arch cannot be shown unused
    return None


def plan_gpu_retention(regions: Iterable[FatbinRegion], trace: UsageTrace,
                       mode: Mode = Mode.WHOLE_ELEMENT, library: str = "") -> RetentionPlan:
    mode = Mode(mode)
    keep: list[ByteRange] = []
    removed, retained = [], []
    for region in regions:
        keep.append(region.header_range)
        for el in region.elements:
            reason = element_decision(el, trace)
            if reason is None:
                retained.append(el.index)
                keep.append(el.span)
            else:
                removed.append((el.index, reason))
                if mode is Mode.PAYLOAD_ONLY:
                    keep.append(el.header_range)
    return RetentionPlan(library, mode, normalize(keep), removed, [], retained,
                         trace.target_compute_capability, trace.workload_id)


def plan_cpu_retention(functions: Iterable[FunctionSymbol], trace: UsageTrace,
                       text_range: Optional[ByteRange] = None, library: str = "") -> RetentionPlan:
    """Keep used and mandatory functions; everything else in ``.text`` that is a function goes.

    Bytes of ``.text`` not covered by any function symbol are retained.
    Symbols sharing a range are aliases: the range stays if any alias is kept.
    """
    functions = list(functions)
    kept = [f.range for f in functions if f.is_mandatory or f.name in trace.used_functions]
    kept_set = set(kept)
    removed = sorted({f.name for f in functions
                      if not (f.is_mandatory or f.name in trace.used_functions)
                      and f.range not in kept_set})
    keep = list(kept)
    if text_range is not None:
        keep += subtract([text_range], [f.range for f in functions])
    return RetentionPlan(library, Mode.WHOLE_ELEMENT, normalize(keep), [], removed, [],
                         trace.target_compute_capability, trace.workload_id)


def plan_library(image: LibraryImage, trace: UsageTrace, mode: Mode = Mode.WHOLE_ELEMENT,
                 regions: Optional[list] = None) -> RetentionPlan:
    """Full plan for one library: GPU elements plus CPU functions."""
    if regions is None:
        regions = fatbin.parse_library_fatbin(image)
    gpu = plan_gpu_retention(regions, trace, mode, image.source_path)
    text = elf.find_section(image, ".text")
    cpu = plan_cpu_retention(image.functions, trace, text.file_range if text else None)
    return RetentionPlan(
        image.source_path, Mode(mode), normalize(gpu.retained_ranges + cpu.retained_ranges),
        gpu.removed_elements, cpu.removed_functions, gpu.retained_elements,
        trace.target_compute_capability, trace.workload_id, sha256(image.data))


def governed_ranges(image: LibraryImage, regions: list, mode: Mode) -> list[ByteRange]:
    """Spans debloating is allowed to touch: function ranges and element spans."""
    spans = [f.range for f in image.functions]
    spans += [element_governed_range(el, Mode(mode)) for el in fatbin.iter_elements(regions)]
    return normalize(spans)


def removed_ranges(image: LibraryImage, plan: RetentionPlan,
                   regions: Optional[list] = None) -> list[ByteRange]:
    if regions is None:
        regions = fatbin.parse_library_fatbin(image)
    return subtract(governed_ranges(image, regions, plan.mode), plan.retained_ranges)


def check_plan_matches(image: LibraryImage, plan: RetentionPlan) -> None:
    if plan.library_sha256 and plan.library_sha256 != sha256(image.data):
        raise PlanMismatch(f"plan was made for a different file than {image.source_path}")


def apply_plan(image: LibraryImage, plan: RetentionPlan,
               regions: Optional[list] = None) -> bytearray:
    """Zero every governed byte not covered by the plan's retained ranges."""
    check_plan_matches(image, plan)
    return elf.zero_ranges(image, removed_ranges(image, plan, regions))


def sha256(data) -> str:
    return hashlib.sha256(data).hexdigest()


# -- verification ----------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    offset: Optional[int] = None


@dataclass
class VerificationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail,
                            "offset": c.offset} for c in self.checks]}


def _first_diff(a, b, start: int, end: int) -> Optional[int]:
    # a and b are memoryviews, so the slices below never copy
    if a[start:end] == b[start:end]:
        return None
    lo, hi = start, end
    # bisect on slice equality; avoids a per-byte python loop on large spans
    while hi - lo > 64:
        mid = (lo + hi) // 2
        if a[lo:mid] != b[lo:mid]:
            hi = mid
        else:
            lo = mid
    for i in range(lo, hi):
        if a[i] != b[i]:
            return i
    return None


def _first_nonzero(data, r: ByteRange) -> Optional[int]:
    if data.count(0, r.offset, r.end) == r.length:
        return None
    m = fatbin._NONZERO.search(data, r.offset, r.end)
    return m.start() if m else None


def verify_debloated(original: LibraryImage, debloated, plan: RetentionPlan,
                     trace: UsageTrace, regions: Optional[list] = None) -> VerificationReport:
    """Structural checks on a debloated library; failures name the first bad offset."""
    data = debloated if isinstance(debloated, (bytes, bytearray)) else bytes(debloated)
    orig = original.data
    view_o, view_d = memoryview(orig), memoryview(data)
    if regions is None:
        regions = fatbin.parse_library_fatbin(original)
    by_index = fatbin.cubin_index_map(regions)
    zeroed = normalize(removed_ranges(original, plan, regions)
                       + [element_governed_range(by_index[i], plan.mode)
                          for i, _ in plan.removed_elements if i in by_index])
    checks = []

    checks.append(CheckResult("size", len(data) == len(orig),
                              f"{len(orig)} -> {len(data)} bytes"))
    size_ok = checks[0].passed

    bad = None
    if size_ok:
        for r in subtract([ByteRange(0, len(orig))], zeroed):
            bad = _first_diff(view_o, view_d, r.offset, r.end)
            if bad is not None:
                break
    checks.append(CheckResult("retained_intact", size_ok and bad is None,
                              "" if bad is None else "retained byte changed", bad))

    bad = None
    if size_ok:
        for r in zeroed:
            bad = _first_nonzero(data, r)
            if bad is not None:
                break
    checks.append(CheckResult("removed_zero", size_ok and bad is None,
                              "" if bad is None else "removed byte is not zero", bad))

    checks.append(_check_parses(data, original, plan, regions))

    retained = set(by_index) - {i for i, _ in plan.removed_elements}
    should_have = set()
    for el in by_index.values():
        if el.compute_capability == trace.target_compute_capability:
            should_have |= el.kernel_names & trace.used_kernels
    found = set()
    for i in sorted(retained):
        el = by_index.get(i)
        if el is None or not el.kernel_names or el.payload_range.end > len(data):
            continue
        payload = data[el.payload_range.offset:el.payload_range.end]
        found |= fatbin.element_kernel_names(payload) & trace.used_kernels
    missing = sorted(should_have - found)
    offset = None
    if missing:
        offset = min(el.header_range.offset for el in by_index.values()
                     if missing[0] in el.kernel_names
                     and el.compute_capability == trace.target_compute_capability)
    checks.append(CheckResult("used_kernels_decodable", not missing,
                              f"missing kernels: {missing[:5]}" if missing else "", offset))

    bad = None
    bad_name = ""
    for f in original.functions:
        if f.name in trace.used_functions:
            d = _first_diff(view_o, view_d, f.range.offset, f.range.end) if size_ok else f.range.offset
            if d is not None:
                bad, bad_name = d, f.name
                break
    checks.append(CheckResult("used_functions_intact", bad is None,
                              f"function {bad_name!r} changed" if bad is not None else "", bad))
    return VerificationReport(checks)


def _check_parses(data: bytes, original: LibraryImage, plan: RetentionPlan,
                  regions: list) -> CheckResult:
    try:
        image = elf._parse(data, original.source_path)
        sec = elf.find_section(image, ".nv_fatbin")
        if sec is None:
            if regions:
                return CheckResult("parses", False, "GPU section disappeared")
            return CheckResult("parses", True)
        body = memoryview(data)[sec.file_range.offset:sec.file_range.end]
        if plan.mode is Mode.PAYLOAD_ONLY:
            # headers survive, so the full element walk must reproduce the original layout
            again = fatbin.parse_fatbin(body, sec.file_range.offset, warnings=[])
            old = [(e.index, e.kind, e.compute_capability, e.header_range, e.payload_range)
                   for e in fatbin.iter_elements(regions)]
            new = [(e.index, e.kind, e.compute_capability, e.header_range, e.payload_range)
                   for e in fatbin.iter_elements(again)]
            if old != new:
                at = next((o[3].offset for o, n in zip(old, new) if o != n), sec.file_range.offset)
                return CheckResult("parses", False, "element headers changed", at)
        else:
            headers = fatbin.walk_region_headers(body, sec.file_range.offset)
            if headers != [r.header_range for r in regions]:
                return CheckResult("parses", False, "region chain changed", sec.file_range.offset)
            by_index = fatbin.cubin_index_map(regions)
            removed = {i for i, _ in plan.removed_elements}
            for i, el in sorted(by_index.items()):
                if i not in removed and not _header_consistent(data, original.data, el, regions):
                    return CheckResult("parses", False, f"element {i} header damaged",
                                       el.header_range.offset)
    except (elf.ElfError, fatbin.FatbinError) as exc:
        return CheckResult("parses", False, str(exc))
    return CheckResult("parses", True)


def _header_consistent(data: bytes, orig: bytes, el: fatbin.FatbinElement,
                       regions: list) -> bool:
    r = el.header_range
    raw = data[r.offset:r.end]
    layout = next(reg.layout for reg in regions if el in reg.elements)
    if layout != "fixture":
        return raw == orig[r.offset:r.end]
    try:
        kind, cc, length, compressed = fatbin.decode_element_header(raw)
    except (fatbin.FatbinError, ValueError):
        return False
    return (kind, cc, length, compressed) == (el.kind, el.compute_capability,
                                              el.payload_range.length, el.compressed)


# -- removal reasons -------------------------------------------------------

@dataclass
class ReasonDistribution:
    counts: dict
    percentages: dict

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def classify_removals(plans) -> ReasonDistribution:
    """Count removed elements per reason; percentages are exact and sum to 100."""
    if isinstance(plans, RetentionPlan):
        plans = [plans]
    counts = Counter()
    for plan in plans:
        counts.update(RemovalReason(r) for _, r in plan.removed_elements)
    total = sum(counts.values())
    pct = {r: Fraction(100 * n, total) for r, n in counts.items()} if total else {}
    return ReasonDistribution(dict(counts), pct)


# -- plan documents --------------------------------------------------------

def plan_to_dict(plan: RetentionPlan) -> dict:
    return {
        "library": plan.library,
        "library_sha256": plan.library_sha256,
        "mode": plan.mode.value,
        "target_compute_capability": plan.target_compute_capability,
        "workload_id": plan.workload_id,
        "retained_ranges": [r.to_list() for r in plan.retained_ranges],
        "retained_elements": sorted(plan.retained_elements),
        "removed_elements": [{"index": i, "reason": RemovalReason(r).value}
                             for i, r in sorted(plan.removed_elements)],
        "removed_functions": sorted(plan.removed_functions),
    }


def plan_from_dict(doc: dict) -> RetentionPlan:
    try:
        return RetentionPlan(
            library=doc["library"],
            mode=Mode(doc["mode"]),
            retained_ranges=normalize(ByteRange(o, n) for o, n in doc["retained_ranges"]),
            removed_elements=[(int(e["index"]), RemovalReason(e["reason"]))
                              for e in doc["removed_elements"]],
            removed_functions=list(doc["removed_functions"]),
            retained_elements=list(doc.get("retained_elements", [])),
            target_compute_capability=doc.get("target_compute_capability"),
            workload_id=doc.get("workload_id", ""),
            library_sha256=doc.get("library_sha256", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed plan document: {exc}") from exc


def dump_plan(plan: RetentionPlan) -> bytes:
    return (json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n").encode()


def load_plan(data) -> RetentionPlan:
    return plan_from_dict(json.loads(data))
