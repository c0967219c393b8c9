"""Bloat metrics: per-library sizes and reductions, similarity, Pareto concentration.

All percentages are exact ``Fraction`` values; rounding happens only when a
value is rendered.  Sizes are bytes; MB (10**6 bytes) appears only in
rendered output.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import __version__, elf, fatbin
from .elf import LibraryImage
from .planner import ReasonDistribution, RemovalReason
from .ranges import ByteRange, normalize

METRICS = ("file_size", "cpu_code_size", "gpu_code_size", "function_count", "element_count")
TABLES = ("libraries", "reductions", "similarity", "pareto", "removal_reasons")
MB = 10**6


class NegativeReduction(ValueError):
    """An "after" metric exceeds its "before" value, which debloating cannot cause."""


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class LibraryMetrics:
    file_size: int
    cpu_code_size: int
    gpu_code_size: int
    function_count: int
    element_count: int


def _all_zero(data: bytes, r: ByteRange) -> bool:
    return data.count(0, r.offset, r.end) == r.length


def measure(image: LibraryImage, regions: Sequence = (), debloated: bool = False) -> LibraryMetrics:
    """Table-style size and count metrics for one library.

    With ``debloated=True`` the image is a compacted copy: functions and
    elements whose spans are entirely zero count as removed, and their bytes
    are subtracted from the code and file sizes.  ``regions`` must then come
    from the original library, since offsets are unchanged but zeroed element
    headers can no longer be parsed.
    """
    text = elf.find_section(image, ".text")
    gpu = elf.find_section(image, ".nv_fatbin")
    cpu_size = text.file_range.length if text else 0
    gpu_size = gpu.file_range.length if gpu else 0
    elements = list(fatbin.iter_elements(regions))
    functions = image.functions
    if not debloated:
        return LibraryMetrics(len(image.data), cpu_size, gpu_size, len(functions), len(elements))

    data = image.data
    gone_fn = [f.range for f in functions if _all_zero(data, f.range)]
    gone_el = []
    kept_el = 0
    for el in elements:
        if el.payload_range.length and _all_zero(data, el.payload_range):
            gone_el.append(el.span if _all_zero(data, el.header_range) else el.payload_range)
        else:
            kept_el += 1
    cpu_cut = sum(r.length for r in normalize(gone_fn))
    gpu_cut = sum(r.length for r in normalize(gone_el))
    return LibraryMetrics(len(data) - cpu_cut - gpu_cut, cpu_size - cpu_cut, gpu_size - gpu_cut,
                          len(functions) - len(gone_fn), kept_el)


@dataclass(frozen=True)
class ReductionReport:
    before: LibraryMetrics
    after: LibraryMetrics
    percent: dict

    def rendered(self, digits: int = 1) -> dict:
        return {k: render_percent(v, digits) for k, v in self.percent.items()}


def reduction_percent(before: int, after: int) -> Fraction:
    if before == 0:
        return Fraction(0)
    return Fraction(100 * (before - after), before)


def reduction(before: LibraryMetrics, after: LibraryMetrics) -> ReductionReport:
    pct = {}
    for name in METRICS:
        b, a = getattr(before, name), getattr(after, name)
        if a > b:
            raise NegativeReduction(f"{name} grew from {b} to {a}")
        pct[name] = reduction_percent(b, a)
    return ReductionReport(before, after, pct)


def render_percent(value: Fraction, digits: int = 1) -> str:
    """Round half up at ``digits`` decimals; ``digits=0`` gives the integer style."""
    q = Decimal(1).scaleb(-digits)
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return str(exact.quantize(q, rounding=ROUND_HALF_UP))


def render_mb(size: int) -> str:
    return f"{size / MB:,.0f}"


def jaccard(a: Iterable, b: Iterable) -> Fraction:
    """|a & b| / |a | b|, with two empty sets counted as identical (1)."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return Fraction(1)
    return Fraction(len(a & b), union)


@dataclass(frozen=True)
class SimilarityMatrix:
    labels: list
    kernel_similarity: list
    function_similarity: list


def similarity_matrix(traces: Sequence) -> SimilarityMatrix:
    traces = list(traces)
    n = len(traces)

    def table(attr):
        sets = [getattr(t, attr) for t in traces]
        return [[jaccard(sets[i], sets[j]) for j in range(n)] for i in range(n)]

    return SimilarityMatrix([t.workload_id for t in traces],
                            table("used_kernels"), table("used_functions"))


@dataclass(frozen=True)
class ParetoSeries:
    order: list          # library ids, largest reduction first
    reductions: list     # bytes, aligned with order
    cumulative: list     # exact cumulative percent after each rank

    def k_for_share(self, share) -> int:
        """Smallest number of top libraries whose cumulative share reaches ``share`` (0-1)."""
        # floats go through their shortest repr so 0.9 means 9/10, not 0.9000000000000000222
        share = Fraction(repr(share)) if isinstance(share, float) else Fraction(share)
        target = share * 100
        if not self.order or sum(self.reductions) == 0:
            return 0
        for k, c in enumerate(self.cumulative, 1):
            if c >= target:
                return k
        return len(self.order)


def pareto(reductions: Iterable[tuple]) -> ParetoSeries:
    items = list(reductions)
    if not items:
        raise EmptyInput("pareto needs at least one library")
    for lib, r in items:
        if r < 0:
            raise ValueError(f"negative reduction for {lib}")
    items.sort(key=lambda x: (-x[1], str(x[0])))
    total = sum(r for _, r in items)
    cumulative, running = [], 0
    for _, r in items:
        running += r
        cumulative.append(Fraction(100 * running, total) if total else Fraction(100))
    return ParetoSeries([lib for lib, _ in items], [r for _, r in items], cumulative)


# -- report documents ------------------------------------------------------

def _pct(value: Fraction) -> dict:
    return {"exact": str(value), "display": render_percent(value)}


def _unpct(doc: dict) -> Fraction:
    return Fraction(doc["exact"])


@dataclass
class LibraryEntry:
    id: str
    before: LibraryMetrics
    after: Optional[LibraryMetrics] = None
    sha256_before: str = ""
    sha256_after: str = ""


@dataclass
class CorpusReport:
    libraries: list = field(default_factory=list)
    similarity: Optional[SimilarityMatrix] = None
    reasons: Optional[ReasonDistribution] = None
    inputs: dict = field(default_factory=dict)

    def reductions(self) -> dict:
        return {e.id: reduction(e.before, e.after) for e in self.libraries if e.after is not None}

    def pareto(self) -> Optional[ParetoSeries]:
        pairs = [(e.id, e.before.file_size - e.after.file_size)
                 for e in self.libraries if e.after is not None]
        return pareto(pairs) if pairs else None


def report_to_dict(rep: CorpusReport) -> dict:
    libs = sorted(rep.libraries, key=lambda e: e.id)
    doc = {
        "tool": {"name": "libdebloat", "version": __version__},
        "inputs": dict(sorted(rep.inputs.items())),
        "libraries": [{"id": e.id, "before": asdict(e.before),
                       "after": asdict(e.after) if e.after else None,
                       "sha256_before": e.sha256_before, "sha256_after": e.sha256_after}
                      for e in libs],
        "reductions": [],
        "similarity": None,
        "pareto": None,
        "removal_reasons": [],
    }
    reds = rep.reductions()
    for lib in sorted(reds):
        doc["reductions"].append({"id": lib, "percent": {k: _pct(v) for k, v in
                                                        sorted(reds[lib].percent.items())}})
    if rep.similarity is not None:
        sim = rep.similarity
        doc["similarity"] = {
            "labels": list(sim.labels),
            "kernels": [[str(v) for v in row] for row in sim.kernel_similarity],
            "functions": [[str(v) for v in row] for row in sim.function_similarity],
        }
    par = rep.pareto()
    if par is not None:
        doc["pareto"] = {
            "k_90": par.k_for_share(Fraction(9, 10)),
            "rows": [{"rank": i + 1, "id": lib, "reduction_bytes": red,
                      "cumulative_percent": _pct(c)}
                     for i, (lib, red, c) in enumerate(zip(par.order, par.reductions,
                                                           par.cumulative))],
        }
    if rep.reasons is not None:
        for reason in sorted(rep.reasons.counts, key=lambda r: RemovalReason(r).value):
            doc["removal_reasons"].append({
                "reason": RemovalReason(reason).value,
                "count": rep.reasons.counts[reason],
                "percent": _pct(rep.reasons.percentages[reason]),
            })
    return doc


def report_from_dict(doc: dict) -> CorpusReport:
    libs = [LibraryEntry(e["id"], LibraryMetrics(**e["before"]),
                         LibraryMetrics(**e["after"]) if e["after"] else None,
                         e.get("sha256_before", ""), e.get("sha256_after", ""))
            for e in doc["libraries"]]
    sim = None
    if doc.get("similarity"):
        s = doc["similarity"]
        sim = SimilarityMatrix(list(s["labels"]),
                               [[Fraction(v) for v in row] for row in s["kernels"]],
                               [[Fraction(v) for v in row] for row in s["functions"]])
    reasons = None
    if doc.get("removal_reasons"):
        counts = {RemovalReason(r["reason"]): r["count"] for r in doc["removal_reasons"]}
        pct = {RemovalReason(r["reason"]): _unpct(r["percent"]) for r in doc["removal_reasons"]}
        reasons = ReasonDistribution(counts, pct)
    return CorpusReport(libs, sim, reasons, dict(doc.get("inputs", {})))


def emit_report(rep: CorpusReport) -> bytes:
    """Canonical JSON: sorted keys, two-space indent, no timestamps."""
    return (json.dumps(report_to_dict(rep), indent=2, sort_keys=True) + "\n").encode("utf-8")


def csv_tables(rep: CorpusReport) -> dict:
    """One CSV text per table, header row first, LF line endings."""
    doc = report_to_dict(rep)
    rows = {t: [] for t in TABLES}
    rows["libraries"].append(["id", "stage", *METRICS])
    for e in doc["libraries"]:
        for stage in ("before", "after"):
            if e[stage]:
                rows["libraries"].append([e["id"], stage, *(e[stage][m] for m in METRICS)])
    rows["reductions"].append(["id", "metric", "reduction_percent"])
    for r in doc["reductions"]:
        for m in METRICS:
            rows["reductions"].append([r["id"], m, r["percent"][m]["display"]])
    rows["similarity"].append(["kind", "row", "col", "value"])
    if doc["similarity"]:
        labels = doc["similarity"]["labels"]
        for kind in ("kernels", "functions"):
            for i, row in enumerate(doc["similarity"][kind]):
                for j, v in enumerate(row):
                    rows["similarity"].append([kind, labels[i], labels[j],
                                               f"{float(Fraction(v)):.4f}"])
    rows["pareto"].append(["rank", "id", "reduction_bytes", "cumulative_percent"])
    if doc["pareto"]:
        for r in doc["pareto"]["rows"]:
            rows["pareto"].append([r["rank"], r["id"], r["reduction_bytes"],
                                   r["cumulative_percent"]["display"]])
    rows["removal_reasons"].append(["reason", "count", "percent"])
    for r in doc["removal_reasons"]:
        rows["removal_reasons"].append([r["reason"], r["count"], r["percent"]["display"]])
    out = {}
    for name, table in rows.items():
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(table)
        out[name] = buf.getvalue()
    return out


def write_csv(rep: CorpusReport, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in csv_tables(rep).items():
        path = directory / f"{name}.csv"
        path.write_bytes(text.encode("utf-8"))
        written.append(path)
    return written
