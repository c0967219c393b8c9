"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage or parse error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, elf, fatbin, fixtures, planner, report, trace

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3

log = logging.getLogger("libdebloat")


class UsageError(Exception):
    pass


def _out(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _emit_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- inspect ---------------------------------------------------------------

def cmd_inspect(args) -> int:
    image = elf.load_library(args.path)
    warnings: list = []
    regions = fatbin.parse_library_fatbin(image, warnings)
    m = report.measure(image, regions)
    elements = list(fatbin.iter_elements(regions))
    if args.json:
        _emit_json({
            "path": str(args.path),
            "metrics": dataclasses.asdict(m),
            "sections": [{"name": s.name, "offset": s.file_range.offset,
                          "length": s.file_range.length, "vaddr": s.virtual_address}
                         for s in image.sections],
            "elements": [{"index": e.index, "kind": e.kind.value,
                          "compute_capability": e.compute_capability,
                          "header": e.header_range.to_list(), "payload": e.payload_range.to_list(),
                          "compressed": e.compressed, "kernels": sorted(e.kernel_names)}
                         for e in elements],
            "warnings": list(image.warnings) + warnings,
        })
        return EXIT_OK
    _out(args, f"{args.path}: {m.file_size} bytes")
    _out(args, f"  CPU code  {m.cpu_code_size:>12} bytes  {m.function_count} functions")
    gpu_share = f"{100 * m.gpu_code_size / m.file_size:.1f}%" if m.file_size else "-"
    _out(args, f"  GPU code  {m.gpu_code_size:>12} bytes  {m.element_count} elements "
               f"({gpu_share} of file)")
    _out(args, "  sections:")
    for s in image.sections:
        _out(args, f"    {s.name:<20} off={s.file_range.offset:#010x} size={s.file_range.length}")
    if elements:
        _out(args, "  elements:")
        for e in elements:
            _out(args, f"    #{e.index:<4} {e.kind.value:<6} sm_{e.compute_capability:<4} "
                       f"payload={e.payload_range.length:<8} kernels={len(e.kernel_names)}"
                       + (" compressed" if e.compressed else ""))
    return EXIT_OK


# -- simulate-trace ----------------------------------------------------------

def cmd_simulate_trace(args) -> int:
    try:
        script = trace.parse_script(Path(args.script).read_bytes())
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"{args.script}: {exc}") from exc
    wid = args.workload_id or Path(args.script).stem
    t = trace.simulate_detection(script, args.target_cc, wid)
    data = trace.serialize_trace(t)
    if args.output:
        _write(args.output, data)
        _out(args, f"wrote {args.output}: {len(t.used_kernels)} kernels, "
                   f"{len(t.used_functions)} functions")
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


# -- debloat -----------------------------------------------------------------

def cmd_debloat(args) -> int:
    if not args.output and not args.dry_run:
        raise UsageError("an output path (-o) is required unless --dry-run is given")
    if args.output and Path(args.output).resolve() == Path(args.library).resolve():
        raise UsageError("refusing to overwrite the input library")
    image = elf.load_library(args.library)
    t = trace.merge_traces([trace.load_trace(p) for p in args.trace])
    if t.is_empty and not args.allow_empty_trace:
        raise UsageError("trace is empty; pass --allow-empty-trace to remove everything")
    regions = fatbin.parse_library_fatbin(image)
    if args.plan:
        plan = planner.load_plan(Path(args.plan).read_bytes())
        planner.check_plan_matches(image, plan)
    else:
        plan = planner.plan_library(image, t, planner.Mode(args.mode), regions)
    if args.plan_out:
        _write(args.plan_out, planner.dump_plan(plan))
    dist = planner.classify_removals(plan)
    summary = {
        "library": str(args.library),
        "mode": plan.mode.value,
        "removed_elements": len(plan.removed_elements),
        "removed_functions": len(plan.removed_functions),
        "reasons": {r.value: n for r, n in sorted(dist.counts.items())},
    }
    if args.dry_run:
        if args.json:
            _emit_json(summary)
        else:
            _out(args, f"plan: {summary['removed_elements']} elements, "
                       f"{summary['removed_functions']} functions to remove")
        return EXIT_OK

    out = planner.apply_plan(image, plan, regions)
    result = planner.verify_debloated(image, out, plan, t, regions)
    target = Path(args.output)
    if not result.passed:
        target = target.with_name(target.name + ".rej")
    _write(target, out)
    before = report.measure(image, regions)
    after = report.measure(dataclasses.replace(image, data=out), regions, debloated=True)
    red = report.reduction(before, after)
    summary.update(output=str(target), verification=result.to_dict(),
                   reduction={k: report.render_percent(v) for k, v in red.percent.items()})
    if args.json:
        _emit_json(summary)
    else:
        _out(args, f"wrote {target}")
        _out(args, f"  removed {summary['removed_elements']} elements "
                   f"{summary['reasons']}, {summary['removed_functions']} functions")
        _out(args, "  reduction: " + ", ".join(f"{k} {v}%" for k, v in
                                              summary["reduction"].items()))
        for c in result.checks:
            mark = "ok  " if c.passed else "FAIL"
            where = f" at offset {c.offset:#x}" if c.offset is not None else ""
            _out(args, f"  [{mark}] {c.name}{(': ' + c.detail) if c.detail else ''}{where}")
    if not result.passed:
        print(f"verification failed; output left at {target}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- report ------------------------------------------------------------------

def _digest(path: Path) -> str:
    return planner.sha256(path.read_bytes())


def build_corpus_report(corpus_path) -> report.CorpusReport:
    """Load a corpus manifest and compute every report table.

    The manifest is JSON: ``{"libraries": [{"id", "before", "after", "plan"?}],
    "traces": [paths]}``; relative paths are resolved against its directory.
    """
    corpus_path = Path(corpus_path)
    try:
        doc = json.loads(corpus_path.read_bytes())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{corpus_path}: {exc}") from exc
    base = corpus_path.parent
    entries = doc.get("libraries") if isinstance(doc, dict) else None
    if not entries:
        raise UsageError("corpus lists no libraries")
    rep = report.CorpusReport()
    plans = []
    for item in entries:
        try:
            lib_id = item.get("id") or Path(item["before"]).name
            before_path = base / item["before"]
        except (AttributeError, KeyError, TypeError) as exc:
            raise UsageError(f"malformed corpus entry {item!r}") from exc
        before = elf.load_library(before_path)
        regions = fatbin.parse_library_fatbin(before)
        entry = report.LibraryEntry(lib_id, report.measure(before, regions),
                                    sha256_before=planner.sha256(before.data))
        rep.inputs[str(item["before"])] = entry.sha256_before
        if item.get("after"):
            after = elf.load_library(base / item["after"])
            if len(after.data) != len(before.data):
                raise UsageError(f"{item['after']}: size differs from {item['before']}")
            entry.after = report.measure(after, regions, debloated=True)
            entry.sha256_after = planner.sha256(after.data)
            rep.inputs[str(item["after"])] = entry.sha256_after
        if item.get("plan"):
            plans.append(planner.load_plan((base / item["plan"]).read_bytes()))
            rep.inputs[str(item["plan"])] = _digest(base / item["plan"])
        rep.libraries.append(entry)
    traces = []
    for p in doc.get("traces", []):
        traces.append(trace.load_trace(base / p))
        rep.inputs[str(p)] = _digest(base / p)
    if len(traces) >= 2:
        rep.similarity = report.similarity_matrix(traces)
    if plans:
        rep.reasons = planner.classify_removals(plans)
    return rep


def cmd_report(args) -> int:
    rep = build_corpus_report(args.corpus)
    data = report.emit_report(rep)
    if args.output:
        _write(args.output, data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    if args.csv:
        for path in report.write_csv(rep, args.csv):
            log.info("wrote %s", path)
    par = rep.pareto()
    if par is not None and args.output:
        _out(args, f"wrote {args.output}: {len(rep.libraries)} libraries, "
                   f"top {par.k_for_share(0.9)} account for 90% of the size reduction")
    return EXIT_OK


# -- gen-fixture -------------------------------------------------------------

def cmd_gen_fixture(args) -> int:
    if args.spec:
        try:
            spec = fixtures.FixtureSpec.from_dict(json.loads(Path(args.spec).read_bytes()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"{args.spec}: {exc}") from exc
    else:
        spec = fixtures.random_spec(args.seed)
    data, manifest = fixtures.build_fixture(spec)
    out = Path(args.output)
    _write(out, data)
    _write(out.with_name(out.name + ".manifest.json"), manifest.dumps())
    if args.trace_out:
        _write(args.trace_out, trace.serialize_trace(fixtures.random_trace(spec, spec.seed)))
    _out(args, f"wrote {out} ({len(data)} bytes, {manifest.metrics['element_count']} elements, "
               f"{manifest.metrics['function_count']} functions)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress informational output")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output")

    p = argparse.ArgumentParser(prog="libdebloat", parents=[common],
                                description="Debloat GPU and CPU code in ML shared libraries.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", parents=[common], help="summarize sections and GPU elements")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("simulate-trace", parents=[common],
                       help="replay a workload script into a usage trace")
    s.add_argument("script")
    s.add_argument("--target-cc", type=int, required=True,
                   help="compute capability of the target GPU, e.g. 75")
    s.add_argument("--workload-id")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_simulate_trace)

    s = sub.add_parser("debloat", parents=[common], help="zero unused code in a library")
    s.add_argument("library")
    s.add_argument("--trace", action="append", required=True,
                   help="usage trace; repeat to debloat for the union of workloads")
    s.add_argument("--mode", choices=[m.value for m in planner.Mode],
                   default=planner.Mode.WHOLE_ELEMENT.value)
    s.add_argument("--plan", help="apply a previously exported plan instead of planning")
    s.add_argument("--plan-out", help="write the retention plan here")
    s.add_argument("--allow-empty-trace", action="store_true")
    s.add_argument("--dry-run", action="store_true", help="plan only, write no library")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_debloat)

    s = sub.add_parser("report", parents=[common], help="bloat metrics for a library corpus")
    s.add_argument("corpus", help="corpus manifest (JSON)")
    s.add_argument("-o", "--output")
    s.add_argument("--csv", metavar="DIR", help="also write one CSV per table")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gen-fixture", parents=[common], help="build a synthetic library")
    s.add_argument("-o", "--output", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="fixture spec (JSON)")
    s.add_argument("--trace-out", help="also write a random trace for the fixture")
    s.set_defaults(func=cmd_gen_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.quiet = getattr(args, "quiet", False)
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, elf.ElfError, fatbin.FatbinError, trace.MalformedTrace,
            trace.MixedTargets, planner.PlanMismatch, fixtures.InvalidSpec,
            report.NegativeReduction, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
