import json
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from libdebloat import fatbin, fixtures, planner
from libdebloat.elf import parse_library
from libdebloat.fixtures import ElementSpec, FunctionSpec
from libdebloat.planner import Mode, RemovalReason
from libdebloat.report import (CorpusReport, EmptyInput, LibraryEntry, LibraryMetrics,
                               NegativeReduction, csv_tables, emit_report, jaccard, measure,
                               pareto, reduction, render_percent, report_from_dict,
                               report_to_dict, similarity_matrix)
from libdebloat.trace import UsageTrace

from conftest import small_spec

MB = 10**6


def test_measure_exact_sizes():
    # ten functions filling exactly 4096 bytes of .text; five elements filling 16384 bytes
    functions = [FunctionSpec(f"f{i}", 409 + (i < 6)) for i in range(10)]
    assert sum(f.size for f in functions) == 4096
    # 16 region header + 5 * (20 header + payload); cubin payload = 16-byte name table + code
    code = (16384 - 16 - 5 * 20 - 5 * 16) // 5
    rest = 16384 - 16 - 5 * (20 + 16 + code)
    regions = [[ElementSpec("cubin", 75, ("k",), code + (rest if i == 0 else 0)) for i in range(5)]]
    spec = small_spec(functions=functions, regions=regions, init_array=[], function_gap=0)
    data, manifest = fixtures.build_fixture(spec)
    image = parse_library(data)
    m = measure(image, fatbin.parse_library_fatbin(image))
    assert (m.cpu_code_size, m.gpu_code_size, m.function_count, m.element_count) == (4096, 16384, 10, 5)
    assert m.file_size == len(data)


def test_measure_without_gpu_section():
    data, _ = fixtures.build_fixture(small_spec(regions=[], gpu_section=False))
    m = measure(parse_library(data), [])
    assert m.gpu_code_size == 0 and m.element_count == 0


def test_measure_after_counts_only_surviving():
    regions = [[ElementSpec("cubin", cc, ("k",)) for cc in (70, 75, 75, 86, 90)]]
    data, manifest = fixtures.build_fixture(small_spec(regions=regions))
    image = parse_library(data)
    regs = fatbin.parse_library_fatbin(image)
    trace = UsageTrace("w", 75, {"k"}, {f["name"] for f in manifest.functions})
    for mode in Mode:
        out = planner.apply_plan(image, planner.plan_library(image, trace, mode, regs))
        after = measure(parse_library(bytes(out)), regs, debloated=True)
        assert after.element_count == 2
        removed = [e for e in manifest.elements() if e["compute_capability"] != 75]
        cut = sum(e["payload"][1] + (e["header"][1] if mode is Mode.WHOLE_ELEMENT else 0)
                  for e in removed)
        assert after.gpu_code_size == manifest.metrics["gpu_code_size"] - cut
        assert after.file_size == len(data) - cut


def test_reduction_examples():
    before = LibraryMetrics(3762 * MB, 557 * MB, 2279 * MB, 616_000, 14_062)
    after = LibraryMetrics(1693 * MB, 178 * MB, 570 * MB, 43_000, 281)
    rep = reduction(before, after)
    assert abs(rep.percent["file_size"] - 55) <= Fraction(1, 2)
    assert render_percent(rep.percent["file_size"], 0) == "55"
    same = reduction(before, before)
    assert all(v == 0 for v in same.percent.values())
    zero = reduction(before, LibraryMetrics(0, 0, 0, 0, 0))
    assert all(v == 100 for v in zero.percent.values())


def test_reduction_zero_before_is_zero():
    z = LibraryMetrics(0, 0, 0, 0, 0)
    assert all(v == 0 for v in reduction(z, z).percent.values())


def test_negative_reduction_flagged():
    with pytest.raises(NegativeReduction):
        reduction(LibraryMetrics(10, 1, 1, 1, 1), LibraryMetrics(11, 1, 1, 1, 1))


@pytest.mark.parametrize("value,digits,text", [
    (Fraction(1, 2), 0, "1"), (Fraction(549, 10), 0, "55"), (Fraction(2, 3), 1, "0.7"),
    (Fraction(100), 1, "100.0"), (Fraction(1, 20), 1, "0.1"),
])
def test_render(value, digits, text):
    assert render_percent(value, digits) == text


def test_jaccard_examples():
    assert jaccard({"x", "y", "z"}, {"y", "z", "w"}) == Fraction(1, 2)
    assert jaccard({"a"}, {"a"}) == 1
    assert jaccard(set(), set()) == 1
    assert jaccard({"a"}, {"b"}) == 0


@given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)))
def test_jaccard_brute_force(a, b):
    universe = a | b
    inter = sum(1 for x in universe if x in a and x in b)
    expected = Fraction(inter, len(universe)) if universe else Fraction(1)
    assert jaccard(a, b) == expected


def test_similarity_identical_and_disjoint():
    t = UsageTrace("a", 75, {"k1"}, {"f1", "f2"})
    m = similarity_matrix([t, UsageTrace("b", 75, t.used_kernels, t.used_functions)])
    assert all(v == 1 for row in m.kernel_similarity + m.function_similarity for v in row)
    u = UsageTrace("c", 75, {"k9"}, {"f1", "f3"})
    m = similarity_matrix([t, u])
    assert m.kernel_similarity[0][1] == 0
    assert m.function_similarity[0][1] > 0


names = st.frozensets(st.sampled_from("abcdefgh"), max_size=6)
trace_lists = st.lists(st.builds(UsageTrace, st.text("xyz", min_size=1, max_size=3),
                                 st.just(75), names, names), min_size=3, max_size=3)


@given(trace_lists, st.randoms())
def test_similarity_properties(traces, rnd):
    m = similarity_matrix(traces)
    for table in (m.kernel_similarity, m.function_similarity):
        for i in range(3):
            assert table[i][i] == 1
            for j in range(3):
                assert table[i][j] == table[j][i] and 0 <= table[i][j] <= 1
    perm = list(range(3))
    rnd.shuffle(perm)
    p = similarity_matrix([traces[i] for i in perm])
    for i in range(3):
        for j in range(3):
            assert p.kernel_similarity[i][j] == m.kernel_similarity[perm[i]][perm[j]]


def test_pareto_uniform():
    for n in (1, 7, 10, 113):
        series = pareto([(f"lib{i}", 5) for i in range(n)])
        assert series.k_for_share(Fraction(9, 10)) == math.ceil(Fraction(9, 10) * n)


def test_pareto_single_and_empty():
    assert pareto([("only", 10)]).k_for_share(Fraction(9, 10)) == 1
    with pytest.raises(EmptyInput):
        pareto([])


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=50))
def test_pareto_monotone(values):
    series = pareto([(f"l{i}", v) for i, v in enumerate(values)])
    c = series.cumulative
    assert all(a <= b for a, b in zip(c, c[1:]))
    assert c[-1] == 100
    assert series.reductions == sorted(values, reverse=True)


def corpus_report():
    libs = []
    plans = []
    traces = []
    for seed in range(4):
        spec = fixtures.random_spec(seed)
        data, _ = fixtures.build_fixture(spec)
        image = parse_library(data)
        regs = fatbin.parse_library_fatbin(image)
        t = fixtures.random_trace(spec, seed)
        plan = planner.plan_library(image, t, Mode.WHOLE_ELEMENT, regs)
        out = planner.apply_plan(image, plan, regs)
        libs.append(LibraryEntry(f"lib{seed}.so", measure(image, regs),
                                 measure(parse_library(bytes(out)), regs, debloated=True)))
        plans.append(plan)
        traces.append(t)
    return CorpusReport(libs, similarity_matrix(traces), planner.classify_removals(plans),
                        {"lib0.so": "00"})


def test_emit_is_deterministic_and_round_trips():
    rep = corpus_report()
    doc = emit_report(rep)
    assert doc == emit_report(corpus_report())
    back = report_from_dict(json.loads(doc))
    assert emit_report(back) == doc
    assert back.reasons.counts == rep.reasons.counts


def test_empty_report_is_valid():
    doc = json.loads(emit_report(CorpusReport()))
    assert doc["libraries"] == [] and doc["reductions"] == [] and doc["pareto"] is None


def test_csv_tables():
    tables = csv_tables(corpus_report())
    assert set(tables) == {"libraries", "reductions", "similarity", "pareto", "removal_reasons"}
    for text in tables.values():
        assert "\r" not in text
        assert text.splitlines()[0]
    assert tables["pareto"].splitlines()[0] == "rank,id,reduction_bytes,cumulative_percent"


def test_element_removal_share_matches_classification():
    spec = fixtures.random_spec(11)
    data, manifest = fixtures.build_fixture(spec)
    image = parse_library(data)
    regs = fatbin.parse_library_fatbin(image)
    t = fixtures.random_trace(spec, 11)
    for mode in Mode:
        plan = planner.plan_library(image, t, mode, regs)
        before = measure(image, regs)
        after = measure(parse_library(bytes(planner.apply_plan(image, plan, regs))), regs,
                        debloated=True)
        red = reduction(before, after)
        if before.element_count:
            total = planner.classify_removals(plan).total
            assert red.percent["element_count"] == Fraction(100 * total, before.element_count)
