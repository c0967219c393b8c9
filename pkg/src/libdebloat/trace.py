"""Usage traces: which kernels and CPU functions a workload touched.

A trace file is a JSON document::

    {
      "target_compute_capability": 75,
      "used_functions": ["at::native::add", ...],
      "used_kernels": ["matmul", ...],
      "workload_id": "mobilenet-train"
    }

The canonical form sorts keys and name arrays, indents by two spaces and is
UTF-8 encoded.  Any hook that intercepts kernel lookups on real hardware only
needs to emit this document.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Union

FIELDS = ("workload_id", "target_compute_capability", "used_kernels", "used_functions")


class MalformedTrace(ValueError):
    pass


class MixedTargets(ValueError):
    pass


@dataclass(frozen=True)
class UsageTrace:
    workload_id: str
    target_compute_capability: int
    used_kernels: frozenset = frozenset()
    used_functions: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "used_kernels", frozenset(self.used_kernels))
        object.__setattr__(self, "used_functions", frozenset(self.used_functions))

    @property
    def is_empty(self) -> bool:
        return not self.used_kernels and not self.used_functions


@dataclass(frozen=True)
class Launch:
    kernel_name: str


@dataclass(frozen=True)
class Call:
    function_name: str


Event = Union[Launch, Call]


def simulate_detection(script: Iterable[Event], target_cc: int,
                       workload_id: str = "simulated") -> UsageTrace:
    """Replay a workload script the way the lookup hook would see it.

    The hook fires once per distinct kernel, so repeated launches collapse to
    one entry; function calls are recorded the same way.
    """
    kernels, functions = set(), set()
    for ev in script:
        if isinstance(ev, Launch):
            kernels.add(ev.kernel_name)
        elif isinstance(ev, Call):
            functions.add(ev.function_name)
        else:
            raise TypeError(f"unknown script event {ev!r}")
    return UsageTrace(workload_id, target_cc, frozenset(kernels), frozenset(functions))


def parse_script(text: Union[str, bytes]) -> list[Event]:
    """Read a workload script: ``{"events": [{"launch": "k"}, {"call": "f"}, ...]}``."""
    doc = json.loads(text)
    events = doc.get("events") if isinstance(doc, dict) else None
    if not isinstance(events, list):
        raise ValueError("workload script needs an 'events' array")
    out: list[Event] = []
    for i, ev in enumerate(events):
        if isinstance(ev, dict) and len(ev) == 1:
            (key, name), = ev.items()
            if key == "launch" and isinstance(name, str):
                out.append(Launch(name))
                continue
            if key == "call" and isinstance(name, str):
                out.append(Call(name))
                continue
        raise ValueError(f"event {i} must be {{'launch': name}} or {{'call': name}}")
    return out


def _no_duplicates(pairs):
    doc = {}
    for k, v in pairs:
        if k in doc:
            raise MalformedTrace(f"duplicate key {k!r}")
        doc[k] = v
    return doc


def _names(doc, key) -> frozenset:
    value = doc[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise MalformedTrace(f"{key} must be an array of strings")
    return frozenset(value)


def trace_from_dict(doc) -> UsageTrace:
    if not isinstance(doc, dict):
        raise MalformedTrace("trace must be a JSON object")
    missing = [f for f in FIELDS if f not in doc]
    if missing:
        raise MalformedTrace(f"missing field(s): {', '.join(missing)}")
    extra = sorted(set(doc) - set(FIELDS))
    if extra:
        raise MalformedTrace(f"unknown field(s): {', '.join(extra)}")
    cc = doc["target_compute_capability"]
    if not isinstance(cc, int) or isinstance(cc, bool) or cc < 0:
        raise MalformedTrace("target_compute_capability must be a non-negative integer")
    if not isinstance(doc["workload_id"], str):
        raise MalformedTrace("workload_id must be a string")
    return UsageTrace(doc["workload_id"], cc, _names(doc, "used_kernels"),
                      _names(doc, "used_functions"))


def trace_to_dict(trace: UsageTrace) -> dict:
    return {
        "target_compute_capability": trace.target_compute_capability,
        "used_functions": sorted(trace.used_functions),
        "used_kernels": sorted(trace.used_kernels),
        "workload_id": trace.workload_id,
    }


def parse_trace(data: Union[str, bytes]) -> UsageTrace:
    try:
        doc = json.loads(data, object_pairs_hook=_no_duplicates)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedTrace(f"not a JSON document: {exc}") from exc
    return trace_from_dict(doc)


def serialize_trace(trace: UsageTrace) -> bytes:
    return (json.dumps(trace_to_dict(trace), indent=2, sort_keys=True, ensure_ascii=False)
            + "\n").encode("utf-8")


def load_trace(path) -> UsageTrace:
    with open(path, "rb") as f:
        return parse_trace(f.read())


def merge_traces(traces: Iterable[UsageTrace]) -> UsageTrace:
    """Union several traces for the same target into one.

    The merged workload id is the sorted, ``+``-joined set of component ids,
    so merging is associative, commutative and idempotent.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("merge_traces needs at least one trace")
    targets = {t.target_compute_capability for t in traces}
    if len(targets) > 1:
        raise MixedTargets(f"traces target different compute capabilities: {sorted(targets)}")
    ids = set()
    for t in traces:
        ids.update(t.workload_id.split("+"))
    return UsageTrace("+".join(sorted(ids)), targets.pop(),
                      frozenset().union(*(t.used_kernels for t in traces)),
                      frozenset().union(*(t.used_functions for t in traces)))
