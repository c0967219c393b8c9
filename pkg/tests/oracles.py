"""Brute-force reference computations built only from fixture manifests.

Nothing here imports the planner, so agreement with it is meaningful.
"""


def element_verdict(el: dict, trace) -> str:
    """'keep', 'arch_mismatch' or 'no_used_kernel' for one manifest element."""
    if el["compute_capability"] != trace.target_compute_capability:
        return "arch_mismatch"
    is_plain_cubin = el["kind"] == "cubin" and not el["compressed"]
    if is_plain_cubin and not any(k in trace.used_kernels for k in el["kernels"]):
        return "no_used_kernel"
    return "keep"


def expected_bytes(data: bytes, manifest, trace, mode: str) -> bytes:
    """Byte-by-byte construction of the debloated file."""
    out = bytearray(data)
    wipe = [False] * len(data)
    for el in manifest.elements():
        if element_verdict(el, trace) != "keep":
            h0, hn = el["header"]
            p0, pn = el["payload"]
            start = h0 if mode == "whole" else p0
            for i in range(start, p0 + pn):
                wipe[i] = True
    kept = [False] * len(data)
    for f in manifest.functions:
        keep = f["mandatory"] or f["name"] in trace.used_functions
        for i in range(f["offset"], f["offset"] + f["length"]):
            if keep:
                kept[i] = True
    for f in manifest.functions:
        for i in range(f["offset"], f["offset"] + f["length"]):
            if not kept[i]:
                wipe[i] = True
    for i, w in enumerate(wipe):
        if w:
            out[i] = 0
    return bytes(out)
