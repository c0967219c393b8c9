"""File byte ranges and the interval arithmetic used by planning and compaction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True, order=True)
class ByteRange:
    """A half-open span ``[offset, offset + length)`` of file offsets."""

    offset: int
    length: int

    def __post_init__(self):
        if self.offset < 0 or self.length < 0:
            raise ValueError(f"invalid byte range ({self.offset}, {self.length})")

    @property
    def end(self) -> int:
        return self.offset + self.length

    @classmethod
    def span(cls, start: int, end: int) -> "ByteRange":
        return cls(start, end - start)

    def contains(self, other: "ByteRange") -> bool:
        return self.offset <= other.offset and other.end <= self.end

    def overlaps(self, other: "ByteRange") -> bool:
        return self.offset < other.end and other.offset < self.end

    def to_list(self) -> list[int]:
        return [self.offset, self.length]


def normalize(ranges: Iterable[ByteRange]) -> list[ByteRange]:
    """Sort, drop empty ranges and merge overlapping or touching ones."""
    out: list[ByteRange] = []
    for r in sorted(r for r in ranges if r.length):
        if out and r.offset <= out[-1].end:
            last = out[-1]
            if r.end > last.end:
                out[-1] = ByteRange.span(last.offset, r.end)
        else:
            out.append(r)
    return out


def subtract(ranges: Iterable[ByteRange], minus: Iterable[ByteRange]) -> list[ByteRange]:
    """Return the normalized set difference ``ranges - minus``."""
    cut = normalize(minus)
    out: list[ByteRange] = []
    j = 0
    for r in normalize(ranges):
        start = r.offset
        while j < len(cut) and cut[j].end <= start:
            j += 1
        k = j
        while k < len(cut) and cut[k].offset < r.end:
            if cut[k].offset > start:
                out.append(ByteRange.span(start, cut[k].offset))
            start = max(start, cut[k].end)
            k += 1
        if start < r.end:
            out.append(ByteRange.span(start, r.end))
    return out


def total_length(ranges: Iterable[ByteRange]) -> int:
    return sum(r.length for r in normalize(ranges))
