"""Observed execution traces: data model, canonical JSON, and merging."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field

from .isa import WORD, TerminatorKind

TRACE_FORMAT = "tracelift-trace"
TRACE_VERSION = 1


class TraceError(ValueError):
    pass


def hexaddr(a: int) -> str:
    return f"0x{a:08x}"


def parse_addr(s: str) -> int:
    return int(s, 16)


@dataclass(frozen=True)
class BlockRecord:
    start: int
    end: int  # address of the last instruction
    terminator: TerminatorKind
    succ: frozenset = frozenset()

    def __post_init__(self):
        if self.start > self.end or (self.end - self.start) % WORD:
            raise TraceError(f"bad block bounds {self.start:#x}..{self.end:#x}")

    def contains(self, addr: int) -> bool:
        return self.start <= addr <= self.end


@dataclass(frozen=True)
class TraceSet:
    text_sha256: str
    blocks: dict = field(default_factory=dict)  # start -> BlockRecord
    indirect: dict = field(default_factory=dict)  # site -> frozenset of targets
    thread_entries: frozenset = frozenset()
    runs: tuple = ()  # sorted (input_sha256, quantum) pairs

    @property
    def edges(self) -> set:
        return {(b.start, s) for b in self.blocks.values() for s in b.succ}

    def block_containing(self, addr: int) -> BlockRecord | None:
        for b in self.blocks.values():
            if b.contains(addr):
                return b
        return None

    def to_json(self) -> str:
        return dumps_trace(self)


def split_blocks(records) -> dict:
    """Partition possibly overlapping records at every recorded block start.

    Pieces that end before another block's start fall through into it; the
    last piece keeps the original terminator and successors. Records that
    share a start are unioned.
    """
    records = list(records)
    leaders = sorted({r.start for r in records})
    out: dict[int, BlockRecord] = {}

    def add(piece):
        old = out.get(piece.start)
        if old is None:
            out[piece.start] = piece
            return
        if (old.end, old.terminator) != (piece.end, piece.terminator):
            raise TraceError(f"inconsistent bounds for block at {piece.start:#x}")
        out[piece.start] = BlockRecord(old.start, old.end, old.terminator, old.succ | piece.succ)

    for r in records:
        start = r.start
        i = bisect.bisect_right(leaders, start)
        while i < len(leaders) and leaders[i] <= r.end:
            cut = leaders[i]
            add(BlockRecord(start, cut - WORD, TerminatorKind.Fallthrough, frozenset({cut})))
            start = cut
            i += 1
        add(BlockRecord(start, r.end, r.terminator, frozenset(r.succ)))
    return out


def merge(traces) -> TraceSet:
    """Union of blocks, edges, indirect targets and thread entries."""
    traces = list(traces)
    if not traces:
        raise TraceError("nothing to merge")
    digests = {t.text_sha256 for t in traces}
    if len(digests) != 1:
        raise TraceError("traces come from different binaries")
    blocks = split_blocks(b for t in traces for b in t.blocks.values())
    indirect: dict[int, set] = {}
    for t in traces:
        for site, targets in t.indirect.items():
            indirect.setdefault(site, set()).update(targets)
    return TraceSet(
        text_sha256=traces[0].text_sha256,
        blocks=blocks,
        indirect={k: frozenset(v) for k, v in indirect.items()},
        thread_entries=frozenset().union(*(t.thread_entries for t in traces)),
        runs=tuple(sorted(set().union(*(t.runs for t in traces)))),
    )


# ------------------------------------------------------------ serialization


def trace_to_dict(t: TraceSet) -> dict:
    return {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "text_sha256": t.text_sha256,
        "blocks": [
            {"start": hexaddr(b.start), "end": hexaddr(b.end),
             "terminator": b.terminator.value, "succ": [hexaddr(s) for s in sorted(b.succ)]}
            for b in sorted(t.blocks.values(), key=lambda b: b.start)
        ],
        "indirect": {hexaddr(k): [hexaddr(x) for x in sorted(v)] for k, v in t.indirect.items()},
        "thread_entries": [hexaddr(a) for a in sorted(t.thread_entries)],
        "runs": [{"input_sha256": d, "quantum": q} for d, q in t.runs],
    }


def trace_from_dict(d: dict) -> TraceSet:
    try:
        if d.get("format") != TRACE_FORMAT or d.get("version") != TRACE_VERSION:
            raise TraceError("not a trace file")
        blocks = {}
        for b in d["blocks"]:
            rec = BlockRecord(parse_addr(b["start"]), parse_addr(b["end"]),
                              TerminatorKind(b["terminator"]),
                              frozenset(parse_addr(s) for s in b["succ"]))
            if rec.start in blocks:
                raise TraceError(f"duplicate block {b['start']}")
            blocks[rec.start] = rec
        return TraceSet(
            text_sha256=d["text_sha256"],
            blocks=blocks,
            indirect={parse_addr(k): frozenset(parse_addr(x) for x in v)
                      for k, v in d["indirect"].items()},
            thread_entries=frozenset(parse_addr(a) for a in d["thread_entries"]),
            runs=tuple(sorted((r["input_sha256"], int(r["quantum"])) for r in d.get("runs", []))),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, TraceError):
            raise
        raise TraceError(f"malformed trace: {e}") from None


def dumps_trace(t: TraceSet) -> str:
    return json.dumps(trace_to_dict(t), sort_keys=True, indent=1) + "\n"


def loads_trace(text: str, program=None) -> TraceSet:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise TraceError(f"malformed trace: {e}") from None
    t = trace_from_dict(d)
    if program is not None and t.text_sha256 != program.text_sha256():
        raise TraceError("trace was recorded on a different binary")
    return t


def save(t: TraceSet, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_trace(t))


def load(path, program=None) -> TraceSet:
    with open(path) as f:
        return loads_trace(f.read(), program)
