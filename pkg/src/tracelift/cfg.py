"""Whole-program CFG from merged traces, plus heuristic-free static expansion.

Expansion starts from every conditional branch whose other side was never
executed and decodes forward following direct control flow only. ``DS1``
stops at calls; ``DS2`` walks into direct callees with a bounded static call
stack so that returns continue at the matching resume point. Static code
that can reach neither an exit nor traced code is pruned again.
"""

from __future__ import annotations

import enum
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .isa import WORD, DecodeError, Program, TerminatorKind, classify_terminator, is_terminator
from .trace import TraceSet, hexaddr, parse_addr

CFG_FORMAT = "tracelift-cfg"
MAX_CALL_DEPTH = 16


class CfgError(ValueError):
    pass


class Provenance(enum.Enum):
    Dynamic = "Dynamic"
    Static = "Static"


class EdgeKind(enum.Enum):
    Flow = "Flow"
    Call = "Call"
    Resume = "Resume"


class ExpansionStrategy(enum.Enum):
    D = "d"
    DS1 = "ds1"
    DS2 = "ds2"


@dataclass(frozen=True)
class Node:
    start: int
    end: int
    terminator: TerminatorKind
    provenance: Provenance = Provenance.Dynamic

    def addresses(self):
        return range(self.start, self.end + WORD, WORD)

    @property
    def size(self) -> int:
        return (self.end - self.start) // WORD + 1


@dataclass(frozen=True, order=True)
class Edge:
    src: int
    dst: int
    kind: EdgeKind = field(default=EdgeKind.Flow, compare=True)
    provenance: Provenance = field(default=Provenance.Dynamic, compare=True)

    def sort_key(self):
        return (self.src, self.dst, self.kind.value, self.provenance.value)


@dataclass(frozen=True)
class GuardSite:
    site: int  # address of the conditional branch
    unexplored_side: str  # "Taken" or "Fallthrough"


@dataclass(frozen=True)
class Cfg:
    nodes: dict
    edges: frozenset
    entry: int
    thread_entries: frozenset = frozenset()
    indirect: dict = field(default_factory=dict)
    text_sha256: str = ""

    def out_edges(self, src: int) -> list[Edge]:
        return list(self._out().get(src, ()))

    def succs(self, src: int) -> set[int]:
        return {e.dst for e in self._out().get(src, ())}

    def _out(self) -> dict:
        cache = self.__dict__.get("_out_cache")
        if cache is None:
            cache = defaultdict(list)
            for e in sorted(self.edges, key=Edge.sort_key):
                cache[e.src].append(e)
            object.__setattr__(self, "_out_cache", cache)
        return cache

    def node_at(self, addr: int) -> Node | None:
        """Node whose bounds contain ``addr``."""
        start = self.instruction_index().get(addr)
        return None if start is None else self.nodes[start]

    def instruction_index(self) -> dict:
        """Instruction address -> start of the node holding it."""
        idx = self.__dict__.get("_addr_index")
        if idx is None:
            idx = {a: n.start for n in self.nodes.values() for a in n.addresses()}
            object.__setattr__(self, "_addr_index", idx)
        return idx

    def node_start_of(self, addr: int) -> int:
        return self.instruction_index()[addr]

    def instruction_addresses(self) -> set[int]:
        return set(self.instruction_index())

    @property
    def guard_sites(self) -> list[GuardSite]:
        out = []
        for n in sorted(self.nodes.values(), key=lambda n: n.start):
            if n.terminator is not TerminatorKind.DirectCondJump:
                continue
            targets = self.__dict__.get("_cond_cache", {}).get(n.start)
            if targets is None or targets[0] == targets[1]:
                continue
            taken, fall = targets
            if taken == fall:
                continue
            present = self.succs(n.start)
            if taken in present and fall not in present:
                out.append(GuardSite(n.end, "Fallthrough"))
            elif fall in present and taken not in present:
                out.append(GuardSite(n.end, "Taken"))
        return out

    def with_cond_targets(self, program: Program) -> "Cfg":
        cache = {}
        for n in self.nodes.values():
            if n.terminator is TerminatorKind.DirectCondJump:
                ins = program.instruction_at(n.end)
                cache[n.start] = (ins.branch_target(n.end), n.end + WORD)
        object.__setattr__(self, "_cond_cache", cache)
        return self

    def with_edges(self, edges) -> "Cfg":
        """Same nodes with a different edge set."""
        new = Cfg(self.nodes, frozenset(edges), self.entry, self.thread_entries,
                  self.indirect, self.text_sha256)
        if "_cond_cache" in self.__dict__:
            object.__setattr__(new, "_cond_cache", self.__dict__["_cond_cache"])
        return new

    def to_json(self) -> str:
        return dumps_cfg(self)

    def to_dot(self) -> str:
        return cfg_to_dot(self)


# ---------------------------------------------------------------- assembly


def _partition(program: Program, covered: dict, leaders: set) -> list[Node]:
    nodes = []
    cur = None
    prev = None
    for a in sorted(covered):
        split = (cur is None or a in leaders or a != prev + WORD
                 or covered[a] is not covered[prev]
                 or is_terminator(program.instruction_at(prev)))
        if split:
            if cur is not None:
                nodes.append(cur)
            cur = [a, a, covered[a]]
        else:
            cur[1] = a
        prev = a
    if cur is not None:
        nodes.append(cur)
    out = []
    for start, end, prov in nodes:
        ins = program.instruction_at(end)
        out.append(Node(start, end, classify_terminator(ins), prov))
    return out


def _assemble(program, covered, term_edges, leaders, entry, thread_entries, indirect, digest) -> Cfg:
    """Build nodes/edges from instruction coverage and terminator edges.

    ``term_edges`` maps a terminator address to {dst: provenance}; fall-through
    edges between adjacent nodes are derived here.
    """
    leaders = set(leaders)
    for dsts in term_edges.values():
        leaders.update(d for d in dsts if d in covered)
    nodes = _partition(program, covered, leaders)
    by_start = {n.start: n for n in nodes}
    edges = set()
    for n in nodes:
        if n.terminator is not TerminatorKind.Fallthrough:
            for dst, prov in term_edges.get(n.end, {}).items():
                if dst in by_start:
                    edges.add(Edge(n.start, dst, EdgeKind.Flow, prov))
        elif n.end + WORD in by_start:
            nxt = by_start[n.end + WORD]
            both_dyn = n.provenance is Provenance.Dynamic and nxt.provenance is Provenance.Dynamic
            edges.add(Edge(n.start, nxt.start, EdgeKind.Flow,
                           Provenance.Dynamic if both_dyn else Provenance.Static))
    cfg = Cfg(nodes=by_start, edges=frozenset(edges), entry=entry,
              thread_entries=frozenset(thread_entries), indirect=dict(indirect),
              text_sha256=digest)
    return cfg.with_cond_targets(program)


def build_cfg(traces: TraceSet, program: Program) -> Cfg:
    """CFG with one Dynamic node per merged trace block."""
    if traces.text_sha256 != program.text_sha256():
        raise CfgError("trace does not belong to this program")
    covered = {}
    term_edges: dict[int, dict] = {}
    for b in traces.blocks.values():
        for a in range(b.start, b.end + WORD, WORD):
            if not program.in_text(a):
                raise CfgError(f"block {b.start:#x} leaves the text segment")
            covered[a] = Provenance.Dynamic
        _check_block(b, program, traces)
        if b.terminator is not TerminatorKind.Fallthrough:
            term_edges[b.end] = {s: Provenance.Dynamic for s in b.succ}
    leaders = set(traces.blocks) | {program.entry} | set(traces.thread_entries)
    leaders &= set(covered)
    return _assemble(program, covered, term_edges, leaders, program.entry,
                     traces.thread_entries, traces.indirect, traces.text_sha256)


def _check_block(b, program: Program, traces: TraceSet) -> None:
    try:
        ins = program.instruction_at(b.end)
    except DecodeError as e:
        raise CfgError(f"block {b.start:#x}: {e}") from None
    kind = classify_terminator(ins)
    if b.terminator is not TerminatorKind.Fallthrough and kind is not b.terminator:
        raise CfgError(f"block {b.start:#x}: recorded {b.terminator.value}, encoded {kind.value}")
    succ = set(b.succ)
    if kind is TerminatorKind.Fallthrough or b.terminator is TerminatorKind.Fallthrough:
        allowed = {b.end + WORD}
    elif kind in (TerminatorKind.DirectJump, TerminatorKind.DirectCall):
        allowed = {ins.branch_target(b.end)}
    elif kind is TerminatorKind.DirectCondJump:
        allowed = {ins.branch_target(b.end), b.end + WORD}
    elif kind is TerminatorKind.SyscallExit:
        allowed = set()
    else:
        allowed = set(traces.indirect.get(b.end, ()))
    if not succ <= allowed:
        bad = ", ".join(hex(s) for s in sorted(succ - allowed))
        raise CfgError(f"block {b.start:#x}: successor {bad} contradicts the instruction encoding")


# ---------------------------------------------------------------- expansion


def _dynamic_parts(cfg: Cfg, program: Program):
    covered = {}
    term_edges: dict[int, dict] = defaultdict(dict)
    for n in cfg.nodes.values():
        if n.provenance is Provenance.Dynamic:
            for a in n.addresses():
                covered[a] = Provenance.Dynamic
    for e in cfg.edges:
        if e.provenance is not Provenance.Dynamic:
            continue
        src = cfg.nodes[e.src]
        if src.terminator is not TerminatorKind.Fallthrough:
            term_edges[src.end][e.dst] = Provenance.Dynamic
    leaders = {d for dsts in term_edges.values() for d in dsts}
    leaders |= {cfg.entry} | set(cfg.thread_entries)
    return covered, term_edges, leaders & set(covered)


def expand(cfg: Cfg, program: Program, strategy: ExpansionStrategy) -> Cfg:
    """Augment the traced CFG with statically recovered direct control flow."""
    strategy = ExpansionStrategy(strategy)
    if strategy is ExpansionStrategy.D:
        return cfg
    dyn_cov, dyn_edges, dyn_leaders = _dynamic_parts(cfg, program)
    base = _assemble(program, dyn_cov, dyn_edges, dyn_leaders, cfg.entry,
                     cfg.thread_entries, cfg.indirect, cfg.text_sha256)

    static_cov: set[int] = set()
    static_edges: dict[int, set] = defaultdict(set)
    summaries: set[tuple[int, int]] = set()  # (call-site, resume)
    work: deque = deque()
    for g in base.guard_sites:
        ins = program.instruction_at(g.site)
        side = ins.branch_target(g.site) if g.unexplored_side == "Taken" else g.site + WORD
        static_edges[g.site].add(side)
        work.append((side, ()))
    follow_calls = strategy is ExpansionStrategy.DS2
    seen = set()
    while work:
        item = work.popleft()
        if item in seen:
            continue
        seen.add(item)
        addr, stack = item
        if addr in dyn_cov:
            if stack:
                resume, site = stack[-1]
                summaries.add((site, resume))
                work.append((resume, stack[:-1]))
            continue
        try:
            ins = program.instruction_at(addr)
        except DecodeError:
            continue  # unexplorable; the path into it is pruned below
        static_cov.add(addr)
        kind = classify_terminator(ins)
        if kind is TerminatorKind.Fallthrough:
            work.append((addr + WORD, stack))
        elif kind is TerminatorKind.DirectJump:
            t = ins.branch_target(addr)
            static_edges[addr].add(t)
            work.append((t, stack))
        elif kind is TerminatorKind.DirectCondJump:
            for t in (ins.branch_target(addr), addr + WORD):
                static_edges[addr].add(t)
                work.append((t, stack))
        elif kind is TerminatorKind.DirectCall and follow_calls:
            t = ins.branch_target(addr)
            static_edges[addr].add(t)
            if len(stack) < MAX_CALL_DEPTH:
                work.append((t, stack + ((addr + WORD, addr),)))
        elif kind is TerminatorKind.Return and stack:
            resume, site = stack[-1]
            static_edges[addr].add(resume)
            summaries.add((site, resume))
            work.append((resume, stack[:-1]))
        # indirect branches, unmatched returns, DS1 calls and exits stop here

    covered = dict(dyn_cov)
    for a in static_cov:
        covered[a] = Provenance.Static
    term_edges = defaultdict(dict)
    for src, dsts in dyn_edges.items():
        term_edges[src].update(dsts)
    for src, dsts in static_edges.items():
        for d in dsts:
            if d in covered:
                term_edges[src].setdefault(d, Provenance.Static)
    provisional = _assemble(program, covered, term_edges, dyn_leaders, cfg.entry,
                            cfg.thread_entries, cfg.indirect, cfg.text_sha256)
    live = _live_nodes(provisional, summaries)

    kept = {a: p for a, p in covered.items()
            if p is Provenance.Dynamic or provisional.node_start_of(a) in live}
    kept_edges = defaultdict(dict)
    for src, dsts in term_edges.items():
        if src not in kept:
            continue
        for d, p in dsts.items():
            if d in kept:
                kept_edges[src][d] = p
    return _assemble(program, kept, kept_edges, dyn_leaders, cfg.entry,
                     cfg.thread_entries, cfg.indirect, cfg.text_sha256)


def _live_nodes(cfg: Cfg, summaries) -> set[int]:
    """Nodes from which traced code or a program exit is reachable."""
    resume_of = defaultdict(set)
    for site, resume in summaries:
        resume_of[site].add(resume)
    preds = defaultdict(set)
    for n in cfg.nodes.values():
        if n.provenance is Provenance.Static and n.terminator is TerminatorKind.DirectCall \
                and n.end in resume_of:
            succ = {cfg.node_start_of(r) for r in resume_of[n.end] if r in cfg.instruction_index()}
        else:
            succ = cfg.succs(n.start)
        for s in succ:
            preds[s].add(n.start)
    live = {n.start for n in cfg.nodes.values()
            if n.provenance is Provenance.Dynamic or n.terminator is TerminatorKind.SyscallExit}
    work = deque(live)
    while work:
        x = work.popleft()
        for p in preds[x]:
            if p not in live:
                live.add(p)
                work.append(p)
    return live


# ---------------------------------------------------------------- export


def cfg_to_dict(cfg: Cfg) -> dict:
    return {
        "format": CFG_FORMAT,
        "version": 1,
        "text_sha256": cfg.text_sha256,
        "entry": hexaddr(cfg.entry),
        "thread_entries": [hexaddr(a) for a in sorted(cfg.thread_entries)],
        "nodes": [{"start": hexaddr(n.start), "end": hexaddr(n.end),
                   "terminator": n.terminator.value, "provenance": n.provenance.value}
                  for n in sorted(cfg.nodes.values(), key=lambda n: n.start)],
        "edges": [{"src": hexaddr(e.src), "dst": hexaddr(e.dst), "kind": e.kind.value,
                   "provenance": e.provenance.value}
                  for e in sorted(cfg.edges, key=Edge.sort_key)],
        "indirect": {hexaddr(k): [hexaddr(x) for x in sorted(v)] for k, v in sorted(cfg.indirect.items())},
        "guard_sites": [{"site": hexaddr(g.site), "unexplored": g.unexplored_side}
                        for g in cfg.guard_sites],
    }


def cfg_from_dict(d: dict, program: Program) -> Cfg:
    if d.get("format") != CFG_FORMAT:
        raise CfgError("not a CFG file")
    if d["text_sha256"] != program.text_sha256():
        raise CfgError("CFG was built for a different binary")
    nodes = {}
    for n in d["nodes"]:
        node = Node(parse_addr(n["start"]), parse_addr(n["end"]),
                    TerminatorKind(n["terminator"]), Provenance(n["provenance"]))
        nodes[node.start] = node
    edges = frozenset(Edge(parse_addr(e["src"]), parse_addr(e["dst"]), EdgeKind(e["kind"]),
                           Provenance(e["provenance"])) for e in d["edges"])
    cfg = Cfg(nodes=nodes, edges=edges, entry=parse_addr(d["entry"]),
              thread_entries=frozenset(parse_addr(a) for a in d["thread_entries"]),
              indirect={parse_addr(k): frozenset(parse_addr(x) for x in v)
                        for k, v in d["indirect"].items()},
              text_sha256=d["text_sha256"])
    return cfg.with_cond_targets(program)


def dumps_cfg(cfg: Cfg) -> str:
    return json.dumps(cfg_to_dict(cfg), sort_keys=True, indent=1) + "\n"


def loads_cfg(text: str, program: Program) -> Cfg:
    return cfg_from_dict(json.loads(text), program)


def cfg_to_dot(cfg: Cfg) -> str:
    lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
    for n in sorted(cfg.nodes.values(), key=lambda n: n.start):
        style = "solid" if n.provenance is Provenance.Dynamic else "dashed"
        lines.append(f'  n{n.start:x} [label="{n.start:#x}..{n.end:#x}\\n{n.terminator.value}", style={style}];')
    styles = {EdgeKind.Flow: "solid", EdgeKind.Call: "dotted", EdgeKind.Resume: "dashed"}
    for e in sorted(cfg.edges, key=Edge.sort_key):
        lines.append(f"  n{e.src:x} -> n{e.dst:x} [style={styles[e.kind]}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
