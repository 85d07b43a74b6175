"""Function recovery: call/resume marking, partitioning and edge promotion.

Blocks are coloured by a traversal from every function entry. A flow edge
that lands on a called block, or that connects two colours, is turned into
a call (a tail call, since its source is not a branch-and-link). Colouring
is then redone until nothing else changes.
"""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, replace

from .cfg import Cfg, Edge, EdgeKind, Provenance, cfg_from_dict, cfg_to_dict
from .isa import WORD, TerminatorKind
from .trace import hexaddr, parse_addr

STRUCTURE_FORMAT = "tracelift-structure"
CALL_KINDS = (TerminatorKind.DirectCall, TerminatorKind.IndirectCall)


@dataclass(frozen=True)
class FunctionPartition:
    func_entries: frozenset
    assignment: dict  # node start -> func id (the entry address)
    promoted: frozenset = frozenset()  # former Flow/Resume edges, now Call
    tail_calls: frozenset = frozenset()  # promoted calls with no resume (all of them)
    continuations: frozenset = frozenset()  # former Resume edges that enter another function
    rounds: tuple = ()  # promotions per round, for inspection

    def members(self, fid: int) -> list[int]:
        return sorted(n for n, f in self.assignment.items() if f == fid)


@dataclass(frozen=True)
class StructuredProgram:
    cfg: Cfg
    partition: FunctionPartition
    never_returns: frozenset = frozenset()
    unresolved_calls: frozenset = frozenset()  # call sites with no known callee

    def callees(self, node: int) -> set[int]:
        """Targets of the calls made by a branch-and-link node."""
        return {e.dst for e in self.cfg.out_edges(node)
                if e.kind is EdgeKind.Call and e not in self.partition.continuations}

    def resume_of(self, node: int) -> int | None:
        for e in self.cfg.out_edges(node):
            if e.kind is EdgeKind.Resume:
                return e.dst
        return None

    def continuation_of(self, node: int) -> int | None:
        for e in self.cfg.out_edges(node):
            if e in self.partition.continuations:
                return e.dst
        return None

    def functions(self) -> dict[int, list[int]]:
        return {f: self.partition.members(f) for f in sorted(self.partition.func_entries)}

    def to_json(self) -> str:
        return dumps_structure(self)


def _key(e: Edge):
    return (e.src, e.dst)


def mark_calls(cfg: Cfg) -> Cfg:
    """Turn branch-and-link out-edges into calls and add resume edges.

    Return edges that land on resume points are dropped: the return is
    implied by the call. A return with any other recorded target keeps all
    its edges as ordinary flow and is handled like an indirect jump.
    """
    resume_points = {n.end + WORD for n in cfg.nodes.values() if n.terminator in CALL_KINDS}
    edges = set()
    out = defaultdict(list)
    for e in cfg.edges:
        out[e.src].append(e)
    for n in cfg.nodes.values():
        mine = out.get(n.start, [])
        if n.terminator in CALL_KINDS:
            edges.update(replace(e, kind=EdgeKind.Call) for e in mine)
            r = cfg.nodes.get(n.end + WORD)
            if r is not None:
                dyn = n.provenance is Provenance.Dynamic and r.provenance is Provenance.Dynamic
                edges.add(Edge(n.start, r.start, EdgeKind.Resume,
                               Provenance.Dynamic if dyn else Provenance.Static))
        elif n.terminator is TerminatorKind.Return and mine and all(e.dst in resume_points for e in mine):
            continue
        else:
            edges.update(mine)
    return cfg.with_edges(edges)


def _assign(cfg: Cfg, kinds: dict, entries: set) -> tuple[dict, set]:
    flow = defaultdict(list)
    for (s, d), k in kinds.items():
        if k in (EdgeKind.Flow, EdgeKind.Resume):
            flow[s].append(d)
    for s in flow:
        flow[s].sort()
    assignment: dict[int, int] = {}
    entries = set(entries)

    def claim(root):
        assignment[root] = root
        work = deque([root])
        while work:
            x = work.popleft()
            for y in flow.get(x, ()):
                if y in entries or y in assignment:
                    continue
                assignment[y] = root
                work.append(y)

    for e in sorted(entries):
        if e not in assignment:
            claim(e)
    for n in sorted(cfg.nodes):
        if n not in assignment:
            entries.add(n)
            claim(n)
    return assignment, entries


def _promote_fixpoint(cfg: Cfg, kinds: dict, base_entries: set, state: dict) -> tuple[dict, set]:
    while True:
        call_targets = {d for (s, d), k in kinds.items() if k is EdgeKind.Call}
        entries = (base_entries | call_targets) & set(cfg.nodes)
        assignment, entries = _assign(cfg, kinds, entries)
        changed = set()
        for (s, d), k in sorted(kinds.items()):
            if k is EdgeKind.Flow:
                if d in call_targets or assignment[s] != assignment[d]:
                    changed.add((s, d))
            elif k is EdgeKind.Resume:
                if assignment[s] != assignment[d]:
                    changed.add((s, d))
                    state["continuations"].add((s, d))
        if not changed:
            return assignment, entries
        for se in changed:
            kinds[se] = EdgeKind.Call
        state["promoted"] |= changed
        state["rounds"].append(frozenset(changed))


def partition_and_promote(cfg: Cfg) -> StructuredProgram:
    """Promote boundary-crossing edges until the colouring is stable.

    Afterwards resume edges of calls that can never return are removed and
    the whole process repeats, since removing them can orphan blocks.
    """
    prov = {_key(e): e.provenance for e in cfg.edges}
    kinds = {_key(e): e.kind for e in cfg.edges}
    base_entries = {cfg.entry} | set(cfg.thread_entries)
    state = {"promoted": set(), "continuations": set(), "rounds": []}
    while True:
        assignment, entries = _promote_fixpoint(cfg, kinds, base_entries, state)
        sp = _build(cfg, kinds, prov, assignment, entries, state, frozenset())
        nr = compute_never_returns(sp)
        dropped = False
        for (s, d), k in list(kinds.items()):
            if k is not EdgeKind.Resume:
                continue
            callees = sp.callees(s)
            if callees and callees <= nr:
                del kinds[(s, d)]
                dropped = True
        if not dropped:
            return replace(sp, never_returns=frozenset(nr))


def _build(cfg, kinds, prov, assignment, entries, state, nr) -> StructuredProgram:
    edges = frozenset(Edge(s, d, k, prov[(s, d)]) for (s, d), k in kinds.items())
    by_pair = {_key(e): e for e in edges}
    promoted = frozenset(by_pair[p] for p in state["promoted"] if p in by_pair)
    cont = frozenset(by_pair[p] for p in state["continuations"] if p in by_pair)
    new_cfg = cfg.with_edges(edges)
    calls_out = defaultdict(set)
    for e in edges:
        if e.kind is EdgeKind.Call:
            calls_out[e.src].add(e.dst)
    unresolved = frozenset(n.start for n in cfg.nodes.values()
                           if n.terminator in CALL_KINDS and not calls_out.get(n.start))
    part = FunctionPartition(
        func_entries=frozenset(entries),
        assignment=dict(assignment),
        promoted=promoted,
        tail_calls=promoted,
        continuations=cont,
        rounds=tuple(frozenset(by_pair[p] for p in r if p in by_pair) for r in state["rounds"]),
    )
    return StructuredProgram(new_cfg, part, frozenset(nr), unresolved)


def compute_never_returns(sp: StructuredProgram) -> frozenset:
    """Functions that cannot reach a return, as a greatest fixpoint.

    Starting from "nothing returns", a function is marked returning once a
    return node is reachable through its own flow and resume edges, where a
    resume edge is usable only if one of the call's callees returns and a
    tail call counts as a return if its target returns.
    """
    part = sp.partition
    returns: set[int] = set()
    changed = True
    while changed:
        changed = False
        for f in sorted(part.func_entries):
            if f not in returns and _can_return(sp, f, returns):
                returns.add(f)
                changed = True
    return frozenset(part.func_entries) - returns


def _can_return(sp: StructuredProgram, f: int, returns: set) -> bool:
    cfg = sp.cfg
    part = sp.partition
    seen = {f}
    work = [f]
    while work:
        x = work.pop()
        node = cfg.nodes[x]
        out = cfg.out_edges(x)
        if node.terminator is TerminatorKind.Return and not any(e.kind is EdgeKind.Flow for e in out):
            return True
        is_call = node.terminator in CALL_KINDS
        callee_returns = any(c in returns for c in sp.callees(x)) if is_call else False
        for e in out:
            if e.kind is EdgeKind.Call:
                if e in part.tail_calls and e.dst in returns:
                    if not is_call or callee_returns:
                        return True
                continue
            if e.kind is EdgeKind.Resume and not callee_returns:
                continue
            if part.assignment.get(e.dst) != f:
                continue
            if e.dst not in seen:
                seen.add(e.dst)
                work.append(e.dst)
    return False


def structure(cfg: Cfg) -> StructuredProgram:
    return partition_and_promote(mark_calls(cfg))


def check_invariants(sp: StructuredProgram) -> list[str]:
    """Violations of the post-promotion properties; empty when sound."""
    problems = []
    part = sp.partition
    call_targets = {e.dst for e in sp.cfg.edges if e.kind is EdgeKind.Call}
    for n in sp.cfg.nodes:
        if n not in part.assignment:
            problems.append(f"node {n:#x} unassigned")
    for e in sp.cfg.edges:
        if e.kind is EdgeKind.Flow:
            if part.assignment[e.src] != part.assignment[e.dst]:
                problems.append(f"flow edge {e.src:#x}->{e.dst:#x} crosses functions")
            if e.dst in call_targets:
                problems.append(f"flow edge {e.src:#x}->{e.dst:#x} targets a called block")
        elif e.kind is EdgeKind.Call and e.dst not in part.func_entries:
            problems.append(f"call edge {e.src:#x}->{e.dst:#x} targets a non-entry")
    return problems


def structure_to_dict(sp: StructuredProgram) -> dict:
    def edge_list(es):
        return [[hexaddr(e.src), hexaddr(e.dst)] for e in sorted(es, key=Edge.sort_key)]

    return {
        "format": STRUCTURE_FORMAT,
        "version": 1,
        "functions": [{"entry": hexaddr(f), "members": [hexaddr(m) for m in ms]}
                      for f, ms in sp.functions().items()],
        "promoted": edge_list(sp.partition.promoted),
        "tail_calls": edge_list(sp.partition.tail_calls),
        "continuations": edge_list(sp.partition.continuations),
        "rounds": [edge_list(r) for r in sp.partition.rounds],
        "never_returns": [hexaddr(f) for f in sorted(sp.never_returns)],
        "unresolved_calls": [hexaddr(a) for a in sorted(sp.unresolved_calls)],
        "cfg": cfg_to_dict(sp.cfg),
    }


def structure_from_dict(d: dict, program) -> StructuredProgram:
    if d.get("format") != STRUCTURE_FORMAT:
        raise ValueError("not a structure file")
    cfg = cfg_from_dict(d["cfg"], program)
    by_pair = {_key(e): e for e in cfg.edges}

    def edges(pairs):
        try:
            return frozenset(by_pair[(parse_addr(a), parse_addr(b))] for a, b in pairs)
        except KeyError as e:
            raise ValueError(f"edge {e} is not in the CFG") from None

    assignment = {}
    for f in d["functions"]:
        fid = parse_addr(f["entry"])
        for m in f["members"]:
            assignment[parse_addr(m)] = fid
    part = FunctionPartition(
        func_entries=frozenset(parse_addr(f["entry"]) for f in d["functions"]),
        assignment=assignment,
        promoted=edges(d["promoted"]),
        tail_calls=edges(d["tail_calls"]),
        continuations=edges(d["continuations"]),
        rounds=tuple(edges(r) for r in d["rounds"]),
    )
    return StructuredProgram(cfg, part, frozenset(parse_addr(a) for a in d["never_returns"]),
                             frozenset(parse_addr(a) for a in d["unresolved_calls"]))


def dumps_structure(sp: StructuredProgram) -> str:
    return json.dumps(structure_to_dict(sp), sort_keys=True, indent=1) + "\n"


def loads_structure(text: str, program) -> StructuredProgram:
    return structure_from_dict(json.loads(text), program)
