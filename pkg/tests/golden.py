"""Reference block graphs for the parity program, and an isomorphism check.

Blocks are named as in a hand-written listing of the same program compiled
for a conventional target: BB0 tests the parity, the odd path runs
BB1 -> BB2 -> BB3 and the even path BB4 -> BB3, where BB3 returns.
"""

import itertools

ODD = {"BB0": {"BB1"}, "BB1": {"BB2"}, "BB2": {"BB3"}, "BB3": set()}
EVEN = {"BB0": {"BB4"}, "BB4": {"BB3"}, "BB3": set()}
MERGED = {"BB0": {"BB1", "BB4"}, "BB1": {"BB2"}, "BB2": {"BB3"}, "BB3": set(), "BB4": {"BB3"}}


def block_graph(traces) -> dict:
    return {b.start: set(b.succ) for b in traces.blocks.values()}


def isomorphic(graph: dict, ref: dict, entry, ref_entry="BB0") -> bool:
    """Brute force over bijections fixing the entry; graphs here are tiny."""
    if len(graph) != len(ref):
        return False
    nodes = sorted(graph)
    names = sorted(ref)
    for perm in itertools.permutations(names):
        m = dict(zip(nodes, perm))
        if m[entry] != ref_entry:
            continue
        if all({m[s] for s in graph[n] if s in m} == ref[m[n]] and graph[n] <= m.keys()
               for n in nodes):
            return True
    return False
