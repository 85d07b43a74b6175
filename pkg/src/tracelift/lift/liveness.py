"""Register liveness over micro-ops and demotion of globals to locals.

Call boundaries follow the ABI: a call reads r0-r3, sp and lr and clobbers
r0-r3, r12, r13, lr and the flags; callee-saved registers survive it. A
return reads r0 and sp. A tail call reads what a return reads plus
whatever its target reads on entry, computed as a least fixpoint over all
functions.
"""

from __future__ import annotations

from dataclasses import replace

from .ir import BINARY_OPS, COND_USES, FLAGS, GLOBALS, LiftedFunction, LiftedProgram, MicroOp

CALL_USES = frozenset({"g_r0", "g_r1", "g_r2", "g_r3", "g_sp", "g_lr"})
CALL_CLOBBERS = frozenset({"g_r0", "g_r1", "g_r2", "g_r3", "g_r12", "g_r13", "g_lr"} | set(FLAGS))
RET_USES = frozenset({"g_r0", "g_sp"})
ALL = frozenset(GLOBALS)

SYS_EFFECTS = {  # number -> (uses, defs)
    1: ({"g_r0"}, set()),
    2: ({"g_r0"}, set()),
    3: (set(), {"g_r0"}),
    4: ({"g_r0", "g_r1"}, {"g_r0"}),
    5: ({"g_r0"}, {"g_r0"}),
}


def uses_defs(op: MicroOp, live_in_of=None) -> tuple[frozenset, frozenset]:
    k = op.op
    if k == "movi":
        return frozenset(), frozenset({op.dst})
    if k == "mov" or k in BINARY_OPS or k == "load":
        return frozenset(op.srcs), frozenset({op.dst})
    if k == "setflags":
        return frozenset(op.srcs), frozenset(FLAGS)
    if k == "select_cond":
        return frozenset(COND_USES[op.cond]), frozenset({op.dst})
    if k in ("condjump", "store", "ijump_dispatch"):
        return frozenset(op.srcs), frozenset()
    if k == "sys":
        u, d = SYS_EFFECTS.get(op.imm, (set(), set()))
        return frozenset(u), frozenset(d)
    if k == "call":
        return CALL_USES, CALL_CLOBBERS
    if k == "icall_dispatch":
        return CALL_USES | frozenset(op.srcs), CALL_CLOBBERS
    if k == "tailcall":
        if live_in_of is None or op.target not in live_in_of:
            return ALL, frozenset()
        return live_in_of[op.target] | RET_USES, frozenset()
    if k == "ret":
        return RET_USES, frozenset()
    if k == "exit":
        return frozenset({"g_r0"}), frozenset()
    return frozenset(), frozenset()  # dirjump, guard, unreachable


def successors(block) -> list[str]:
    out = []
    for op in block.ops:
        if op.op in ("dirjump", "condjump"):
            out.append(op.target)
        elif op.op == "ijump_dispatch":
            out.extend(label for _, label in op.cases)
    return out


def block_liveness(func: LiftedFunction, live_in_of=None) -> tuple[dict, dict]:
    """Live-in and live-out sets per block label (backward fixpoint)."""
    blocks = {b.label: b for b in func.blocks}
    succ = {b.label: [s for s in successors(b) if s in blocks] for b in func.blocks}
    summary = {}
    for b in func.blocks:
        gen, kill = set(), set()
        for op in reversed(b.ops):
            u, d = uses_defs(op, live_in_of)
            gen -= d
            kill |= d
            gen |= u
        summary[b.label] = (frozenset(gen), frozenset(kill))
    live_in = {label: frozenset() for label in blocks}
    live_out = {label: frozenset() for label in blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(func.blocks):
            out = frozenset().union(*(live_in[s] for s in succ[b.label]))
            gen, kill = summary[b.label]
            new_in = gen | (out - kill)
            if out != live_out[b.label] or new_in != live_in[b.label]:
                live_out[b.label], live_in[b.label] = out, new_in
                changed = True
    return live_in, live_out


def function_live_in(lp: LiftedProgram) -> dict:
    """Globals each function may read before writing, across tail calls."""
    live = {f.entry: frozenset() for f in lp.functions}
    changed = True
    while changed:
        changed = False
        for f in lp.functions:
            li, _ = block_liveness(f, live)
            new = li[f.blocks[0].label] & ALL
            if new != live[f.entry]:
                live[f.entry] = new
                changed = True
    return live


def localizable(func: LiftedFunction, live_in_of) -> frozenset:
    """Globals that can safely become function-local variables."""
    live_in, live_out = block_liveness(func, live_in_of)
    referenced = set()
    for b in func.blocks:
        for op in b.ops:
            referenced.update(v for v in (op.dst, *op.srcs) if v in ALL)
            if op.op == "setflags":
                referenced.update(FLAGS)
            elif op.op == "select_cond":
                referenced.update(COND_USES[op.cond])
            elif op.op == "sys":
                u, d = SYS_EFFECTS.get(op.imm, (set(), set()))
                referenced.update(u | d)
            elif op.op == "exit":
                referenced.add("g_r0")
    blocked = set(live_in[func.blocks[0].label])
    for b in func.blocks:
        live = set(live_out[b.label])
        for op in reversed(b.ops):
            u, d = uses_defs(op, live_in_of)
            if op.op in ("ret", "tailcall"):
                blocked |= u
            elif op.op in ("call", "icall_dispatch"):
                blocked |= CALL_USES
                blocked |= CALL_CLOBBERS & live
            live = (live - d) | u
    return frozenset(referenced - blocked)


def localize(func: LiftedFunction, live_in_of=None) -> LiftedFunction:
    return replace(func, localized=localizable(func, live_in_of))


def localize_program(lp: LiftedProgram) -> LiftedProgram:
    live = function_live_in(lp)
    return replace(lp, functions=tuple(localize(f, live) for f in lp.functions))
