import pytest
from hypothesis import given, settings, strategies as st

from conftest import expanded, merged_trace, program
from tracelift import cfg, corpus, trace, vm
from tracelift.cfg import CfgError, EdgeKind, ExpansionStrategy as S, Provenance
from tracelift.isa import WORD, Op, TerminatorKind, assemble
from tracelift.trace import BlockRecord, TraceSet

INDIRECT = (TerminatorKind.IndirectJump, TerminatorKind.IndirectCall, TerminatorKind.Return)


def replay_transfers(prog, stdin):
    """(terminator address, next pc) pairs seen by single-stepping one thread."""
    mem = bytearray(vm.MEM_SIZE)
    mem[prog.text_base:prog.text_end] = prog.text
    mem[prog.data_base:prog.data_base + len(prog.data)] = prog.data
    st_ = vm.MachineState(mem)
    st_.pc, st_.regs[15], st_.regs[14] = prog.entry, vm.MEM_SIZE, vm.THREAD_EXIT
    tokens = stdin.split()
    seen = set()
    while True:
        pc = st_.pc
        ins = prog.instruction_at(pc)
        if ins.op is Op.SVC:
            if ins.imm == 0:
                return seen
            if ins.imm == 3:
                st_.regs[0] = (int(tokens.pop(0)) if tokens else 0) & vm.MASK
            st_.pc += WORD
            continue
        vm.step(st_, ins)
        if ins.kind is not TerminatorKind.Fallthrough:
            if ins.op is Op.RET and st_.pc == vm.THREAD_EXIT:
                return seen
            seen.add((pc, st_.pc))


def dynamic_transfers(c):
    out = set()
    for e in c.edges:
        n = c.nodes[e.src]
        if e.provenance is Provenance.Dynamic and n.terminator is not TerminatorKind.Fallthrough:
            out.add((n.end, e.dst))
    return out


SINGLE_THREADED = [n for n in corpus.names() if n not in corpus.MULTITHREADED]


@pytest.mark.parametrize("name", SINGLE_THREADED)
def test_dynamic_edges_replay(name):
    p = program(name)
    expect = set().union(*(replay_transfers(p, i) for i in corpus.inputs(name)))
    c = cfg.build_cfg(merged_trace(name), p)
    assert dynamic_transfers(c) == expect


def test_parity_cfg_shape():
    c = cfg.build_cfg(merged_trace("evenodd"), program("evenodd"))
    assert len(c.nodes) == 5
    assert len(c.succs(c.entry)) == 2
    assert all(n.provenance is Provenance.Dynamic for n in c.nodes.values())
    assert c.guard_sites == []


def test_single_block_program():
    p = assemble(".entry m\nm:\n MOVI r0, 0\n SVC 0\n")
    c = cfg.build_cfg(vm.run(p, tracing=True).traces, p)
    assert len(c.nodes) == 1 and not c.edges


def test_contradicting_successor_is_rejected():
    p = program("evenodd")
    t = merged_trace("evenodd")
    blocks = dict(t.blocks)
    b = blocks[p.entry]
    blocks[p.entry] = BlockRecord(b.start, b.end, b.terminator, b.succ | {0x1030})
    with pytest.raises(CfgError):
        cfg.build_cfg(TraceSet(t.text_sha256, blocks, t.indirect, t.thread_entries), p)


def one_parity(stdin):
    p = program("evenodd")
    return p, cfg.build_cfg(vm.run(p, stdin, tracing=True).traces, p)


def test_ds1_recovers_other_parity():
    p, c = one_parity(b"3")
    assert [g.unexplored_side for g in c.guard_sites] == ["Fallthrough"]
    e = cfg.expand(c, p, S.DS1)
    assert e.guard_sites == []
    both = cfg.build_cfg(merged_trace("evenodd"), p)
    assert e.instruction_addresses() == both.instruction_addresses()
    static = [n for n in e.nodes.values() if n.provenance is Provenance.Static]
    assert [(n.start, n.end) for n in static] == [(0x1018, 0x1020)]


def test_ds1_stops_at_call_ds2_follows_it():
    p = program("evenodd_call")
    c = cfg.build_cfg(merged_trace("evenodd_call"), p)
    assert len(c.guard_sites) == 1
    ds1 = cfg.expand(c, p, S.DS1)
    assert ds1.nodes == c.nodes and len(ds1.guard_sites) == 1
    ds2 = cfg.expand(c, p, S.DS2)
    assert ds2.guard_sites == []
    added = {n.start for n in ds2.nodes.values() if n.provenance is Provenance.Static}
    bl_nodes = [n for n in ds2.nodes.values() if n.start in added and n.terminator is TerminatorKind.DirectCall]
    assert len(bl_nodes) == 1
    bl = bl_nodes[0]
    callee = p.instruction_at(bl.end).branch_target(bl.end)
    assert callee in ds2.succs(bl.start)
    assert bl.end + WORD in ds2.nodes  # the resume block


def test_noreturn_path_kept_because_it_exits():
    p = program("noreturn")
    c = cfg.build_cfg(vm.run(p, b"5", tracing=True).traces, p)
    e = cfg.expand(c, p, S.DS2)
    exits = [n for n in e.nodes.values()
             if n.provenance is Provenance.Static and n.terminator is TerminatorKind.SyscallExit]
    assert exits


def test_d_is_identity(corpus_name):
    c = cfg.build_cfg(merged_trace(corpus_name), program(corpus_name))
    assert cfg.expand(c, program(corpus_name), S.D) is c


def reach_graph(c):
    g = {n: set(c.succs(n)) for n in c.nodes}
    for n in c.nodes.values():
        if n.terminator in (TerminatorKind.DirectCall, TerminatorKind.IndirectCall) and n.end + WORD in c.nodes:
            g[n.start].add(n.end + WORD)
    return g


def check_expansion(c, p):
    """Structural properties every expansion must satisfy."""
    prev = None
    for s in S:
        e = cfg.expand(c, p, s)
        assert cfg.expand(e, p, s) == e  # idempotence
        assert dynamic_transfers(e) == dynamic_transfers(c)
        dyn = {a for n in e.nodes.values() if n.provenance is Provenance.Dynamic for a in n.addresses()}
        assert dyn == c.instruction_addresses()
        if prev is not None:
            assert prev.instruction_addresses() <= e.instruction_addresses()
        # indirect sites only reach recorded targets; a statically walked RET
        # may also continue at the resume point of a matched call
        resumes = {n.end + WORD for n in e.nodes.values()
                   if n.terminator in (TerminatorKind.DirectCall, TerminatorKind.IndirectCall)}
        for n in e.nodes.values():
            if n.terminator in INDIRECT:
                allowed = set(c.indirect.get(n.end, ()))
                if n.terminator is TerminatorKind.Return and n.provenance is Provenance.Static:
                    allowed |= resumes
                assert e.succs(n.start) <= allowed
        g = reach_graph(e)
        good = {n for n, x in e.nodes.items()
                if x.provenance is Provenance.Dynamic or x.terminator is TerminatorKind.SyscallExit}
        alive = set(good)
        changed = True
        while changed:
            changed = False
            for n, ss in g.items():
                if n not in alive and ss & alive:
                    alive.add(n)
                    changed = True
        assert alive == set(e.nodes)
        seen, work = set(), [n for n, x in e.nodes.items() if x.provenance is Provenance.Dynamic]
        while work:
            x = work.pop()
            for y in g[x] - seen:
                seen.add(y)
                work.append(y)
        assert set(e.nodes) <= seen | {e.entry} | set(e.thread_entries)
        prev = e


def test_expansion_properties_on_corpus(corpus_name):
    p = program(corpus_name)
    check_expansion(cfg.build_cfg(merged_trace(corpus_name), p), p)


INPUTS = {
    "collatz": st.integers(-3, 60).map(str),
    "sort": st.lists(st.integers(-9, 9), min_size=1, max_size=5).map(lambda xs: " ".join(map(str, [len(xs)] + xs))),
    "gcd": st.tuples(st.integers(0, 40), st.integers(0, 40)).map(lambda t: f"{t[0]} {t[1]}"),
    "loopsum": st.integers(-2, 30).map(str),
    "deadcode": st.integers(-3, 9).map(str),
    "jumptable": st.integers(-1, 5).map(str),
}


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(INPUTS)).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(INPUTS[n], min_size=1, max_size=3))))
def test_expansion_properties_on_random_inputs(case):
    name, inputs = case
    p = program(name)
    runs = [vm.run(p, i.encode(), tracing=True) for i in inputs]
    if any(not r.ok for r in runs):
        return
    c = cfg.build_cfg(trace.merge([r.traces for r in runs]), p)
    check_expansion(c, p)


def test_json_and_dot_export(corpus_name):
    p = program(corpus_name)
    e = expanded(corpus_name, "ds2")
    text = cfg.dumps_cfg(e)
    back = cfg.loads_cfg(text, p)
    assert back == e and cfg.dumps_cfg(back) == text
    assert [g for g in back.guard_sites] == [g for g in e.guard_sites]
    dot = cfg.cfg_to_dot(e)
    assert dot.startswith("digraph") and dot.count("->") == len(e.edges)


def test_edges_use_flow_kind_before_structuring(corpus_name):
    assert all(e.kind is EdgeKind.Flow for e in expanded(corpus_name, "ds2").edges)
