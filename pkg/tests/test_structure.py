import itertools
import random

from hypothesis import given, settings, strategies as st

from conftest import program, structured
from randgen import random_cfg
from tracelift import cfg, structure, trace, vm
from tracelift.cfg import Cfg, Edge, EdgeKind as K, Node
from tracelift.isa import TerminatorKind as T, assemble

# Eight blocks: B1 and B2 call, B3 returns; B5 and B7 both jump into B8,
# which jumps into B3 (already a call target).
B = {i: 0x1000 + 0x10 * i for i in range(1, 9)}
NAME = {v: k for k, v in B.items()}


def outlining_example():
    nodes = {a: Node(a, a, T.DirectJump) for a in B.values()}
    for i in (1, 2, 4):
        nodes[B[i]] = Node(B[i], B[i], T.DirectCall)
    nodes[B[3]] = Node(B[3], B[3], T.Return)
    wiring = [(K.Call, 1, 3), (K.Resume, 1, 2), (K.Call, 2, 5), (K.Resume, 2, 4), (K.Call, 4, 6),
            (K.Flow, 5, 8), (K.Flow, 8, 3), (K.Flow, 6, 7), (K.Flow, 7, 8)]
    return Cfg(nodes, frozenset(Edge(B[a], B[b], k) for k, a, b in wiring), B[1])


def names(edges):
    return {(NAME[e.src], NAME[e.dst]) for e in edges}


def test_outlining_promotions():
    sp = structure.partition_and_promote(outlining_example())
    rounds = [names(r) for r in sp.partition.rounds]
    # the branch into an already-called block and the cross-function branch
    # go first; making B8 an entry then forces its other predecessor
    assert rounds == [{(8, 3), (7, 8)}, {(5, 8)}]
    calls = names(e for e in sp.cfg.edges if e.kind is K.Call)
    assert calls == {(1, 3), (2, 5), (4, 6), (8, 3), (7, 8), (5, 8)}
    assert B[8] in sp.partition.func_entries
    assert structure.check_invariants(sp) == []


def test_single_function_needs_no_promotion():
    sp = structured("loopsum", "d")
    assert not sp.partition.promoted and len(sp.partition.func_entries) == 1


def test_mark_calls_adds_resume():
    p = program("evenodd_call")
    sp = structured("evenodd_call", "ds2")
    for n in sp.cfg.nodes.values():
        if n.terminator is T.DirectCall:
            kinds = {e.kind for e in sp.cfg.out_edges(n.start)}
            assert kinds == {K.Call, K.Resume}
            assert sp.resume_of(n.start) == n.end + 4
            assert sp.callees(n.start) == {p.instruction_at(n.end).branch_target(n.end)}


def test_exit_only_callee_loses_resume():
    # the block after the call is reached by the other input, so it exists
    p = assemble("""
    .entry main
    main:
        SVC 3
        MOVI r1, 0
        CMP r0, r1
        B.EQ after
        BL die
    after:
        MOVI r0, 1
        RET
    die:
        MOVI r0, 0
        SVC 0
    """)
    t = trace.merge([vm.run(p, i, tracing=True).traces for i in (b"0", b"1")])
    c = cfg.build_cfg(t, p)
    call_site = 0x1010
    assert structure.mark_calls(c).nodes[call_site].terminator is T.DirectCall
    assert any(e.kind is K.Resume for e in structure.mark_calls(c).out_edges(call_site))
    sp = structure.structure(c)
    assert sp.never_returns == {0x101c}
    assert sp.resume_of(call_site) is None
    assert structure.check_invariants(sp) == []


def test_corpus_invariants(corpus_name):
    for s in cfg.ExpansionStrategy:
        sp = structured(corpus_name, s.value)
        assert structure.check_invariants(sp) == []
        for f, members in sp.functions().items():
            assert members[0] == f or f in members


def test_noreturn_program_detected():
    sp = structured("noreturn", "ds2")
    assert len(sp.never_returns) == 1
    sp = structured("tailcall", "d")
    assert sp.partition.tail_calls


def test_structure_json_roundtrip(corpus_name):
    sp = structured(corpus_name, "ds2")
    text = structure.dumps_structure(sp)
    back = structure.loads_structure(text, program(corpus_name))
    assert back == sp and structure.dumps_structure(back) == text


def check_promotion(c):
    sp = structure.structure(c)
    assert structure.check_invariants(sp) == []
    # every round promotes something new, so the call count strictly grows
    seen = set()
    for r in sp.partition.rounds:
        pairs = {(e.src, e.dst) for e in r}
        assert pairs and not pairs & seen
        seen |= pairs
    before = {(e.src, e.dst) for e in structure.mark_calls(c).edges}
    after = {(e.src, e.dst) for e in sp.cfg.edges}
    dropped = before - after
    # only resume edges behind never-returning calls disappear
    assert all(sp.callees(s) and sp.callees(s) <= sp.never_returns for s, _ in dropped)
    assert after <= before and set(sp.cfg.nodes) == set(c.nodes)
    return sp


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_cfgs_reach_sound_fixpoint(seed):
    check_promotion(random_cfg(random.Random(seed)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_result_independent_of_edge_order(seed, shuffler):
    c = random_cfg(random.Random(seed), 24)
    edges = list(c.edges)
    shuffler.shuffle(edges)
    nodes = list(c.nodes.items())
    shuffler.shuffle(nodes)
    c2 = Cfg(dict(nodes), frozenset(edges), c.entry, c.thread_entries)
    assert structure.dumps_structure(structure.structure(c)) == structure.dumps_structure(structure.structure(c2))


def returns_given(sp, f, R):
    """Can function f reach a return when exactly the functions in R return?"""
    part = sp.partition
    out = {}
    for e in sp.cfg.edges:
        out.setdefault(e.src, []).append(e)
    seen, stack = {f}, [f]
    while stack:
        x = stack.pop()
        node = sp.cfg.nodes[x]
        edges = out.get(x, [])
        if node.terminator is T.Return and all(e.kind is not K.Flow for e in edges):
            return True
        is_call = node.terminator in (T.DirectCall, T.IndirectCall)
        callee_ok = is_call and any(e.dst in R for e in edges
                                    if e.kind is K.Call and e not in part.continuations)
        for e in edges:
            if e.kind is K.Call:
                if e in part.tail_calls and e.dst in R and (callee_ok or not is_call):
                    return True
            elif e.kind is K.Resume and not callee_ok:
                continue
            elif part.assignment[e.dst] == f and e.dst not in seen:
                seen.add(e.dst)
                stack.append(e.dst)
    return False


def never_returns_oracle(sp):
    """Least set of returning functions, as the meet of all closed sets."""
    funcs = sorted(sp.partition.func_entries)
    least = set(funcs)
    for k in range(len(funcs) + 1):
        for R in itertools.combinations(funcs, k):
            R = set(R)
            if {f for f in funcs if returns_given(sp, f, R)} <= R:
                least &= R
    return frozenset(funcs) - least


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_never_returns_matches_brute_force(seed):
    c = random_cfg(random.Random(seed), 12)
    sp = structure.structure(c)
    if len(sp.partition.func_entries) > 9:
        return
    assert sp.never_returns == never_returns_oracle(sp)


def test_never_returns_on_corpus(corpus_name):
    sp = structured(corpus_name, "ds2")
    assert sp.never_returns == never_returns_oracle(sp)
