import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from ccompile import OPT_LEVELS, build, find_compiler, run
from conftest import program, structured
from randgen import random_program, random_state
from tracelift import corpus, vm
from tracelift.isa import Cond, Instruction, Op, TerminatorKind as T, assemble
from tracelift.lift import GuardMode, LiftError, MicroOp, lift_block, lift_program, localize_program
from tracelift.lift.emit_c import emit_source
from tracelift.lift.interp import run_lifted
from tracelift.lift.ir import _Temps, lower_instruction
from tracelift.lift.liveness import CALL_CLOBBERS, localizable
from tracelift.lift.rewrite import rewrite_binary

STRATEGIES = ("d", "ds1", "ds2")


def ops_of(*instrs, indirect=None):
    return [(o.op, o.dst, o.srcs, o.imm, o.cond, o.target, o.cases)
            for o in lift_block([(0x1000 + 4 * i, x) for i, x in enumerate(instrs)], indirect)]


def test_lowering_table_rows():
    assert ops_of(Instruction(Op.ADD, 0, 1, 2)) == [("add", "g_r0", ("g_r1", "g_r2"), None, None, None, ())]
    cmp_blt = ops_of(Instruction(Op.CMP, rs1=1, rs2=2), Instruction(Op.BCOND, imm=4, cond=Cond.LT))
    assert [o[0] for o in cmp_blt] == ["setflags", "select_cond", "condjump", "dirjump"]
    assert cmp_blt[0][2] == ("g_r1", "g_r2") and cmp_blt[2][5] == "L_00001014"
    assert ops_of(Instruction(Op.ADDI, 3, 15, imm=-8)) == [
        ("movi", "t0", (), 0xFFFFFFF8, None, None, ()), ("add", "g_r3", ("g_sp", "t0"), None, None, None, ())]
    assert ops_of(Instruction(Op.LDR, 2, 15, imm=4))[0][:4] == ("load", "g_r2", ("g_sp",), 4)
    assert ops_of(Instruction(Op.STR, 14, 15))[0][:4] == ("store", None, ("g_lr", "g_sp"), 0)


def test_indirect_call_dispatches_over_recorded_targets():
    ops = ops_of(Instruction(Op.BLR, rs1=5), indirect={0x1000: {0x1040, 0x10A0}})
    disp = [o for o in ops if o[0] == "icall_dispatch"][0]
    assert disp[6] == ((0x1040, 0x1040), (0x10A0, 0x10A0))
    assert ops[0][:3] == ("mov", "t0", ("g_r5",))


def test_every_opcode_has_a_lowering():
    temps = _Temps()
    for op in Op:
        if op in (Op.BCOND,):
            ins = Instruction(op, imm=1, cond=Cond.EQ)
        elif op in (Op.BR, Op.BLR):
            ins = Instruction(op, rs1=1)
        else:
            ins = Instruction(op)
        assert lift_block([(0x1000, ins)], {0x1000: {0x2000}}), op
        if ins.kind in (T.Fallthrough, T.SyscallExit):
            assert lower_instruction(ins, 0x1000, temps)
        else:
            with pytest.raises(LiftError):
                lower_instruction(ins, 0x1000, temps)


def test_every_structured_terminator_lifts():
    seen = set()
    for name in corpus.names():
        sp = structured(name, "ds2")
        for mode in GuardMode:
            lift_program(sp, program(name), mode)
        seen |= {n.terminator for n in sp.cfg.nodes.values()}
    assert seen == set(T)


def dispatch_sites(sp):
    n = 0
    for x in sp.cfg.nodes.values():
        if x.terminator in (T.IndirectJump, T.IndirectCall):
            n += 1
        elif x.terminator is T.Return and any(e.kind.name == "Flow" for e in sp.cfg.out_edges(x.start)):
            n += 1
    return n


def test_guard_count_formula(corpus_name):
    p = program(corpus_name)
    for s in STRATEGIES:
        sp = structured(corpus_name, s)
        lp = lift_program(sp, p, GuardMode.FailSafe)
        kinds = Counter(k for _, k in lp.guards)
        sites = sp.cfg.with_cond_targets(p).guard_sites
        assert kinds["branch"] == len(sites)
        assert {site for site, k in lp.guards if k == "branch"} == {g.site for g in sites}
        assert kinds["dispatch"] == dispatch_sites(sp)
        assert kinds["call"] <= len(sp.unresolved_calls)
        assert len(lp.guards) == len(sites) + dispatch_sites(sp) + len(sp.unresolved_calls) + kinds["resume"]
        assert len(set(lp.guards)) == len(lp.guards)  # one guard per site and kind


RESUME_GUARD_SRC = """
.entry main
main:
    SVC 3
    MOV r4, r0
    MOVI r0, 0
    BL check
    MOV r0, r4
    BL check
    MOVI r0, 1
    SVC 1
    MOVI r0, 0
    SVC 0
check:
    MOVI r1, 0
    CMP r0, r1
    B.EQ fine
    MOVI r0, 3
    SVC 0
fine:
    RET
"""


def test_missing_resume_after_returning_callee_is_guarded():
    # check returns from the first call but exits from the second on the
    # traced input, so the second resume block is never seen
    from tracelift import cfg, structure

    p = assemble(RESUME_GUARD_SRC)
    ts = vm.run(p, b"5", tracing=True).traces
    for s in STRATEGIES:
        sp = structure.structure(cfg.expand(cfg.build_cfg(ts, p), p, s))
        assert 0x1028 not in sp.never_returns  # check
        for mode in GuardMode:
            lp = lift_program(sp, p, mode)
            assert [k for _, k in lp.guards] == ["resume"]
            assert lp.guards[0][0] == 0x1014
            assert run_lifted(lp, b"5").exit_code == 3
            assert run_lifted(lp, b"0").exit_code == vm.GUARD_EXIT
            rw = rewrite_binary(sp, p, mode)
            assert vm.run(rw, b"5").exit_code == 3
            assert vm.run(rw, b"0").exit_code == vm.GUARD_EXIT
    assert vm.run(p, b"0").stdout == b"1\n"


def test_transparent_has_no_branch_guards(corpus_name):
    for s in STRATEGIES:
        lp = lift_program(structured(corpus_name, s), program(corpus_name), GuardMode.Transparent)
        assert not [g for g in lp.guards if g[1] == "branch"]


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("local", [True, False])
def test_interpreter_matches_vm(corpus_name, strategy, local):
    p = program(corpus_name)
    sp = structured(corpus_name, strategy)
    for mode in GuardMode:
        lp = lift_program(sp, p, mode, localize=local)
        for i in corpus.inputs(corpus_name):
            r = vm.run(p, i)
            o = run_lifted(lp, i, use_locals=local)
            assert (o.exit_code, o.stdout) == (r.exit_code, r.stdout)


def test_diverging_input_hits_guard(corpus_name):
    d = corpus.diverging_input(corpus_name)
    if d is None:
        pytest.skip("fully covered")
    lp = lift_program(structured(corpus_name, "d"), program(corpus_name), GuardMode.FailSafe)
    assert run_lifted(lp, d).exit_code == vm.GUARD_EXIT


def test_scratch_register_between_adjacent_ops_is_localized():
    p = assemble("""
    .entry main
    main:
        MOVI r5, 4
        ADD r0, r5, r5
        RET
    """)
    from tracelift import cfg, structure
    sp = structure.structure(cfg.build_cfg(vm.run(p, tracing=True).traces, p))
    f = lift_program(sp, p).functions[0]
    assert "g_r5" in f.localized
    assert "g_r0" not in f.localized and "g_sp" not in f.localized


def test_return_register_and_live_in_never_localized(corpus_name):
    lp = lift_program(structured(corpus_name, "ds2"), program(corpus_name))
    for f in lp.functions:
        has_ret = any(o.op == "ret" for b in f.blocks for o in b.ops)
        if has_ret:
            assert "g_r0" not in f.localized and "g_sp" not in f.localized


def test_clobbered_register_live_across_call_is_kept():
    from tracelift.lift.ir import LiftedBlock, LiftedFunction
    f = LiftedFunction(0x2000, (LiftedBlock("L0", (
        MicroOp("movi", "g_r12", imm=1),
        MicroOp("call", target=0x3000),
        MicroOp("mov", "g_r4", ("g_r12",)),
        MicroOp("movi", "g_r0", imm=0),
        MicroOp("ret"),
    )),))
    loc = localizable(f, {})
    assert "g_r12" not in loc and "g_r4" in loc
    assert "g_r12" in CALL_CLOBBERS


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_localization_preserves_observations(seed):
    rng = random.Random(seed)
    lp = localize_program(random_program(rng))
    regs, stdin = random_state(rng)
    a = run_lifted(lp, stdin, use_locals=True, regs=dict(regs), mem_size=1 << 16)
    b = run_lifted(lp, stdin, use_locals=False, regs=dict(regs), mem_size=1 << 16)
    assert a.key() == b.key()


def test_emitted_source_is_deterministic_and_complete(corpus_name):
    sp = structured(corpus_name, "ds2")
    lp = lift_program(sp, program(corpus_name))
    a = emit_source(lp).text
    assert a == emit_source(lift_program(sp, program(corpus_name))).text
    for f in sp.partition.func_entries:
        assert f"void f_{f:08x}(void)\n{{" in a
    assert "int main(void)" in a


def test_failsafe_source_traps_at_guards():
    sp = structured("evenodd_call", "d")
    src = emit_source(lift_program(sp, program("evenodd_call"), GuardMode.FailSafe)).text
    assert f"rt_trap({vm.GUARD_EXIT})" in src
    src_t = emit_source(lift_program(sp, program("evenodd_call"), GuardMode.Transparent)).text
    assert src_t.count(f"rt_trap({vm.GUARD_EXIT})") < src.count(f"rt_trap({vm.GUARD_EXIT})")


@pytest.mark.skipif(find_compiler() is None, reason="no C compiler on PATH")
def test_compiled_parity_program(tmp_path):
    p = program("evenodd")
    from tracelift import cfg, structure
    sp = structure.structure(cfg.build_cfg(vm.run(p, b"3", tracing=True).traces, p))
    src = emit_source(lift_program(sp, p, GuardMode.FailSafe)).text
    exe, diag = build(find_compiler(), src, tmp_path, "evenodd", OPT_LEVELS[1])
    assert exe is not None and diag == ""
    assert run(exe, b"5") == (0, b"O\n")
    assert run(exe, b"4")[0] == vm.GUARD_EXIT


# ---------------------------------------------------------------- rewriter


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_rewritten_binary_matches_vm(corpus_name, strategy):
    p = program(corpus_name)
    sp = structured(corpus_name, strategy)
    for mode in GuardMode:
        q = rewrite_binary(sp, p, mode)
        assert q.data == p.data and q.data_base == p.data_base
        for i in corpus.inputs(corpus_name):
            a, b = vm.run(p, i), vm.run(q, i)
            assert b.ok and (a.exit_code, a.stdout) == (b.exit_code, b.stdout)


def test_rewritten_binary_guards_diverging_input(corpus_name):
    d = corpus.diverging_input(corpus_name)
    if d is None:
        pytest.skip("fully covered")
    q = rewrite_binary(structured(corpus_name, "d"), program(corpus_name), GuardMode.FailSafe)
    assert vm.run(q, d).exit_code == vm.GUARD_EXIT


def test_rewriter_shrinks_partly_covered_text():
    p = program("deadcode")
    q = rewrite_binary(structured("deadcode", "d"), p, GuardMode.Transparent)
    assert len(q.text) < len(p.text)


def test_rewriter_rejects_foreign_structure():
    from tracelift.lift.rewrite import RewriteError
    with pytest.raises(RewriteError):
        rewrite_binary(structured("gcd", "d"), program("collatz"))
