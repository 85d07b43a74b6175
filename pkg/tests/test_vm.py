from hypothesis import given, strategies as st

from tracelift import corpus, vm
from tracelift.isa import Cond, Op, assemble

u32 = st.integers(0, (1 << 32) - 1)


def run_src(src, stdin=b"", **kw):
    return vm.run(assemble(src), stdin, **kw)


@given(u32, u32)
def test_condition_codes_match_signed_compare(a, b):
    n, z, c, v = vm.compare_flags(a, b)
    sa, sb = vm.signed(a), vm.signed(b)
    expect = {Cond.EQ: sa == sb, Cond.NE: sa != sb, Cond.LT: sa < sb,
              Cond.GE: sa >= sb, Cond.GT: sa > sb, Cond.LE: sa <= sb}
    for cond, want in expect.items():
        assert vm.cond_holds(cond, n, z, c, v) == want
    assert c == (a >= b)


@given(u32, u32)
def test_alu_wraps_like_uint32(a, b):
    m = 0xFFFFFFFF
    assert vm.alu(Op.ADD, a, b) == (a + b) & m
    assert vm.alu(Op.SUB, a, b) == (a - b) & m
    assert vm.alu(Op.MUL, a, b) == (a * b) & m
    assert vm.alu(Op.SHL, a, b) == (a << (b & 31)) & m
    assert vm.alu(Op.SHR, a, b) == a >> (b & 31)


def test_expected_corpus_outputs():
    cases = [
        ("evenodd", b"3", b"O\n"), ("evenodd", b"2", b"E\n"),
        ("factorial", b"5", b"120\n"),
        ("gcd", b"48 18", b"6\n"),
        ("threads", b"10", b"120\n165\n285\n"),
    ]
    for name, stdin, out in cases:
        r = vm.run(corpus.program(name), stdin)
        assert r.ok and r.stdout == out, (name, r)


def test_exit_code_from_r0_on_return_and_svc():
    assert run_src(".entry m\nm:\n MOVI r0, 7\n RET\n").exit_code == 7
    assert run_src(".entry m\nm:\n MOVI r0, 300\n SVC 0\n").exit_code == 300 & 0xFF


def test_getint_accepts_only_integer_tokens():
    src = ".entry m\nm:\n SVC 3\n SVC 1\n SVC 3\n SVC 1\n SVC 3\n SVC 1\n MOVI r0, 0\n RET\n"
    assert run_src(src, b"-12 x5 +3").stdout == b"-12\n0\n3\n"
    assert run_src(src, b"").stdout == b"0\n0\n0\n"


def test_faults_are_reported_not_raised():
    r = run_src(".entry m\nm:\n MOVI r1, 2\n LDR r0, [r1, #0]\n RET\n")
    assert r.fault is vm.Fault.MEMORY and not r.ok
    r = run_src(".entry m\nm:\n B m\n", step_limit=100)
    assert r.fault is vm.Fault.STEP_LIMIT
    r = run_src(".entry m\nm:\n SVC 9\n")
    assert r.fault is vm.Fault.SYSCALL


def test_thread_result_independent_of_quantum():
    p = corpus.program("threads")
    outs = {vm.run(p, b"12", schedule_quantum=q).stdout for q in (1, 3, 64, 1000)}
    assert len(outs) == 1


def test_tracing_does_not_change_behaviour(corpus_name):
    p = corpus.program(corpus_name)
    for i in corpus.inputs(corpus_name):
        a, b = vm.run(p, i), vm.run(p, i, tracing=True)
        assert (a.exit_code, a.stdout, a.steps) == (b.exit_code, b.stdout, b.steps)
        assert b.traces is not None


def test_every_traced_input_runs_clean(corpus_name):
    p = corpus.program(corpus_name)
    for i in corpus.inputs(corpus_name):
        assert vm.run(p, i).ok
    d = corpus.diverging_input(corpus_name)
    if d is not None:
        assert vm.run(p, d).ok
