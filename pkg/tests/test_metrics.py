import random

from hypothesis import given, settings, strategies as st

from conftest import expanded, program, structured
from test_isa import instructions
from tracelift import corpus, metrics
from tracelift.isa import DecodeError, Instruction, Op, Program, TerminatorKind, classify_terminator, decode, encode
from tracelift.lift import GuardMode
from tracelift.lift.rewrite import rewrite_binary

ENDS = {Op.RET, Op.BR, Op.BLR}


def gadgets_oracle(p: Program, max_len: int) -> set:
    """Every window of up to max_len words ending at RET/BR/BLR with a clean body."""
    words = [p.text[i:i + 4] for i in range(0, len(p.text), 4)]

    def ins(w):
        try:
            return decode(int.from_bytes(w, "little"))
        except DecodeError:
            return None

    decoded = [ins(w) for w in words]
    found = set()
    for i in range(len(words)):
        for j in range(i, min(len(words), i + max_len)):
            last = decoded[j]
            if last is None or last.op not in ENDS:
                continue
            body = decoded[i:j]
            if all(x is not None and classify_terminator(x) is TerminatorKind.Fallthrough for x in body):
                found.add(b"".join(words[i:j + 1]))
    return found


def test_scanner_matches_oracle_on_corpus(corpus_name):
    p = program(corpus_name)
    for k in (1, 2, 6, 10):
        assert metrics.count_gadgets(p, k).gadgets == gadgets_oracle(p, k)


words = st.one_of(instructions().map(encode), st.integers(0, 2**32 - 1))


@settings(max_examples=200, deadline=None)
@given(st.lists(words, min_size=1, max_size=120), st.integers(1, 8))
def test_scanner_matches_oracle_on_random_text(ws, k):
    p = Program(entry=0x1000, text=b"".join(w.to_bytes(4, "little") for w in ws))
    assert metrics.count_gadgets(p, k).gadgets == gadgets_oracle(p, k)


def random_instruction(rng):
    op = rng.choice([Op.ADD, Op.MOV, Op.RET, Op.BR, Op.B, Op.MOVI])
    r = rng.randint(0, 3)
    if op in (Op.ADD, Op.MOV, Op.BR):
        return Instruction(op, rd=r, rs1=rng.randint(0, 3))
    if op is Op.MOVI:
        return Instruction(op, rd=r, imm=rng.randint(-5, 5))
    if op is Op.B:
        return Instruction(op, imm=rng.randint(-5, 5))
    return Instruction(op)


def test_scanner_on_thousand_instructions():
    rng = random.Random(7)
    text = b"".join(encode(random_instruction(rng)).to_bytes(4, "little") for _ in range(1000))
    p = Program(entry=0x1000, text=text)
    assert metrics.count_gadgets(p).gadgets == gadgets_oracle(p, metrics.DEFAULT_MAX_LEN)


def test_gadget_count_monotone_in_max_len(corpus_name):
    p = program(corpus_name)
    counts = [metrics.count_gadgets(p, k).count for k in range(1, 9)]
    assert counts == sorted(counts)


def test_percentages_are_consistent(corpus_name):
    p = program(corpus_name)
    q = rewrite_binary(structured(corpus_name, "d"), p, GuardMode.FailSafe)
    rep = metrics.count_gadgets(q, baseline=p)
    base = metrics.count_gadgets(p)
    assert rep.baseline_count == base.count
    assert rep.percent_of_baseline == 100.0 * rep.count / base.count
    d = metrics.report_dict(corpus_name, p, metrics.coverage(expanded(corpus_name, "d"), p), q)
    assert d["debloated"]["gadgets_percent"] == round(100.0 * d["debloated"]["gadgets"] / d["original"]["gadgets"], 2)
    assert d["debloated"]["code_size"] == len(q.text)
    assert d["debloated"]["code_size_percent"] == round(100.0 * len(q.text) / len(p.text), 2)


def test_coverage_counts_covered_instructions():
    p = program("evenodd")
    c = expanded("evenodd", "d")
    rep = metrics.coverage(c, p)
    assert rep.total_text_instructions == p.n_instructions
    assert rep.lifted_instructions == p.n_instructions and rep.percent == 100.0
    p = program("deadcode")
    rep = metrics.coverage(expanded("deadcode", "d"), p)
    assert 0 < rep.percent < 100


def test_coverage_monotone_over_strategies(corpus_name):
    p = program(corpus_name)
    d, s1, s2 = (metrics.coverage(expanded(corpus_name, s), p).percent for s in ("d", "ds1", "ds2"))
    assert d <= s1 <= s2


def test_empty_baseline():
    p = Program(entry=0x1000, text=encode(Instruction(Op.ADD)).to_bytes(4, "little"))
    rep = metrics.count_gadgets(p, baseline=metrics.count_gadgets(p))
    assert rep.count == 0 and rep.percent_of_baseline == 100.0


def test_table_lists_every_row():
    rows = [metrics.report_dict(n, program(n)) for n in corpus.names()]
    table = metrics.format_table(rows)
    assert len(table.splitlines()) == len(rows) + 2
