"""Debloated MiniISA binary from a structured program.

Kept blocks are re-laid in original address order and their direct
branches retargeted. Code addresses that flow through registers still
hold original addresses (they come from immediates or data tables), so
every indirect branch site and every spawn becomes a compare chain over
the recorded original targets. The chain borrows r13 (r12 when the branch
register is r13) through the word just below sp and clobbers the flags.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..cfg import EdgeKind
from ..isa import LR, SP, WORD, Cond, Instruction, Op, Program, TerminatorKind, encode, fits_signed, words_to_text
from ..structure import CALL_KINDS, StructuredProgram
from ..vm import GUARD_EXIT, SYS_EXIT, SYS_SPAWN
from .ir import GuardMode

GUARD = "guard"
SEGMENT_ALIGN = 0x100


class RewriteError(RuntimeError):
    pass


@dataclass(frozen=True)
class _Ins:
    ins: Instruction


@dataclass(frozen=True)
class _Branch:
    op: Op
    label: str
    cond: Cond | None = None


@dataclass(frozen=True)
class _Const:
    reg: int
    value: int | None = None  # known constant
    label: str | None = None  # or the address of a label


@dataclass(frozen=True)
class _Label:
    name: str


def node_label(addr: int) -> str:
    return f"N_{addr:08x}"


def _const_words(reg: int, value: int) -> list[Instruction]:
    """Load a 32-bit constant using only ``reg``."""
    value &= 0xFFFFFFFF
    signed = value - (1 << 32) if value & 0x80000000 else value
    if fits_signed(signed, 16):
        return [Instruction(Op.MOVI, rd=reg, imm=signed)]
    hi, lo = value >> 16, value & 0xFFFF
    if lo >= 0x8000:
        hi, lo = (hi + 1) & 0xFFFF, lo - 0x10000
    hi = hi - 0x10000 if hi >= 0x8000 else hi
    out = [Instruction(Op.MOVI, rd=reg, imm=hi)]
    out += [Instruction(Op.ADD, rd=reg, rs1=reg, rs2=reg)] * 16
    out.append(Instruction(Op.ADDI, rd=reg, rs1=reg, imm=lo))
    return out


class _Rewriter:
    def __init__(self, sp: StructuredProgram, program: Program, mode: GuardMode):
        self.sp = sp
        self.program = program
        self.mode = mode
        self.items: list = []
        self.pairs = {(e.src, e.dst) for e in sp.cfg.edges}
        self.flow_pairs = {(e.src, e.dst) for e in sp.cfg.edges if e.kind is not EdgeKind.Resume}
        self.n_local = 0
        self.guard_used = False

    # item helpers

    def ins(self, ins: Instruction) -> None:
        self.items.append(_Ins(ins))

    def branch(self, op: Op, label: str, cond: Cond | None = None) -> None:
        if label == GUARD:
            self.guard_used = True
        self.items.append(_Branch(op, label, cond))

    def label(self, name: str) -> None:
        self.items.append(_Label(name))

    def fresh(self, hint: str) -> str:
        self.n_local += 1
        return f"{hint}_{self.n_local}"

    def goto(self, dst: int | None, next_start: int | None) -> None:
        if dst is None:
            self.branch(Op.B, GUARD)
        elif dst != next_start:
            self.branch(Op.B, node_label(dst))

    def target(self, src: int, dst: int) -> int | None:
        return dst if (src, dst) in self.flow_pairs and dst in self.sp.cfg.nodes else None

    # dispatch over original addresses

    def dispatch(self, reg: int, targets: list[int], on_match, default_native: bool = False) -> None:
        scratch = 12 if reg == 13 else 13
        restore = Instruction(Op.LDR, rd=scratch, rs1=SP, imm=-WORD)
        self.ins(Instruction(Op.STR, rd=scratch, rs1=SP, imm=-WORD))
        labels = [self.fresh("D") for _ in targets]
        transparent = self.mode is GuardMode.Transparent and targets and not default_native
        for i, (t, lab) in enumerate(zip(targets, labels)):
            if transparent and i == len(targets) - 1:
                self.branch(Op.B, lab)
                break
            self.items.append(_Const(scratch, value=t))
            self.ins(Instruction(Op.CMP, rs1=reg, rs2=scratch))
            self.branch(Op.BCOND, lab, Cond.EQ)
        else:
            self.ins(restore)
            if default_native:
                self.ins(Instruction(Op.RET))
            else:
                self.branch(Op.B, GUARD)
        for t, lab in zip(targets, labels):
            self.label(lab)
            self.ins(restore)
            on_match(t)

    # node emission

    def emit_node(self, n, next_start: int | None) -> None:
        prog = self.program
        self.label(node_label(n.start))
        term = n.terminator
        last = n.end if term is TerminatorKind.Fallthrough else n.end - WORD
        for a in range(n.start, last + WORD, WORD):
            ins = prog.instruction_at(a)
            if ins.op is Op.SVC and ins.imm == SYS_SPAWN:
                self.spawn_translation()
            self.ins(ins)
        ins = prog.instruction_at(n.end)
        s = n.start
        if term is TerminatorKind.Fallthrough:
            self.goto(self.target(s, n.end + WORD), next_start)
        elif term is TerminatorKind.DirectJump:
            self.goto(self.target(s, ins.branch_target(n.end)), next_start)
        elif term is TerminatorKind.DirectCondJump:
            taken = self.target(s, ins.branch_target(n.end))
            fall = self.target(s, n.end + WORD)
            if self.mode is GuardMode.Transparent and (taken is None) != (fall is None):
                self.goto(fall if taken is None else taken, next_start)
            else:
                self.branch(Op.BCOND, node_label(taken) if taken is not None else GUARD, ins.cond)
                self.goto(fall, next_start)
        elif term in CALL_KINDS:
            self.emit_call(n, ins, next_start)
        elif term is TerminatorKind.IndirectJump:
            targets = sorted(d for (src, d) in self.flow_pairs if src == s)
            self.dispatch(ins.rs1, targets, lambda t: self.branch(Op.B, node_label(t)))
        elif term is TerminatorKind.Return:
            targets = sorted(d for (src, d) in self.flow_pairs if src == s)
            if targets:
                self.dispatch(LR, targets, lambda t: self.branch(Op.B, node_label(t)), default_native=True)
            else:
                self.ins(ins)
        else:
            self.ins(ins)

    def emit_call(self, n, ins, next_start) -> None:
        resume = n.end + WORD
        has_resume = (n.start, resume) in self.pairs and resume in self.sp.cfg.nodes
        callees = sorted(self.sp.callees(n.start))

        def after_call(elide: bool):
            if has_resume:
                if not (elide and resume == next_start):
                    self.branch(Op.B, node_label(resume))
            else:
                self.branch(Op.B, GUARD)

        if ins.op is Op.BL:
            if not callees:
                self.branch(Op.B, GUARD)
                return
            self.branch(Op.BL, node_label(callees[0]))
            after_call(True)
            return

        def call_case(t):
            self.branch(Op.BL, node_label(t))
            after_call(False)

        self.dispatch(ins.rs1, callees, call_case)

    def spawn_translation(self) -> None:
        entries = sorted(t for t in self.sp.cfg.thread_entries if t in self.sp.cfg.nodes)
        join = self.fresh("SPAWN")

        def translate(t):
            self.items.append(_Const(0, label=node_label(t)))
            self.branch(Op.B, join)

        self.dispatch(0, entries, translate)
        self.label(join)

    def run(self) -> list:
        nodes = sorted(self.sp.cfg.nodes.values(), key=lambda n: n.start)
        for i, n in enumerate(nodes):
            self.emit_node(n, nodes[i + 1].start if i + 1 < len(nodes) else None)
        if self.guard_used:
            self.label(GUARD)
            self.ins(Instruction(Op.MOVI, rd=0, imm=GUARD_EXIT))
            self.ins(Instruction(Op.SVC, imm=SYS_EXIT))
        return self.items


def _layout(items, base: int, long_consts: set) -> tuple[dict, int]:
    addr = base
    labels = {}
    for i, it in enumerate(items):
        if isinstance(it, _Label):
            labels[it.name] = addr
        elif isinstance(it, _Const):
            size = 18 if i in long_consts else len(_const_words(it.reg, it.value or 0))
            addr += WORD * size
        else:
            addr += WORD
    return labels, addr


def _assemble(items, base: int) -> tuple[list[int], dict]:
    long_consts: set[int] = set()
    while True:
        labels, _ = _layout(items, base, long_consts)
        grew = False
        for i, it in enumerate(items):
            if isinstance(it, _Const) and it.label is not None and i not in long_consts:
                if len(_const_words(it.reg, labels[it.label])) > 1:
                    long_consts.add(i)
                    grew = True
        if not grew:
            break
    words = []
    addr = base
    for i, it in enumerate(items):
        if isinstance(it, _Label):
            continue
        if isinstance(it, _Const):
            value = it.value if it.label is None else labels[it.label]
            seq = _const_words(it.reg, value)
            if i in long_consts and len(seq) == 1:
                seq = [Instruction(Op.MOVI, rd=it.reg, imm=0)] + \
                      [Instruction(Op.ADD, rd=it.reg, rs1=it.reg, rs2=it.reg)] * 16 + \
                      [Instruction(Op.ADDI, rd=it.reg, rs1=it.reg, imm=seq[0].imm)]
            for ins in seq:
                words.append(encode(ins))
                addr += WORD
            continue
        if isinstance(it, _Branch):
            if it.label not in labels:
                raise RewriteError(f"unresolved label {it.label}")
            off = (labels[it.label] - addr) // WORD
            try:
                ins = Instruction(it.op, imm=off, cond=it.cond)
            except ValueError as e:
                raise RewriteError(f"branch out of range: {e}") from None
        else:
            ins = it.ins
        words.append(encode(ins))
        addr += WORD
    return words, labels


def rewrite_binary(sp: StructuredProgram, program: Program,
                   guard_mode: GuardMode = GuardMode.FailSafe) -> Program:
    """Re-emit the kept blocks of ``program`` as a new MVB program."""
    mode = GuardMode(guard_mode)
    if sp.cfg.text_sha256 and sp.cfg.text_sha256 != program.text_sha256():
        raise RewriteError("structured program was recovered from a different binary")
    if sp.cfg.entry not in sp.cfg.nodes:
        raise RewriteError("program entry was not recovered")
    items = _Rewriter(sp, program, mode).run()
    base = program.text_base
    words, labels = _assemble(items, base)
    end = base + WORD * len(words)
    if program.data and base < program.data_base + len(program.data) and program.data_base < end:
        base = -(-(program.data_base + len(program.data)) // SEGMENT_ALIGN) * SEGMENT_ALIGN
        words, labels = _assemble(items, base)
    return Program(entry=labels[node_label(sp.cfg.entry)], text=words_to_text(words),
                   text_base=base, data=program.data, data_base=program.data_base)
