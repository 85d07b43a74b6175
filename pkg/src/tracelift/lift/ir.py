"""Micro-op IR and the lowering from structured MiniISA blocks."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..isa import LR, SP, WORD, Cond, Instruction, Op, Program, TerminatorKind, classify_terminator
from ..structure import CALL_KINDS, StructuredProgram
from ..cfg import EdgeKind

FLAGS = ("f_n", "f_z", "f_c", "f_v")
GLOBAL_REGS = tuple(f"g_r{i}" for i in range(14)) + ("g_lr", "g_sp")
GLOBALS = GLOBAL_REGS + FLAGS

COND_USES = {
    Cond.EQ: ("f_z",), Cond.NE: ("f_z",),
    Cond.LT: ("f_n", "f_v"), Cond.GE: ("f_n", "f_v"),
    Cond.GT: ("f_z", "f_n", "f_v"), Cond.LE: ("f_z", "f_n", "f_v"),
}

ALU_NAMES = {Op.ADD: "add", Op.SUB: "sub", Op.MUL: "mul", Op.AND: "and",
             Op.ORR: "or", Op.XOR: "xor", Op.SHL: "shl", Op.SHR: "shr"}
BINARY_OPS = frozenset(ALU_NAMES.values())
# ops that end a block
TERMINAL_OPS = frozenset({"dirjump", "tailcall", "ijump_dispatch", "ret", "guard", "exit", "unreachable"})


class GuardMode(enum.Enum):
    FailSafe = "failsafe"
    Transparent = "transparent"


class LiftError(RuntimeError):
    pass


def reg_var(r: int) -> str:
    if r == LR:
        return "g_lr"
    if r == SP:
        return "g_sp"
    return f"g_r{r}"


def is_temp(v: str) -> bool:
    return v.startswith("t")


@dataclass(frozen=True)
class MicroOp:
    op: str
    dst: str | None = None
    srcs: tuple = ()
    imm: int | None = None
    cond: Cond | None = None
    target: object = None  # block label, or function entry for call/tailcall
    site: int | None = None  # original instruction address
    cases: tuple = ()  # dispatch: ((old_address, label-or-function), ...)

    def __str__(self) -> str:
        parts = [self.op]
        if self.cond is not None:
            parts.append(self.cond.name)
        if self.dst:
            parts.append(self.dst)
        parts.extend(self.srcs)
        if self.imm is not None:
            parts.append(f"#{self.imm:#x}")
        if self.target is not None:
            parts.append(self.target if isinstance(self.target, str) else f"f_{self.target:08x}")
        if self.cases:
            parts.append("{" + ", ".join(f"{a:#x}:{_fmt_target(t)}" for a, t in self.cases) + "}")
        return " ".join(str(p) for p in parts)


def _fmt_target(t) -> str:
    return t if isinstance(t, str) else f"f_{t:08x}"


@dataclass(frozen=True)
class LiftedBlock:
    label: str
    ops: tuple


@dataclass(frozen=True)
class LiftedFunction:
    entry: int
    blocks: tuple
    localized: frozenset = frozenset()
    guards: tuple = ()  # (site, kind) per trap the function can raise

    @property
    def name(self) -> str:
        return func_name(self.entry)


@dataclass(frozen=True)
class LiftedProgram:
    functions: tuple
    entry: int
    thread_entries: tuple
    text_base: int
    text: bytes
    data_base: int
    data: bytes
    guard_mode: GuardMode = GuardMode.FailSafe

    def function(self, entry: int) -> LiftedFunction:
        for f in self.functions:
            if f.entry == entry:
                return f
        raise KeyError(entry)

    @property
    def guards(self) -> list:
        return [g for f in self.functions for g in f.guards]


def func_name(entry: int) -> str:
    return f"f_{entry:08x}"


def block_label(addr: int) -> str:
    return f"L_{addr:08x}"


# ---------------------------------------------------------------- lowering


class _Temps:
    def __init__(self):
        self.n = 0

    def new(self) -> str:
        t = f"t{self.n}"
        self.n += 1
        return t


def lower_instruction(ins: Instruction, addr: int, temps: _Temps) -> list[MicroOp]:
    """Micro-ops for one non-branch instruction."""
    op = ins.op
    if op is Op.MOVI:
        return [MicroOp("movi", reg_var(ins.rd), imm=ins.imm & 0xFFFFFFFF)]
    if op is Op.MOV:
        return [MicroOp("mov", reg_var(ins.rd), (reg_var(ins.rs1),))]
    if op in ALU_NAMES:
        return [MicroOp(ALU_NAMES[op], reg_var(ins.rd), (reg_var(ins.rs1), reg_var(ins.rs2)))]
    if op is Op.ADDI:
        t = temps.new()
        return [MicroOp("movi", t, imm=ins.imm & 0xFFFFFFFF),
                MicroOp("add", reg_var(ins.rd), (reg_var(ins.rs1), t))]
    if op is Op.CMP:
        return [MicroOp("setflags", srcs=(reg_var(ins.rs1), reg_var(ins.rs2)))]
    if op is Op.LDR:
        return [MicroOp("load", reg_var(ins.rd), (reg_var(ins.rs1),), imm=ins.imm & 0xFFFFFFFF)]
    if op is Op.STR:
        return [MicroOp("store", srcs=(reg_var(ins.rd), reg_var(ins.rs1)), imm=ins.imm & 0xFFFFFFFF)]
    if op is Op.SVC:
        if ins.imm == 0:
            return [MicroOp("exit", site=addr)]
        return [MicroOp("sys", imm=ins.imm, site=addr)]
    raise LiftError(f"{op.name} at {addr:#x} is a control transfer")


def lift_block(instructions, indirect=None) -> list[MicroOp]:
    """Lower a decoded block given as (address, Instruction) pairs.

    Without structural information the terminator is lowered literally:
    direct branches jump to block labels, BL becomes a call, and indirect
    branches dispatch over ``indirect[site]`` with a guard as default.
    """
    temps = _Temps()
    ops: list[MicroOp] = []
    indirect = indirect or {}
    for addr, ins in instructions:
        kind = classify_terminator(ins)
        if kind is TerminatorKind.Fallthrough or kind is TerminatorKind.SyscallExit:
            ops.extend(lower_instruction(ins, addr, temps))
        elif kind is TerminatorKind.DirectJump:
            ops.append(MicroOp("dirjump", target=block_label(ins.branch_target(addr)), site=addr))
        elif kind is TerminatorKind.DirectCondJump:
            t = temps.new()
            ops.append(MicroOp("select_cond", t, cond=ins.cond, site=addr))
            ops.append(MicroOp("condjump", srcs=(t,), cond=ins.cond,
                               target=block_label(ins.branch_target(addr)), site=addr))
            ops.append(MicroOp("dirjump", target=block_label(addr + WORD), site=addr))
        elif kind is TerminatorKind.DirectCall:
            ops.append(MicroOp("movi", "g_lr", imm=addr + WORD))
            ops.append(MicroOp("call", target=ins.branch_target(addr), site=addr))
            ops.append(MicroOp("dirjump", target=block_label(addr + WORD), site=addr))
        elif kind is TerminatorKind.IndirectCall:
            t = temps.new()
            cases = tuple((a, a) for a in sorted(indirect.get(addr, ())))
            ops.append(MicroOp("mov", t, (reg_var(ins.rs1),)))
            ops.append(MicroOp("movi", "g_lr", imm=addr + WORD))
            ops.append(MicroOp("icall_dispatch", srcs=(t,), site=addr, cases=cases))
            ops.append(MicroOp("dirjump", target=block_label(addr + WORD), site=addr))
        elif kind is TerminatorKind.IndirectJump:
            cases = tuple((a, block_label(a)) for a in sorted(indirect.get(addr, ())))
            ops.append(MicroOp("ijump_dispatch", srcs=(reg_var(ins.rs1),), site=addr, cases=cases))
        else:
            ops.append(MicroOp("ret", site=addr))
    return ops


# ---------------------------------------------------------------- structured lifting


class _FunctionLifter:
    def __init__(self, sp: StructuredProgram, program: Program, fid: int, mode: GuardMode):
        self.sp = sp
        self.program = program
        self.fid = fid
        self.mode = mode
        self.blocks: list[LiftedBlock] = []
        self.guards: list[tuple[int, str]] = []
        self.promoted = sp.partition.promoted

    def action(self, src: int, dst: int) -> tuple:
        for e in self.sp.cfg.out_edges(src):
            if e.dst != dst:
                continue
            if e.kind is EdgeKind.Flow:
                return ("goto", block_label(dst))
            if e.kind is EdgeKind.Call and e in self.promoted:
                return ("tail", dst)
        return ("guard",)

    def emit_action(self, act, site: int, kind: str) -> list[MicroOp]:
        if act[0] == "goto":
            return [MicroOp("dirjump", target=act[1], site=site)]
        if act[0] == "tail":
            return [MicroOp("tailcall", target=act[1], site=site)]
        self.guards.append((site, kind))
        return [MicroOp("guard", site=site)]

    def stub(self, node_start: int, ops: list[MicroOp]) -> str:
        label = f"S_{node_start:08x}_{sum(b.label.startswith(f'S_{node_start:08x}') for b in self.blocks)}"
        self.blocks.append(LiftedBlock(label, tuple(ops)))
        return label

    def label_for(self, act, node_start: int, site: int, kind: str) -> str:
        """A jump target carrying out ``act``: the block itself or a stub."""
        if act[0] == "goto":
            return act[1]
        return self.stub(node_start, self.emit_action(act, site, kind))

    def lift_node(self, start: int) -> None:
        node = self.sp.cfg.nodes[start]
        temps = _Temps()
        ops: list[MicroOp] = []
        term = node.terminator
        body_end = node.end if term is TerminatorKind.Fallthrough else node.end - WORD
        for a in range(node.start, body_end + WORD, WORD):
            ops.extend(lower_instruction(self.program.instruction_at(a), a, temps))
        ins = self.program.instruction_at(node.end)
        site = node.end
        stubs_at = len(self.blocks)
        if term is TerminatorKind.Fallthrough:
            ops += self.emit_action(self.action(start, node.end + WORD), site, "fallthrough")
        elif term is TerminatorKind.DirectJump:
            ops += self.emit_action(self.action(start, ins.branch_target(site)), site, "branch")
        elif term is TerminatorKind.DirectCondJump:
            taken = self.action(start, ins.branch_target(site))
            fall = self.action(start, site + WORD)
            if self.mode is GuardMode.Transparent and (taken[0] == "guard") != (fall[0] == "guard"):
                ops += self.emit_action(fall if taken[0] == "guard" else taken, site, "branch")
            else:
                t = temps.new()
                ops.append(MicroOp("select_cond", t, cond=ins.cond, site=site))
                ops.append(MicroOp("condjump", srcs=(t,), cond=ins.cond,
                                   target=self.label_for(taken, start, site, "branch"), site=site))
                ops += self.emit_action(fall, site, "branch")
        elif term in CALL_KINDS:
            ops += self.lift_call(node, ins, temps)
        elif term is TerminatorKind.IndirectJump:
            ops.append(self.jump_dispatch(node, reg_var(ins.rs1)))
        elif term is TerminatorKind.Return:
            flows = [e for e in self.sp.cfg.out_edges(start) if e.kind is not EdgeKind.Resume]
            if flows:
                ops.append(self.jump_dispatch(node, "g_lr"))
            else:
                ops.append(MicroOp("ret", site=site))
        else:
            ops.extend(lower_instruction(ins, site, temps))
        # the node's own block goes before any stubs it created
        self.blocks.insert(stubs_at, LiftedBlock(block_label(start), tuple(ops)))

    def jump_dispatch(self, node, var: str) -> MicroOp:
        cases = []
        for e in self.sp.cfg.out_edges(node.start):
            if e.kind is EdgeKind.Resume:
                continue
            act = self.action(node.start, e.dst)
            cases.append((e.dst, self.label_for(act, node.start, node.end, "dispatch")))
        self._dispatch_guard(node.end, cases)
        return MicroOp("ijump_dispatch", srcs=(var,), site=node.end, cases=tuple(sorted(cases)))

    def _dispatch_guard(self, site: int, cases) -> None:
        if self.mode is GuardMode.FailSafe or not cases:
            self.guards.append((site, "dispatch"))

    def lift_call(self, node, ins, temps) -> list[MicroOp]:
        site = node.end
        callees = sorted(self.sp.callees(node.start))
        ops: list[MicroOp] = []
        if ins.op is Op.BL:
            if not callees:
                return ops + self.emit_action(("guard",), site, "call")
            ops.append(MicroOp("movi", "g_lr", imm=site + WORD))
            ops.append(MicroOp("call", target=callees[0], site=site))
        else:
            t = temps.new()
            ops.append(MicroOp("mov", t, (reg_var(ins.rs1),)))
            ops.append(MicroOp("movi", "g_lr", imm=site + WORD))
            self._dispatch_guard(site, callees)
            ops.append(MicroOp("icall_dispatch", srcs=(t,), site=site,
                               cases=tuple((c, c) for c in callees)))
        resume = self.sp.resume_of(node.start)
        cont = self.sp.continuation_of(node.start)
        if resume is not None:
            ops.append(MicroOp("dirjump", target=block_label(resume), site=site))
        elif cont is not None:
            ops.append(MicroOp("tailcall", target=cont, site=site))
        elif callees and set(callees) <= self.sp.never_returns:
            ops.append(MicroOp("unreachable", site=site))
        else:
            ops += self.emit_action(("guard",), site, "resume")
        return ops

    def run(self) -> LiftedFunction:
        members = self.sp.partition.members(self.fid)
        order = [self.fid] + [m for m in members if m != self.fid]
        for m in order:
            self.lift_node(m)
        if not self.blocks:
            raise LiftError(f"function {self.fid:#x} has no blocks")
        return LiftedFunction(self.fid, tuple(self.blocks), frozenset(), tuple(self.guards))


def lift_program(sp: StructuredProgram, program: Program,
                 guard_mode: GuardMode = GuardMode.FailSafe, localize: bool = True) -> LiftedProgram:
    """Lift every recovered function; optionally demote registers to locals."""
    from .liveness import localize_program

    guard_mode = GuardMode(guard_mode)
    funcs = tuple(_FunctionLifter(sp, program, f, guard_mode).run()
                  for f in sorted(sp.partition.func_entries))
    lp = LiftedProgram(
        functions=funcs,
        entry=sp.cfg.entry,
        thread_entries=tuple(sorted(sp.cfg.thread_entries)),
        text_base=program.text_base,
        text=program.text,
        data_base=program.data_base,
        data=program.data,
        guard_mode=guard_mode,
    )
    return localize_program(lp) if localize else lp


def dump_lifted(lp: LiftedProgram) -> str:
    """Readable listing of the micro-op program."""
    out = []
    for f in lp.functions:
        loc = ", ".join(sorted(f.localized)) or "-"
        out.append(f"func {f.name}  ; locals: {loc}")
        for b in f.blocks:
            out.append(f"  {b.label}:")
            out.extend(f"    {op}" for op in b.ops)
    return "\n".join(out) + "\n"
