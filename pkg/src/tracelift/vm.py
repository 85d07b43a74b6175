"""Deterministic MiniISA interpreter with optional block/indirect-target tracing.

Guest threads are simulated on one host thread with a round-robin scheduler;
each guest thread keeps a private trace cache which is merged when the
program terminates.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field

from . import trace as tr
from .isa import (LR, SP, WORD, Cond, DecodeError, Instruction, Op, Program,
                  TerminatorKind, classify_terminator, is_terminator)

MASK = 0xFFFFFFFF
MEM_SIZE = 1 << 20
STACK_BAND = 64 * 1024
DEFAULT_STEP_LIMIT = 50_000_000
DEFAULT_QUANTUM = 64
THREAD_EXIT = 0  # LR sentinel: returning here ends the thread
GUARD_EXIT = 99
MEMORY_TRAP_EXIT = 98

SYS_EXIT, SYS_PUTINT, SYS_PUTCHAR, SYS_GETINT, SYS_SPAWN, SYS_JOIN = range(6)


class Fault(enum.Enum):
    DECODE = "undecodable-instruction"
    PC = "pc-out-of-text"
    MEMORY = "bad-memory-access"
    STEP_LIMIT = "step-limit-exceeded"
    SYSCALL = "invalid-syscall"
    DEADLOCK = "deadlock"


class VMFault(Exception):
    def __init__(self, fault: Fault, detail: str = ""):
        super().__init__(f"{fault.value}: {detail}")
        self.fault = fault
        self.detail = detail


def signed(x: int) -> int:
    return x - (1 << 32) if x & 0x80000000 else x


def cond_holds(cond: Cond, n: int, z: int, c: int, v: int) -> bool:
    if cond is Cond.EQ:
        return bool(z)
    if cond is Cond.NE:
        return not z
    if cond is Cond.LT:
        return n != v
    if cond is Cond.GE:
        return n == v
    if cond is Cond.GT:
        return not z and n == v
    return bool(z) or n != v


def compare_flags(a: int, b: int) -> tuple[int, int, int, int]:
    """N, Z, C, V after computing a - b (C set when no borrow)."""
    r = (a - b) & MASK
    n = r >> 31
    z = int(r == 0)
    c = int(a >= b)
    v = ((a ^ b) & (a ^ r)) >> 31 & 1
    return n, z, c, v


def alu(op: Op, a: int, b: int) -> int:
    if op is Op.ADD:
        return (a + b) & MASK
    if op is Op.SUB:
        return (a - b) & MASK
    if op is Op.MUL:
        return (a * b) & MASK
    if op is Op.AND:
        return a & b
    if op is Op.ORR:
        return a | b
    if op is Op.XOR:
        return a ^ b
    if op is Op.SHL:
        return (a << (b & 31)) & MASK
    if op is Op.SHR:
        return a >> (b & 31)
    raise ValueError(op)


@dataclass
class MachineState:
    mem: bytearray
    regs: list = field(default_factory=lambda: [0] * 16)
    n: int = 0
    z: int = 0
    c: int = 0
    v: int = 0
    pc: int = 0
    halted: bool = False
    exit_code: int | None = None

    def load(self, addr: int) -> int:
        addr &= MASK
        if addr % WORD or addr + WORD > len(self.mem):
            raise VMFault(Fault.MEMORY, f"load from {addr:#x}")
        return int.from_bytes(self.mem[addr:addr + WORD], "little")

    def store(self, addr: int, value: int) -> None:
        addr &= MASK
        if addr % WORD or addr + WORD > len(self.mem):
            raise VMFault(Fault.MEMORY, f"store to {addr:#x}")
        self.mem[addr:addr + WORD] = (value & MASK).to_bytes(WORD, "little")


def step(state: MachineState, ins: Instruction) -> MachineState:
    """Execute one non-syscall instruction in place and return ``state``."""
    if state.halted:
        raise ValueError("machine is halted")
    op, regs, pc = ins.op, state.regs, state.pc
    nxt = pc + WORD
    if op is Op.MOVI:
        regs[ins.rd] = ins.imm & MASK
    elif op is Op.MOV:
        regs[ins.rd] = regs[ins.rs1]
    elif op is Op.ADDI:
        regs[ins.rd] = (regs[ins.rs1] + ins.imm) & MASK
    elif op is Op.CMP:
        state.n, state.z, state.c, state.v = compare_flags(regs[ins.rs1], regs[ins.rs2])
    elif op is Op.LDR:
        regs[ins.rd] = state.load(regs[ins.rs1] + ins.imm)
    elif op is Op.STR:
        state.store(regs[ins.rs1] + ins.imm, regs[ins.rd])
    elif op is Op.B:
        nxt = ins.branch_target(pc)
    elif op is Op.BCOND:
        if cond_holds(ins.cond, state.n, state.z, state.c, state.v):
            nxt = ins.branch_target(pc)
    elif op is Op.BL:
        regs[LR] = pc + WORD
        nxt = ins.branch_target(pc)
    elif op is Op.BR:
        nxt = regs[ins.rs1]
    elif op is Op.BLR:
        nxt = regs[ins.rs1]
        regs[LR] = pc + WORD
    elif op is Op.RET:
        nxt = regs[LR]
    elif op is Op.SVC:
        raise VMFault(Fault.SYSCALL, "syscalls are handled by run()")
    else:
        regs[ins.rd] = alu(op, regs[ins.rs1], regs[ins.rs2])
    state.pc = nxt
    return state


@dataclass
class TraceCache:
    """Per-thread private trace buffers."""

    blocks: dict = field(default_factory=dict)  # start -> [end, kind, succ set]
    indirect: dict = field(default_factory=dict)
    thread_entries: set = field(default_factory=set)
    current: int | None = None


@dataclass
class ThreadContext:
    tid: int
    state: MachineState
    done: bool = False
    result: int = 0
    waiting_on: int | None = None
    trace_cache: TraceCache | None = None


@dataclass
class ExecResult:
    exit_code: int
    stdout: bytes
    steps: int
    traces: tr.TraceSet | None = None
    fault: Fault | None = None
    fault_detail: str = ""
    threads: int = 1  # guest threads created, including the main one

    @property
    def ok(self) -> bool:
        return self.fault is None


_INT_TOKEN = re.compile(rb"[+-]?[0-9]+")


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


def input_digest(stdin: bytes) -> str:
    return hashlib.sha256(stdin).hexdigest()


class _Machine:
    def __init__(self, program, stdin, tracing, quantum, step_limit, mem_size):
        self.program = program
        self.tracing = tracing
        self.quantum = quantum
        self.step_limit = step_limit
        self.mem_size = mem_size
        self.mem = bytearray(mem_size)
        for base, blob in ((program.text_base, program.text), (program.data_base, program.data)):
            if base + len(blob) > mem_size:
                raise VMFault(Fault.MEMORY, "segment does not fit in memory")
            self.mem[base:base + len(blob)] = blob
        self.tokens = stdin.split()
        self.stdout = bytearray()
        self.steps = 0
        self.threads: list[ThreadContext] = []
        self._code: dict[int, Instruction] = {}
        self._extent: dict[int, tuple[int, TerminatorKind]] = {}

    # decoding and block extents

    def fetch(self, pc: int) -> Instruction:
        ins = self._code.get(pc)
        if ins is None:
            if not self.program.in_text(pc):
                raise VMFault(Fault.PC, f"pc {pc:#x}")
            try:
                ins = self.program.instruction_at(pc)
            except DecodeError as e:
                raise VMFault(Fault.DECODE, f"{pc:#x}: {e}") from None
            self._code[pc] = ins
        return ins

    def extent(self, start: int) -> tuple[int, TerminatorKind]:
        """Block bounds as a block-at-a-time tracer sees them on entry."""
        hit = self._extent.get(start)
        if hit is None:
            end, kind = start, TerminatorKind.Fallthrough
            addr = start
            while True:
                ins = self.program.instruction_at(addr)
                end = addr
                if is_terminator(ins):
                    kind = classify_terminator(ins)
                    break
                nxt = addr + WORD
                if not self.program.in_text(nxt):
                    break
                try:
                    self.program.instruction_at(nxt)
                except DecodeError:
                    break
                addr = nxt
            hit = self._extent[start] = (end, kind)
        return hit

    # tracing hooks

    def enter_block(self, th: ThreadContext, start: int) -> None:
        cache = th.trace_cache
        cache.current = start
        if start not in cache.blocks:
            try:
                end, kind = self.extent(start)
            except DecodeError:
                return  # the fetch at ``start`` faults next
            cache.blocks[start] = [end, kind, set()]

    def leave_block(self, th: ThreadContext, site: int, ins: Instruction, target: int | None) -> None:
        cache = th.trace_cache
        if target is None:
            cache.current = None
            return
        if cache.current in cache.blocks:
            cache.blocks[cache.current][2].add(target)
        if ins.op in (Op.BR, Op.BLR, Op.RET):
            cache.indirect.setdefault(site, set()).add(target)
        self.enter_block(th, target)

    # threads

    def new_thread(self, entry: int, r0: int) -> ThreadContext:
        tid = len(self.threads)
        top = self.mem_size - tid * STACK_BAND
        if top - STACK_BAND < 0:
            raise VMFault(Fault.SYSCALL, "out of thread stacks")
        if not self.program.in_text(entry):
            raise VMFault(Fault.SYSCALL, f"thread entry {entry:#x} outside text")
        st = MachineState(mem=self.mem, pc=entry)
        st.regs[SP] = top
        st.regs[LR] = THREAD_EXIT
        st.regs[0] = r0 & MASK
        th = ThreadContext(tid, st, trace_cache=TraceCache() if self.tracing else None)
        self.threads.append(th)
        if self.tracing:
            if tid:
                th.trace_cache.thread_entries.add(entry)
            self.enter_block(th, entry)
        return th

    def syscall(self, th: ThreadContext, num: int) -> bool:
        """Run a syscall; returns True when the scheduler must switch."""
        regs = th.state.regs
        if num == SYS_EXIT:
            raise _Exit(regs[0] & 0xFF)
        if num == SYS_PUTINT:
            self.stdout += f"{signed(regs[0])}\n".encode()
        elif num == SYS_PUTCHAR:
            self.stdout.append(regs[0] & 0xFF)
        elif num == SYS_GETINT:
            value = 0
            if self.tokens:
                tok = self.tokens.pop(0)
                if _INT_TOKEN.fullmatch(tok):
                    value = int(tok)
            regs[0] = value & MASK
        elif num == SYS_SPAWN:
            child = self.new_thread(regs[0], regs[1])
            regs[0] = child.tid
            return True
        elif num == SYS_JOIN:
            tid = regs[0]
            if not 0 <= tid < len(self.threads) or tid == th.tid:
                raise VMFault(Fault.SYSCALL, f"join on bad tid {tid}")
            th.waiting_on = tid
            return True
        else:
            raise VMFault(Fault.SYSCALL, f"SVC {num}")
        return False

    def run_slice(self, th: ThreadContext) -> None:
        st = th.state
        tracing = self.tracing
        for _ in range(self.quantum):
            if self.steps >= self.step_limit:
                raise VMFault(Fault.STEP_LIMIT, f"{self.steps} steps")
            pc = st.pc
            ins = self.fetch(pc)
            self.steps += 1
            if ins.op is Op.SVC:
                st.pc = pc + WORD
                if ins.imm == SYS_EXIT and tracing:
                    self.leave_block(th, pc, ins, None)
                if self.syscall(th, ins.imm):
                    return
                continue
            step(st, ins)
            if is_terminator(ins):
                target = st.pc
                if ins.op is Op.RET and target == THREAD_EXIT:
                    if tracing:
                        self.leave_block(th, pc, ins, None)
                    th.done = True
                    th.result = st.regs[0]
                    if th.tid == 0:
                        raise _Exit(th.result & 0xFF)
                    return
                if tracing:
                    self.leave_block(th, pc, ins, target)

    def schedule(self) -> int:
        cur = 0
        while True:
            th = self.threads[cur]
            if th.waiting_on is not None:
                other = self.threads[th.waiting_on]
                if other.done:
                    th.state.regs[0] = other.result
                    th.waiting_on = None
            if not th.done and th.waiting_on is None:
                self.run_slice(th)
            n = len(self.threads)
            for k in range(1, n + 1):
                cand = self.threads[(cur + k) % n]
                if cand.done:
                    continue
                if cand.waiting_on is None or self.threads[cand.waiting_on].done:
                    cur = cand.tid
                    break
            else:
                raise VMFault(Fault.DEADLOCK, "no runnable thread")

    def traces(self, stdin: bytes) -> tr.TraceSet:
        digest = self.program.text_sha256()
        per_thread = []
        for th in self.threads:
            c = th.trace_cache
            blocks = {s: tr.BlockRecord(s, e, k, frozenset(succ)) for s, (e, k, succ) in c.blocks.items()}
            per_thread.append(tr.TraceSet(
                text_sha256=digest,
                blocks=blocks,
                indirect={k: frozenset(v) for k, v in c.indirect.items()},
                thread_entries=frozenset(c.thread_entries),
                runs=((input_digest(stdin), self.quantum),),
            ))
        return tr.merge(per_thread)


def run(program: Program, stdin: bytes = b"", tracing: bool = False,
        schedule_quantum: int = DEFAULT_QUANTUM, step_limit: int = DEFAULT_STEP_LIMIT,
        mem_size: int = MEM_SIZE) -> ExecResult:
    """Run ``program`` from its entry point until exit or fault."""
    if schedule_quantum < 1:
        raise ValueError("quantum must be >= 1")
    if isinstance(stdin, str):
        stdin = stdin.encode()
    m = _Machine(program, stdin, tracing, schedule_quantum, step_limit, mem_size)
    fault, detail, code = None, "", -1
    try:
        m.new_thread(program.entry, 0)
        m.schedule()
    except _Exit as e:
        code = e.code
    except VMFault as e:
        fault, detail = e.fault, e.detail
    traces = m.traces(stdin) if tracing and m.threads else None
    return ExecResult(exit_code=code, stdout=bytes(m.stdout), steps=m.steps,
                      traces=traces, fault=fault, fault_detail=detail, threads=len(m.threads))
