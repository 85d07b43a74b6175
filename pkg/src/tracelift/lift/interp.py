"""Reference interpreter for lifted micro-op programs.

It mirrors the C runtime: spawned threads run to completion at the spawn
point, traps exit with the runtime's codes, and a function's localized
registers live in its own frame. Calls to addresses that are not lifted
functions go to ``external``, which by default applies an ABI havoc: it
reports its arguments on stdout and scrambles every caller-saved register.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from ..vm import GUARD_EXIT, MASK, MEM_SIZE, MEMORY_TRAP_EXIT, STACK_BAND, compare_flags, cond_holds, signed
from ..isa import Cond
from .ir import FLAGS, GLOBALS, LiftedProgram, is_temp
from .liveness import CALL_CLOBBERS

UNREACHABLE_EXIT = 97
_INT_TOKEN = re.compile(rb"[+-]?[0-9]+")

_BINOPS = {
    "add": lambda a, b: (a + b) & MASK,
    "sub": lambda a, b: (a - b) & MASK,
    "mul": lambda a, b: (a * b) & MASK,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
    "shl": lambda a, b: (a << (b & 31)) & MASK,
    "shr": lambda a, b: a >> (b & 31),
}


class _Stop(Exception):
    def __init__(self, code: int):
        self.code = code


class InterpError(RuntimeError):
    pass


@dataclass
class Observation:
    exit_code: int
    stdout: bytes
    r0: int
    sp: int
    memory_sha256: str
    steps: int = 0
    returned: bool = True  # False after exit or a trap

    def key(self) -> tuple:
        # registers only survive a normal return; exit and traps end the process
        regs = (self.r0, self.sp) if self.returned else None
        return (self.exit_code, self.stdout, regs, self.memory_sha256)


def havoc_external(target: int, regs: dict, out: bytearray, counter: list) -> None:
    """ABI-conforming stand-in for an unknown callee."""
    args = " ".join(str(regs[v]) for v in ("g_r0", "g_r1", "g_r2", "g_r3", "g_sp"))
    out += f"ext {target:#x} {args}\n".encode()
    counter[0] += 1
    seed = counter[0]
    for i, v in enumerate(sorted(CALL_CLOBBERS)):
        regs[v] = ((seed * 2654435761 + i * 40503) & MASK) if v not in FLAGS else (seed + i) & 1


@dataclass
class _Frame:
    func: object
    labels: dict
    block: int = 0
    pc: int = 0
    locals: dict = field(default_factory=dict)
    then_return: bool = False  # resumed after a tail call
    thread: tuple | None = None  # (tid, saved globals, caller dst) for spawned threads


def run_lifted(lp: LiftedProgram, stdin: bytes = b"", use_locals: bool = True,
               mem_size: int = MEM_SIZE, step_limit: int = 10_000_000,
               entry: int | None = None, regs: dict | None = None,
               external=havoc_external) -> Observation:
    """Execute ``lp`` from ``entry`` (default: the program entry)."""
    if isinstance(stdin, str):
        stdin = stdin.encode()
    mem = bytearray(mem_size)
    for base, blob in ((lp.text_base, lp.text), (lp.data_base, lp.data)):
        mem[base:base + len(blob)] = blob
    g = {v: 0 for v in GLOBALS}
    g["g_sp"] = mem_size
    if regs:
        g.update(regs)
    funcs = {f.entry: f for f in lp.functions}
    tokens = stdin.split()
    out = bytearray()
    results = {}
    nthreads = [1]
    ext_counter = [0]
    steps = 0

    def frame_for(entry_addr):
        f = funcs[entry_addr]
        return _Frame(f, {b.label: i for i, b in enumerate(f.blocks)})

    def read(fr, v):
        if is_temp(v) or (use_locals and v in fr.func.localized):
            return fr.locals.get(v, 0)
        return g[v]

    def write(fr, v, value):
        if is_temp(v) or (use_locals and v in fr.func.localized):
            fr.locals[v] = value
        else:
            g[v] = value

    def load(addr):
        addr &= MASK
        if addr % 4 or addr + 4 > mem_size:
            raise _Stop(MEMORY_TRAP_EXIT)
        return int.from_bytes(mem[addr:addr + 4], "little")

    def store(addr, value):
        addr &= MASK
        if addr % 4 or addr + 4 > mem_size:
            raise _Stop(MEMORY_TRAP_EXIT)
        mem[addr:addr + 4] = (value & MASK).to_bytes(4, "little")

    start = lp.entry if entry is None else entry
    stack = [frame_for(start)]
    code = None
    returned = False
    try:
        while stack:
            fr = stack[-1]
            if fr.then_return:
                fr.then_return = False
                _return(stack, g, results, write)
                continue
            op = fr.func.blocks[fr.block].ops[fr.pc]
            fr.pc += 1
            steps += 1
            if steps > step_limit:
                raise InterpError("step limit exceeded")
            k = op.op
            if k == "movi":
                write(fr, op.dst, op.imm & MASK)
            elif k == "mov":
                write(fr, op.dst, read(fr, op.srcs[0]))
            elif k in _BINOPS:
                write(fr, op.dst, _BINOPS[k](read(fr, op.srcs[0]), read(fr, op.srcs[1])))
            elif k == "setflags":
                flags = compare_flags(read(fr, op.srcs[0]), read(fr, op.srcs[1]))
                for v, x in zip(FLAGS, flags):
                    write(fr, v, x)
            elif k == "select_cond":
                n, z, c, v = (read(fr, x) for x in FLAGS)
                write(fr, op.dst, int(cond_holds(Cond(op.cond), n, z, c, v)))
            elif k == "condjump":
                if read(fr, op.srcs[0]):
                    fr.block, fr.pc = fr.labels[op.target], 0
            elif k == "dirjump":
                fr.block, fr.pc = fr.labels[op.target], 0
            elif k == "load":
                write(fr, op.dst, load(read(fr, op.srcs[0]) + op.imm))
            elif k == "store":
                store(read(fr, op.srcs[1]) + op.imm, read(fr, op.srcs[0]))
            elif k == "sys":
                _sys(op.imm, fr, read, write, out, tokens, g, stack, funcs, frame_for,
                     results, nthreads, mem_size, lp)
            elif k in ("call", "tailcall"):
                if k == "tailcall":
                    fr.then_return = True
                if op.target in funcs:
                    stack.append(frame_for(op.target))
                else:
                    external(op.target, g, out, ext_counter)
            elif k == "icall_dispatch":
                value = read(fr, op.srcs[0])
                for old, callee in op.cases:
                    if value == old:
                        stack.append(frame_for(callee))
                        break
                else:
                    if lp.guard_mode.value == "transparent" and op.cases:
                        stack.append(frame_for(op.cases[-1][1]))
                    else:
                        raise _Stop(GUARD_EXIT)
            elif k == "ijump_dispatch":
                value = read(fr, op.srcs[0])
                for old, label in op.cases:
                    if value == old:
                        fr.block, fr.pc = fr.labels[label], 0
                        break
                else:
                    if lp.guard_mode.value == "transparent" and op.cases:
                        fr.block, fr.pc = fr.labels[op.cases[-1][1]], 0
                    else:
                        raise _Stop(GUARD_EXIT)
            elif k == "ret":
                _return(stack, g, results, write)
            elif k == "exit":
                raise _Stop(read(fr, "g_r0") & 0xFF)
            elif k == "guard":
                raise _Stop(GUARD_EXIT)
            elif k == "unreachable":
                raise _Stop(UNREACHABLE_EXIT)
            else:
                raise InterpError(f"unknown micro-op {k}")
        code = g["g_r0"] & 0xFF
        returned = True
    except _Stop as s:
        code = s.code
    return Observation(code, bytes(out), g["g_r0"], g["g_sp"],
                       hashlib.sha256(mem).hexdigest(), steps, returned)


def _return(stack, g, results, write) -> None:
    fr = stack.pop()
    if fr.thread is not None:
        tid, saved, dst_frame = fr.thread
        results[tid] = g["g_r0"]
        g.clear()
        g.update(saved)
        write(dst_frame, "g_r0", tid)


def _sys(num, fr, read, write, out, tokens, g, stack, funcs, frame_for, results, nthreads, mem_size, lp):
    if num == 1:
        out += f"{signed(read(fr, 'g_r0'))}\n".encode()
    elif num == 2:
        out.append(read(fr, "g_r0") & 0xFF)
    elif num == 3:
        value = 0
        if tokens:
            tok = tokens.pop(0)
            if _INT_TOKEN.fullmatch(tok):
                value = int(tok)
        write(fr, "g_r0", value & MASK)
    elif num == 4:
        target, arg = read(fr, "g_r0"), read(fr, "g_r1")
        tid = nthreads[0]
        if (tid + 1) * STACK_BAND > mem_size:
            raise _Stop(MEMORY_TRAP_EXIT)
        if target not in lp.thread_entries or target not in funcs:
            raise _Stop(GUARD_EXIT)
        nthreads[0] += 1
        saved = dict(g)
        for v in g:
            g[v] = 0
        g["g_r0"] = arg
        g["g_sp"] = mem_size - tid * STACK_BAND
        child = frame_for(target)
        child.thread = (tid, saved, fr)
        stack.append(child)
    elif num == 5:
        tid = read(fr, "g_r0")
        if tid not in results:
            raise _Stop(MEMORY_TRAP_EXIT)
        write(fr, "g_r0", results[tid])
    else:
        raise _Stop(GUARD_EXIT)
