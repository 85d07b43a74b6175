"""C99 emission of lifted programs.

The output is one translation unit: a global register file, a byte array
holding guest memory (text, data and the emulated stacks), one
``void f_XXXXXXXX(void)`` per recovered function, a small runtime and a
``main`` that sets up memory and calls the entry function. Return
addresses live on the native stack; guest stack data lives in guest memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..vm import GUARD_EXIT, MEM_SIZE, MEMORY_TRAP_EXIT, STACK_BAND
from ..isa import Cond
from .interp import UNREACHABLE_EXIT
from .ir import BINARY_OPS, FLAGS, GuardMode, LiftedFunction, LiftedProgram, LiftError, func_name, is_temp

_C_BINOP = {"add": "+", "sub": "-", "mul": "*", "and": "&", "or": "|", "xor": "^"}
_COND_EXPR = {
    Cond.EQ: "{z}",
    Cond.NE: "({z} == 0u)",
    Cond.LT: "({n} != {v})",
    Cond.GE: "({n} == {v})",
    Cond.GT: "(({z} == 0u) && ({n} == {v}))",
    Cond.LE: "(({z} != 0u) || ({n} != {v}))",
}
_GLOBAL_EXPR = {**{f"g_r{i}": f"G.r[{i}]" for i in range(14)},
                "g_lr": "G.r[14]", "g_sp": "G.r[15]",
                "f_n": "G.n", "f_z": "G.z", "f_c": "G.c", "f_v": "G.v"}


@dataclass(frozen=True)
class EmittedSource:
    text: str
    manifest: dict = field(default_factory=dict)  # function entry -> emitted name


def _bytes_init(blob: bytes) -> str:
    rows = []
    for i in range(0, len(blob), 16):
        rows.append("    " + ", ".join(f"0x{b:02x}" for b in blob[i:i + 16]) + ",")
    return "\n".join(rows)


_RUNTIME = r"""
void rt_trap(int code)
{
    fflush(stdout);
    exit(code);
}

uint32_t rt_load(uint32_t a)
{
    if ((a & 3u) != 0u || a > MEM_SIZE - 4u)
        rt_trap(MEMORY_TRAP);
    return (uint32_t)M[a] | ((uint32_t)M[a + 1u] << 8) | ((uint32_t)M[a + 2u] << 16) | ((uint32_t)M[a + 3u] << 24);
}

void rt_store(uint32_t a, uint32_t v)
{
    if ((a & 3u) != 0u || a > MEM_SIZE - 4u)
        rt_trap(MEMORY_TRAP);
    M[a] = (uint8_t)(v & 0xffu);
    M[a + 1u] = (uint8_t)((v >> 8) & 0xffu);
    M[a + 2u] = (uint8_t)((v >> 16) & 0xffu);
    M[a + 3u] = (uint8_t)((v >> 24) & 0xffu);
}

void rt_putint(uint32_t x)
{
    if (x & 0x80000000u)
        printf("-%lu\n", (unsigned long)(~x + 1u));
    else
        printf("%lu\n", (unsigned long)x);
}

void rt_putchar(uint32_t x)
{
    putchar((int)(x & 0xffu));
}

static int rt_space(int ch)
{
    return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f';
}

uint32_t rt_getint(void)
{
    int ch, neg = 0, ok = 1, digits = 0;
    uint32_t val = 0u;
    do {
        ch = getchar();
    } while (ch != EOF && rt_space(ch));
    if (ch == EOF)
        return 0u;
    if (ch == '+' || ch == '-') {
        neg = ch == '-';
        ch = getchar();
    }
    while (ch != EOF && !rt_space(ch)) {
        if (ch >= '0' && ch <= '9') {
            val = val * 10u + (uint32_t)(ch - '0');
            digits++;
        } else {
            ok = 0;
        }
        ch = getchar();
    }
    if (!ok || digits == 0)
        return 0u;
    return neg ? 0u - val : val;
}

uint32_t rt_spawn(uint32_t entry, uint32_t arg)
{
    struct regs saved = G;
    uint32_t tid = rt_nthreads;
    if ((tid + 1u) * STACK_BAND > MEM_SIZE || tid >= MAX_THREADS)
        rt_trap(MEMORY_TRAP);
    rt_nthreads++;
    memset(&G, 0, sizeof G);
    G.r[0] = arg;
    G.r[15] = MEM_SIZE - tid * STACK_BAND;
    rt_run_thread(entry);
    rt_result[tid] = G.r[0];
    rt_done[tid] = 1;
    G = saved;
    return tid;
}

uint32_t rt_join(uint32_t tid)
{
    if (tid >= MAX_THREADS || !rt_done[tid])
        rt_trap(MEMORY_TRAP);
    return rt_result[tid];
}
"""


class _FunctionEmitter:
    def __init__(self, func: LiftedFunction, mode: GuardMode, use_locals: bool):
        self.func = func
        self.mode = mode
        self.localized = func.localized if use_locals else frozenset()
        self.lines: list[str] = []
        self.locals: set[str] = set()

    def var(self, v: str) -> str:
        if is_temp(v):
            self.locals.add(v)
            return v
        if v in self.localized:
            self.locals.add(v)
            return "l_" + v[2:]
        return _GLOBAL_EXPR[v]

    def out(self, text: str) -> None:
        self.lines.append("    " + text)

    def emit(self) -> list[str]:
        blocks = self.func.blocks
        if not blocks:
            raise LiftError(f"function {self.func.entry:#x} has no blocks")
        self.used_labels: set[str] = set()
        for i, b in enumerate(blocks):
            self.lines.append(("label", b.label))
            nxt = blocks[i + 1].label if i + 1 < len(blocks) else None
            for op in b.ops:
                self.emit_op(op, nxt)
        body = []
        for line in self.lines:
            if isinstance(line, tuple):
                if line[1] in self.used_labels:
                    body.append(f"{line[1]}:;")
            else:
                body.append(line)
        order = sorted(self.locals, key=_local_order)
        decl = [f"    uint32_t {self._cname(v)} = 0u;" for v in order]
        decl += [f"    (void){self._cname(v)};" for v in order]
        return [f"void {self.func.name}(void)", "{"] + decl + body + ["}"]

    def goto(self, label: str) -> str:
        self.used_labels.add(label)
        return f"goto {label};"

    def _cname(self, v: str) -> str:
        return v if is_temp(v) else "l_" + v[2:]

    def trap(self, code: int) -> str:
        return f"rt_trap({code});"

    def emit_op(self, op, next_label) -> None:
        k = op.op
        v = self.var
        if k == "movi":
            self.out(f"{v(op.dst)} = 0x{op.imm:08x}u;")
        elif k == "mov":
            self.out(f"{v(op.dst)} = {v(op.srcs[0])};")
        elif k in BINARY_OPS:
            a, b = v(op.srcs[0]), v(op.srcs[1])
            if k == "shl":
                expr = f"{a} << ({b} & 31u)"
            elif k == "shr":
                expr = f"{a} >> ({b} & 31u)"
            else:
                expr = f"{a} {_C_BINOP[k]} {b}"
            self.out(f"{v(op.dst)} = (uint32_t)({expr});")
        elif k == "setflags":
            n, z, c, fv = (v(f) for f in FLAGS)
            self.out(f"{{ uint32_t a_ = {v(op.srcs[0])}, b_ = {v(op.srcs[1])}, r_ = a_ - b_;")
            self.out(f"  {n} = r_ >> 31; {z} = (uint32_t)(r_ == 0u); {c} = (uint32_t)(a_ >= b_);")
            self.out(f"  {fv} = ((a_ ^ b_) & (a_ ^ r_)) >> 31; }}")
        elif k == "select_cond":
            n, z, _, fv = (v(f) for f in FLAGS)
            expr = _COND_EXPR[op.cond].format(n=n, z=z, v=fv)
            self.out(f"{v(op.dst)} = (uint32_t){expr};")
        elif k == "condjump":
            self.out(f"if ({v(op.srcs[0])} != 0u) {self.goto(op.target)}")
        elif k == "dirjump":
            if op.target != next_label:
                self.out(self.goto(op.target))
        elif k == "load":
            self.out(f"{v(op.dst)} = rt_load({v(op.srcs[0])} + 0x{op.imm:08x}u);")
        elif k == "store":
            self.out(f"rt_store({v(op.srcs[1])} + 0x{op.imm:08x}u, {v(op.srcs[0])});")
        elif k == "sys":
            r0, r1 = v("g_r0"), v("g_r1") if op.imm == 4 else None
            call = {1: f"rt_putint({r0});", 2: f"rt_putchar({r0});", 3: f"{r0} = rt_getint();",
                    4: f"{r0} = rt_spawn({r0}, {r1});", 5: f"{r0} = rt_join({r0});"}
            self.out(call.get(op.imm, self.trap(GUARD_EXIT)))
        elif k == "call":
            self.out(f"{func_name(op.target)}();")
        elif k == "tailcall":
            self.out(f"{func_name(op.target)}();")
            self.out("return;")
        elif k == "icall_dispatch":
            self.dispatch(v(op.srcs[0]), [(a, f"{func_name(t)}();") for a, t in op.cases])
        elif k == "ijump_dispatch":
            self.dispatch(v(op.srcs[0]), [(a, self.goto(label)) for a, label in op.cases])
        elif k == "ret":
            self.out("return;")
        elif k == "exit":
            self.out(f"rt_trap((int)({v('g_r0')} & 0xffu));")
        elif k == "guard":
            self.out(self.trap(GUARD_EXIT))
        elif k == "unreachable":
            self.out(self.trap(UNREACHABLE_EXIT))
        else:
            raise LiftError(f"no C lowering for micro-op {k}")

    def dispatch(self, value: str, cases) -> None:
        transparent = self.mode is GuardMode.Transparent and cases
        for i, (addr, stmt) in enumerate(cases):
            last = i == len(cases) - 1
            head = "if" if i == 0 else "else if"
            if transparent and last:
                self.out(stmt if i == 0 else f"else {stmt}")
            else:
                self.out(f"{head} ({value} == 0x{addr:08x}u) {stmt}")
        if not transparent:
            self.out(self.trap(GUARD_EXIT) if not cases else f"else {self.trap(GUARD_EXIT)}")


def _local_order(v: str):
    return (0, int(v[1:])) if is_temp(v) else (1, v)


def emit_source(lp: LiftedProgram, guard_mode: GuardMode | None = None,
                use_locals: bool = True, mem_size: int = MEM_SIZE) -> EmittedSource:
    """Render ``lp`` as a self-contained C99 program."""
    mode = GuardMode(guard_mode) if guard_mode is not None else lp.guard_mode
    if not lp.functions:
        raise LiftError("nothing to emit")
    funcs = sorted(lp.functions, key=lambda f: f.entry)
    out = [
        "/* Lifted MiniISA program; generated file. */",
        "#include <stdint.h>",
        "#include <stdio.h>",
        "#include <stdlib.h>",
        "#include <string.h>",
        "",
        f"#define MEM_SIZE 0x{mem_size:08x}u",
        f"#define STACK_BAND 0x{STACK_BAND:08x}u",
        f"#define MAX_THREADS {max(1, mem_size // STACK_BAND)}u",
        f"#define MEMORY_TRAP {MEMORY_TRAP_EXIT}",
        f"#define TEXT_BASE 0x{lp.text_base:08x}u",
        f"#define DATA_BASE 0x{lp.data_base:08x}u",
        "",
        "struct regs { uint32_t r[16]; uint32_t n, z, c, v; };",
        "struct regs G;",
        "uint8_t *M;",
        "uint32_t rt_nthreads = 1u;",
        "uint32_t rt_result[MAX_THREADS];",
        "int rt_done[MAX_THREADS];",
    ]
    if lp.text:
        out += ["const uint8_t guest_text[] = {", _bytes_init(lp.text), "};"]
    if lp.data:
        out += ["const uint8_t guest_data[] = {", _bytes_init(lp.data), "};"]
    out += ["", "void rt_trap(int code);", "uint32_t rt_load(uint32_t a);",
            "void rt_store(uint32_t a, uint32_t v);", "void rt_putint(uint32_t x);",
            "void rt_putchar(uint32_t x);", "uint32_t rt_getint(void);",
            "uint32_t rt_spawn(uint32_t entry, uint32_t arg);", "uint32_t rt_join(uint32_t tid);",
            "void rt_run_thread(uint32_t entry);"]
    out += [f"void {f.name}(void);" for f in funcs]
    out.append(_RUNTIME.rstrip("\n"))
    out += ["", "void rt_run_thread(uint32_t entry)", "{"]
    names = {f.entry for f in funcs}
    threads = [t for t in lp.thread_entries if t in names]
    for i, t in enumerate(threads):
        head = "if" if i == 0 else "else if"
        out.append(f"    {head} (entry == 0x{t:08x}u) {func_name(t)}();")
    out.append(f"    {'else ' if threads else ''}rt_trap({GUARD_EXIT});")
    if not threads:
        out.insert(len(out) - 1, "    (void)entry;")
    out.append("}")
    for f in funcs:
        out.append("")
        out += _FunctionEmitter(f, mode, use_locals).emit()
    out += [
        "",
        "int main(void)",
        "{",
        "    M = (uint8_t *)calloc(MEM_SIZE, 1);",
        "    if (M == NULL)",
        "        return MEMORY_TRAP;",
    ]
    if lp.text:
        out.append("    memcpy(M + TEXT_BASE, guest_text, sizeof guest_text);")
    if lp.data:
        out.append("    memcpy(M + DATA_BASE, guest_data, sizeof guest_data);")
    out += [
        "    G.r[15] = MEM_SIZE;",
        "    G.r[14] = 0u;",
        f"    {func_name(lp.entry)}();",
        "    fflush(stdout);",
        "    return (int)(G.r[0] & 0xffu);",
        "}",
    ]
    return EmittedSource("\n".join(out) + "\n", {f.entry: f.name for f in funcs})
