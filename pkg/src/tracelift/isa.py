"""MiniISA: a fixed-width 32-bit RISC instruction set, its encoding, the MVB
container, and a two-pass assembler/disassembler.

Word layout (opcode always in bits 31..24)::

    R       rd[23:20] rs1[19:16] rs2[15:12]
    I       rd[23:20] rs1[19:16] simm16[15:0]
    B.cond  cond[23:20] simm20[19:0]
    B/BL    simm24[23:0]
    BR/BLR  rs1[23:20]
    SVC     imm8[7:0]

Unused fields must be zero, which makes decode/encode a bijection on the
set of valid words. Branch offsets count words from the branch itself.
"""

from __future__ import annotations

import enum
import hashlib
import re
import struct
from dataclasses import dataclass, field

LR = 14
SP = 15
WORD = 4

DEFAULT_TEXT_BASE = 0x1000
MVB_MAGIC = b"MVB1"
MVB_VERSION = 1
_MVB_HEADER = struct.Struct("<4sIIIIII")


class Op(enum.IntEnum):
    MOVI = 0x01
    MOV = 0x02
    ADD = 0x03
    SUB = 0x04
    MUL = 0x05
    AND = 0x06
    ORR = 0x07
    XOR = 0x08
    SHL = 0x09
    SHR = 0x0A
    CMP = 0x0B
    ADDI = 0x0C
    LDR = 0x10
    STR = 0x11
    B = 0x20
    BCOND = 0x21
    BL = 0x22
    BR = 0x23
    BLR = 0x24
    RET = 0x25
    SVC = 0x30


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    GE = 3
    GT = 4
    LE = 5


class TerminatorKind(enum.Enum):
    Fallthrough = "Fallthrough"
    DirectJump = "DirectJump"
    DirectCondJump = "DirectCondJump"
    DirectCall = "DirectCall"
    IndirectJump = "IndirectJump"
    IndirectCall = "IndirectCall"
    Return = "Return"
    SyscallExit = "SyscallExit"


ALU_OPS = (Op.ADD, Op.SUB, Op.MUL, Op.AND, Op.ORR, Op.XOR, Op.SHL, Op.SHR)
_R3 = set(ALU_OPS)
_I_FMT = {Op.MOVI, Op.ADDI, Op.LDR, Op.STR}

MNEMONIC = {op: op.name for op in Op}
MNEMONIC[Op.BCOND] = "B.cond"


class DecodeError(ValueError):
    pass


class AsmError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value & (1 << (bits - 1)) else value


def fits_signed(value: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


@dataclass(frozen=True)
class Instruction:
    op: Op
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    cond: Cond | None = None

    def __post_init__(self):
        for r in (self.rd, self.rs1, self.rs2):
            if not 0 <= r <= 15:
                raise ValueError(f"register id out of range: {r}")
        width = IMM_WIDTH.get(self.op)
        if width is not None:
            ok = 0 <= self.imm < 256 if self.op is Op.SVC else fits_signed(self.imm, width)
            if not ok:
                raise ValueError(f"{MNEMONIC[self.op]} immediate out of range: {self.imm}")
        if (self.op is Op.BCOND) != (self.cond is not None):
            raise ValueError("condition code required exactly for B.cond")

    @property
    def kind(self) -> TerminatorKind:
        return classify_terminator(self)

    def branch_target(self, addr: int) -> int:
        """Absolute target of a direct branch located at ``addr``."""
        return addr + WORD * self.imm

    def __str__(self) -> str:
        return format_instruction(self)


IMM_WIDTH = {Op.MOVI: 16, Op.ADDI: 16, Op.LDR: 16, Op.STR: 16,
             Op.BCOND: 20, Op.B: 24, Op.BL: 24, Op.SVC: 8}

_KIND = {
    Op.B: TerminatorKind.DirectJump,
    Op.BCOND: TerminatorKind.DirectCondJump,
    Op.BL: TerminatorKind.DirectCall,
    Op.BR: TerminatorKind.IndirectJump,
    Op.BLR: TerminatorKind.IndirectCall,
    Op.RET: TerminatorKind.Return,
}


def classify_terminator(ins: Instruction) -> TerminatorKind:
    if ins.op is Op.SVC and ins.imm == 0:
        return TerminatorKind.SyscallExit
    return _KIND.get(ins.op, TerminatorKind.Fallthrough)


def is_terminator(ins: Instruction) -> bool:
    return classify_terminator(ins) is not TerminatorKind.Fallthrough


def encode(ins: Instruction) -> int:
    op = ins.op
    w = int(op) << 24
    if op in _R3 or op in (Op.MOV, Op.CMP):
        w |= ins.rd << 20 | ins.rs1 << 16 | ins.rs2 << 12
    elif op in _I_FMT:
        w |= ins.rd << 20 | ins.rs1 << 16 | (ins.imm & 0xFFFF)
    elif op is Op.BCOND:
        w |= int(ins.cond) << 20 | (ins.imm & 0xFFFFF)
    elif op in (Op.B, Op.BL):
        w |= ins.imm & 0xFFFFFF
    elif op in (Op.BR, Op.BLR):
        w |= ins.rs1 << 20
    elif op is Op.SVC:
        w |= ins.imm & 0xFF
    return w


def decode(word: int) -> Instruction:
    """Decode one word; raises DecodeError unless encode(result) == word."""
    try:
        op = Op(word >> 24 & 0xFF)
    except ValueError:
        raise DecodeError(f"unknown opcode in word {word:#010x}") from None
    a, b, c = word >> 20 & 0xF, word >> 16 & 0xF, word >> 12 & 0xF
    if op in _R3:
        ins = Instruction(op, rd=a, rs1=b, rs2=c)
    elif op is Op.MOV:
        ins = Instruction(op, rd=a, rs1=b)
    elif op is Op.CMP:
        ins = Instruction(op, rs1=b, rs2=c)
    elif op is Op.MOVI:
        ins = Instruction(op, rd=a, imm=sext(word, 16))
    elif op in _I_FMT:
        ins = Instruction(op, rd=a, rs1=b, imm=sext(word, 16))
    elif op is Op.BCOND:
        if a > max(Cond):
            raise DecodeError(f"bad condition code in word {word:#010x}")
        ins = Instruction(op, cond=Cond(a), imm=sext(word, 20))
    elif op in (Op.B, Op.BL):
        ins = Instruction(op, imm=sext(word, 24))
    elif op in (Op.BR, Op.BLR):
        ins = Instruction(op, rs1=a)
    elif op is Op.RET:
        ins = Instruction(op)
    else:
        ins = Instruction(op, imm=word & 0xFF)
    if encode(ins) != word:
        raise DecodeError(f"non-zero reserved bits in word {word:#010x}")
    return ins


# ---------------------------------------------------------------- programs


@dataclass(frozen=True)
class Program:
    entry: int
    text: bytes
    text_base: int = DEFAULT_TEXT_BASE
    data: bytes = b""
    data_base: int | None = None
    _decoded: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.data_base is None:
            object.__setattr__(self, "data_base", default_data_base(self.text_base, len(self.text)))
        if len(self.text) % WORD or self.text_base % WORD:
            raise ValueError("text must be word aligned")
        if self.text and not (self.text_base <= self.entry < self.text_end and self.entry % WORD == 0):
            raise ValueError(f"entry {self.entry:#x} outside text")
        if self.data and self.text:
            if self.data_base < self.text_end and self.text_base < self.data_base + len(self.data):
                raise ValueError("text and data segments overlap")

    @property
    def text_end(self) -> int:
        return self.text_base + len(self.text)

    @property
    def n_instructions(self) -> int:
        return len(self.text) // WORD

    def in_text(self, addr: int) -> bool:
        return self.text_base <= addr < self.text_end and addr % WORD == 0

    def word_at(self, addr: int) -> int:
        off = addr - self.text_base
        return int.from_bytes(self.text[off:off + WORD], "little")

    def instruction_at(self, addr: int) -> Instruction:
        """Decoded instruction at ``addr``; DecodeError if outside text or invalid."""
        ins = self._decoded.get(addr)
        if ins is None:
            if not self.in_text(addr):
                raise DecodeError(f"address {addr:#x} outside text")
            ins = decode(self.word_at(addr))
            self._decoded[addr] = ins
        return ins

    def addresses(self):
        return range(self.text_base, self.text_end, WORD)

    def text_sha256(self) -> str:
        return hashlib.sha256(self.text_base.to_bytes(4, "little") + self.text).hexdigest()

    # MVB container

    def to_bytes(self) -> bytes:
        header = _MVB_HEADER.pack(MVB_MAGIC, MVB_VERSION, self.entry, self.text_base,
                                  len(self.text), self.data_base, len(self.data))
        return header + self.text + self.data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Program":
        if len(blob) < _MVB_HEADER.size:
            raise ValueError("truncated MVB header")
        magic, version, entry, tbase, tsize, dbase, dsize = _MVB_HEADER.unpack_from(blob)
        if magic != MVB_MAGIC or version != MVB_VERSION:
            raise ValueError("not an MVB1 file")
        body = blob[_MVB_HEADER.size:]
        if len(body) != tsize + dsize:
            raise ValueError("MVB segment sizes do not match file length")
        return cls(entry=entry, text=body[:tsize], text_base=tbase,
                   data=body[tsize:], data_base=dbase)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Program":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def default_data_base(text_base: int, text_size: int) -> int:
    end = text_base + text_size
    return (end + 0xFF) & ~0xFF


def words_to_text(words) -> bytes:
    return b"".join(w.to_bytes(4, "little") for w in words)


# --------------------------------------------------------------- assembler

REG_NAMES = {f"r{i}": i for i in range(16)}
REG_NAMES.update(lr=LR, sp=SP)
_REG_PRINT = [f"r{i}" for i in range(14)] + ["lr", "sp"]

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_MEM_RE = re.compile(r"^\[\s*(\w+)\s*(?:,\s*#?\s*([^\]]+?))?\s*\]$")


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _parse_int(tok: str) -> int | None:
    try:
        return int(tok.replace("#", "").strip(), 0)
    except ValueError:
        return None


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == ";" and not in_str:
            return line[:i]
    return line


@dataclass
class _Stmt:
    line: int
    section: str
    addr: int
    kind: str  # "ins" or a data directive
    mnemonic: str
    operands: list


def assemble(source: str) -> Program:
    """Assemble MiniISA source into a Program.

    Branch operands are labels or signed word offsets (``B +3``); ``MOVI``
    and ``.word`` also accept labels, resolved to absolute addresses.
    """
    stmts, labels = [], {}
    bases = {"text": DEFAULT_TEXT_BASE, "data": None}
    sizes = {"text": 0, "data": 0}
    pending: list[tuple[str, str, int]] = []
    section = "text"
    entry_tok = None

    for lineno, raw in enumerate(source.splitlines(), 1):
        line = _strip_comment(raw).strip()
        while (m := _LABEL_RE.match(line)):
            name = m.group(1)
            if name in labels or any(p[0] == name for p in pending):
                raise AsmError(f"duplicate label {name!r}", lineno)
            pending.append((name, section, sizes[section]))
            line = line[m.end():].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        head_l = head.lower()
        if head_l in (".text", ".data"):
            section = head_l[1:]
            if rest.strip():
                base = _parse_int(rest)
                if base is None or base % WORD:
                    raise AsmError(f"bad section base {rest.strip()!r}", lineno)
                bases[section] = base
            # labels before a section switch belong to the new section start
            pending = [(n, section, sizes[section]) for n, _, _ in pending]
            continue
        if head_l == ".entry":
            entry_tok = (rest.strip(), lineno)
            continue
        for name, sec, off in pending:
            labels[name] = (sec, off)
        pending = []
        if head_l in (".word", ".byte", ".space", ".ascii", ".align"):
            ops = [rest.strip()] if head_l == ".ascii" else _split_operands(rest)
            stmt = _Stmt(lineno, section, sizes[section], head_l, head_l, ops)
            sizes[section] += _data_size(stmt, sizes[section])
        else:
            if section != "text":
                raise AsmError("instruction outside .text", lineno)
            stmt = _Stmt(lineno, section, sizes[section], "ins", head, _split_operands(rest))
            sizes[section] += WORD
        stmts.append(stmt)
    for name, sec, off in pending:
        labels[name] = (sec, off)

    text_base = bases["text"]
    data_base = bases["data"]
    if data_base is None:
        data_base = default_data_base(text_base, sizes["text"])
    seg_base = {"text": text_base, "data": data_base}
    abs_labels = {n: seg_base[s] + off for n, (s, off) in labels.items()}

    text = bytearray()
    data = bytearray()
    for st in stmts:
        here = seg_base[st.section] + st.addr
        if st.kind == "ins":
            ins = _assemble_ins(st, here, abs_labels)
            text += encode(ins).to_bytes(4, "little")
        else:
            out = text if st.section == "text" else data
            out += _data_bytes(st, abs_labels, len(out))

    if entry_tok is None:
        entry = text_base
    else:
        tok, lineno = entry_tok
        entry = abs_labels.get(tok, _parse_int(tok))
        if entry is None:
            raise AsmError(f"undefined label {tok!r}", lineno)
    try:
        return Program(entry=entry, text=bytes(text), text_base=text_base,
                       data=bytes(data), data_base=data_base)
    except ValueError as e:
        raise AsmError(str(e), entry_tok[1] if entry_tok else 0) from None


def _data_size(st: _Stmt, offset: int) -> int:
    if st.kind == ".word":
        return WORD * len(st.operands)
    if st.kind == ".byte":
        return len(st.operands)
    if st.kind == ".space":
        n = _parse_int(st.operands[0]) if st.operands else None
        if n is None or n < 0:
            raise AsmError("bad .space size", st.line)
        return n
    if st.kind == ".align":
        n = _parse_int(st.operands[0]) if st.operands else None
        if not n or n & (n - 1):
            raise AsmError("bad .align", st.line)
        return -offset % n
    return len(_ascii(st))


def _ascii(st: _Stmt) -> bytes:
    tok = st.operands[0]
    if len(tok) < 2 or tok[0] != '"' or tok[-1] != '"':
        raise AsmError("expected quoted string", st.line)
    return tok[1:-1].encode("latin-1").decode("unicode_escape").encode("latin-1")


def _value(tok: str, labels: dict, line: int) -> int:
    v = _parse_int(tok)
    if v is None:
        if tok not in labels:
            raise AsmError(f"undefined label {tok!r}", line)
        v = labels[tok]
    return v


def _data_bytes(st: _Stmt, labels: dict, offset: int) -> bytes:
    if st.kind == ".word":
        return b"".join((_value(t, labels, st.line) & 0xFFFFFFFF).to_bytes(4, "little")
                        for t in st.operands)
    if st.kind == ".byte":
        vals = [_value(t, labels, st.line) for t in st.operands]
        if any(not -128 <= v < 256 for v in vals):
            raise AsmError("byte out of range", st.line)
        return bytes(v & 0xFF for v in vals)
    if st.kind in (".space", ".align"):
        return bytes(_data_size(st, offset))
    return _ascii(st)


def _reg(tok: str, line: int) -> int:
    r = REG_NAMES.get(tok.strip().lower())
    if r is None:
        raise AsmError(f"bad register {tok!r}", line)
    return r


def _assemble_ins(st: _Stmt, here: int, labels: dict) -> Instruction:
    mn = st.mnemonic.upper()
    ops = st.operands
    line = st.line

    def want(n):
        if len(ops) != n:
            raise AsmError(f"{mn} expects {n} operand(s), got {len(ops)}", line)

    def imm(tok, bits, absolute_labels=True):
        v = _parse_int(tok)
        if v is None:
            if tok not in labels:
                raise AsmError(f"undefined label {tok!r}", line)
            v = labels[tok] if absolute_labels else (labels[tok] - here) // WORD
        if not fits_signed(v, bits):
            raise AsmError(f"immediate out of range: {tok}", line)
        return v

    cond = None
    if mn.startswith("B.") and mn != "B.COND":
        try:
            cond = Cond[mn[2:]]
        except KeyError:
            raise AsmError(f"unknown mnemonic {st.mnemonic!r}", line) from None
        mn = "BCOND"
    try:
        op = Op[mn]
    except KeyError:
        raise AsmError(f"unknown mnemonic {st.mnemonic!r}", line) from None
    if op is Op.BCOND and cond is None:
        raise AsmError("B.cond needs a condition suffix", line)

    if op in _R3:
        want(3)
        return Instruction(op, _reg(ops[0], line), _reg(ops[1], line), _reg(ops[2], line))
    if op is Op.MOV:
        want(2)
        return Instruction(op, rd=_reg(ops[0], line), rs1=_reg(ops[1], line))
    if op is Op.CMP:
        want(2)
        return Instruction(op, rs1=_reg(ops[0], line), rs2=_reg(ops[1], line))
    if op is Op.MOVI:
        want(2)
        return Instruction(op, rd=_reg(ops[0], line), imm=imm(ops[1], 16))
    if op is Op.ADDI:
        want(3)
        return Instruction(op, _reg(ops[0], line), _reg(ops[1], line), imm=imm(ops[2], 16))
    if op in (Op.LDR, Op.STR):
        want(2)
        m = _MEM_RE.match(ops[1])
        if not m:
            raise AsmError(f"bad memory operand {ops[1]!r}", line)
        off = imm(m.group(2), 16) if m.group(2) else 0
        return Instruction(op, rd=_reg(ops[0], line), rs1=_reg(m.group(1), line), imm=off)
    if op in (Op.B, Op.BL, Op.BCOND):
        want(1)
        bits = 20 if op is Op.BCOND else 24
        return Instruction(op, imm=imm(ops[0], bits, absolute_labels=False), cond=cond)
    if op in (Op.BR, Op.BLR):
        want(1)
        return Instruction(op, rs1=_reg(ops[0], line))
    if op is Op.RET:
        want(0)
        return Instruction(op)
    want(1)
    v = _parse_int(ops[0])
    if v is None or not 0 <= v < 256:
        raise AsmError(f"bad SVC number {ops[0]!r}", line)
    return Instruction(op, imm=v)


def format_instruction(ins: Instruction) -> str:
    op = ins.op
    r = _REG_PRINT
    if op in _R3:
        return f"{op.name} {r[ins.rd]}, {r[ins.rs1]}, {r[ins.rs2]}"
    if op is Op.MOV:
        return f"MOV {r[ins.rd]}, {r[ins.rs1]}"
    if op is Op.CMP:
        return f"CMP {r[ins.rs1]}, {r[ins.rs2]}"
    if op is Op.MOVI:
        return f"MOVI {r[ins.rd]}, {ins.imm}"
    if op is Op.ADDI:
        return f"ADDI {r[ins.rd]}, {r[ins.rs1]}, {ins.imm}"
    if op in (Op.LDR, Op.STR):
        return f"{op.name} {r[ins.rd]}, [{r[ins.rs1]}, #{ins.imm}]"
    if op in (Op.B, Op.BL):
        return f"{op.name} {ins.imm:+d}"
    if op is Op.BCOND:
        return f"B.{ins.cond.name} {ins.imm:+d}"
    if op in (Op.BR, Op.BLR):
        return f"{op.name} {r[ins.rs1]}"
    if op is Op.RET:
        return "RET"
    return f"SVC {ins.imm}"


def disassemble(program: Program) -> str:
    """Listing that reassembles to an identical Program."""
    lines = [f".text {program.text_base:#x}", f".entry {program.entry:#x}"]
    for addr in program.addresses():
        try:
            ins = program.instruction_at(addr)
        except DecodeError as e:
            raise DecodeError(f"{addr:#x}: {e}") from None
        text = format_instruction(ins)
        if ins.op in (Op.B, Op.BL, Op.BCOND):
            text = f"{text:<24}; -> {ins.branch_target(addr):#x}"
        lines.append(f"    {text}")
    lines.append(f".data {program.data_base:#x}")
    for i in range(0, len(program.data), 16):
        chunk = program.data[i:i + 16]
        lines.append("    .byte " + ", ".join(f"{b:#04x}" for b in chunk))
    return "\n".join(lines) + "\n"
