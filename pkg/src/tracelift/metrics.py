"""Instruction coverage, unique-gadget counts and code size."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .cfg import Cfg
from .isa import WORD, DecodeError, Op, Program, TerminatorKind, classify_terminator

GADGET_ENDS = (Op.RET, Op.BR, Op.BLR)
DEFAULT_MAX_LEN = 6


@dataclass(frozen=True)
class CoverageReport:
    lifted_instructions: int
    total_text_instructions: int

    @property
    def percent(self) -> float:
        if not self.total_text_instructions:
            return 0.0
        return 100.0 * self.lifted_instructions / self.total_text_instructions

    def to_dict(self) -> dict:
        return {"lifted_instructions": self.lifted_instructions,
                "total_text_instructions": self.total_text_instructions,
                "percent": round(self.percent, 2)}


@dataclass(frozen=True)
class GadgetReport:
    max_len: int
    gadgets: frozenset
    baseline_count: int | None = None

    @property
    def count(self) -> int:
        return len(self.gadgets)

    @property
    def percent_of_baseline(self) -> float | None:
        if self.baseline_count is None:
            return None
        if self.baseline_count == 0:
            return 100.0 if self.count == 0 else float("inf")
        return 100.0 * self.count / self.baseline_count

    def to_dict(self) -> dict:
        d = {"max_len": self.max_len, "count": self.count}
        if self.baseline_count is not None:
            d["baseline_count"] = self.baseline_count
            d["percent_of_baseline"] = round(self.percent_of_baseline, 2)
        return d


def coverage(cfg: Cfg, program: Program) -> CoverageReport:
    """Share of text instructions that lie inside some CFG node."""
    addrs = {a for n in cfg.nodes.values() for a in range(n.start, n.end + WORD, WORD)
             if program.in_text(a)}
    return CoverageReport(len(addrs), len(program.text) // WORD)


def _scan_class(program: Program, addr: int) -> str:
    """'end' for RET/BR/BLR, 'stop' for other transfers or junk, else 'body'."""
    try:
        ins = program.instruction_at(addr)
    except DecodeError:
        return "stop"
    if ins.op in GADGET_ENDS:
        return "end"
    if classify_terminator(ins) is not TerminatorKind.Fallthrough:
        return "stop"
    return "body"


def count_gadgets(program: Program, max_len: int = DEFAULT_MAX_LEN,
                  baseline: "GadgetReport | Program | None" = None) -> GadgetReport:
    """Unique byte sequences of at most ``max_len`` instructions ending in RET/BR/BLR.

    Instructions are fixed width, so gadgets can only start on word
    boundaries; a gadget may not contain another control transfer.
    """
    if max_len < 1:
        raise ValueError("max_len must be positive")
    n = len(program.text) // WORD
    cls = [_scan_class(program, program.text_base + i * WORD) for i in range(n)]
    found = set()
    for end in range(n):
        if cls[end] != "end":
            continue
        start = end
        while True:
            found.add(program.text[start * WORD:(end + 1) * WORD])
            if end - start + 1 >= max_len or start == 0 or cls[start - 1] != "body":
                break
            start -= 1
    base = None
    if isinstance(baseline, Program):
        base = count_gadgets(baseline, max_len).count
    elif isinstance(baseline, GadgetReport):
        base = baseline.count
    return GadgetReport(max_len, frozenset(found), base)


def code_size(program: Program) -> int:
    return len(program.text)


def report_dict(name: str, original: Program, cov: CoverageReport | None = None,
                debloated: Program | None = None, max_len: int = DEFAULT_MAX_LEN,
                extra: dict | None = None) -> dict:
    """Metrics for one program in the metrics.json layout."""
    orig_g = count_gadgets(original, max_len)
    d = {"program": name, "original": {"code_size": code_size(original), "gadgets": orig_g.count}}
    if cov is not None:
        d["coverage"] = cov.to_dict()
    if debloated is not None:
        g = count_gadgets(debloated, max_len, baseline=orig_g)
        d["debloated"] = {
            "code_size": code_size(debloated),
            "code_size_percent": round(100.0 * code_size(debloated) / max(1, code_size(original)), 2),
            "gadgets": g.count,
            "gadgets_percent": round(g.percent_of_baseline, 2),
        }
    d["max_len"] = max_len
    if extra:
        d.update(extra)
    return d


def dumps_metrics(d) -> str:
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


def format_table(rows: list[dict]) -> str:
    """Fixed-width table of per-program metrics dicts."""
    head = f"{'program':<14} {'cov%':>7} {'size':>6} {'size%':>7} {'gadgets':>8} {'gadg%':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cov = r.get("coverage", {}).get("percent")
        deb = r.get("debloated", {})
        lines.append(
            f"{r['program']:<14} {_num(cov):>7} {deb.get('code_size', r['original']['code_size']):>6} "
            f"{_num(deb.get('code_size_percent')):>7} {deb.get('gadgets', r['original']['gadgets']):>8} "
            f"{_num(deb.get('gadgets_percent')):>7}")
    return "\n".join(lines) + "\n"


def _num(x) -> str:
    return "-" if x is None else f"{x:.2f}"
