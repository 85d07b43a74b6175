"""Command-line driver: one subcommand per pipeline stage plus ``debloat``.

Exit status is 0 on success, 1 for usage errors and 2 when a stage fails.
``run`` reports the guest's own exit code on stderr; pass ``--propagate``
to make it the process status instead.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import cfg as cfgmod
from . import metrics, structure, trace, vm
from .isa import AsmError, DecodeError, Program, assemble, disassemble
from .lift import GuardMode, LiftError, dump_lifted, lift_program
from .lift.emit_c import emit_source
from .lift.rewrite import RewriteError, rewrite_binary

MEM_ENV = "TRACELIFT_MEM_SIZE"
BACKENDS = ("source", "rewriter", "both")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    strategy: str = "ds2"
    guard: str = "failsafe"
    backend: str = "both"
    quantum: int = vm.DEFAULT_QUANTUM
    step_limit: int = vm.DEFAULT_STEP_LIMIT
    mem_size: int = vm.MEM_SIZE
    max_len: int = metrics.DEFAULT_MAX_LEN
    localize: bool = True
    out_dir: str | None = None
    inputs: list = field(default_factory=list)

    def validate(self) -> None:
        try:
            cfgmod.ExpansionStrategy(self.strategy)
            GuardMode(self.guard)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if self.backend not in BACKENDS:
            raise UsageError(f"backend must be one of {', '.join(BACKENDS)}")
        if self.quantum < 1 or self.step_limit < 1 or self.max_len < 1:
            raise UsageError("quantum, step_limit and max_len must be positive")
        if self.mem_size < vm.STACK_BAND or self.mem_size % vm.STACK_BAND:
            raise UsageError(f"mem_size must be a positive multiple of {vm.STACK_BAND:#x}")
        for p in self.inputs:
            if not Path(p).is_file():
                raise UsageError(f"input file not found: {p}")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s}")


def read_config(path) -> dict:
    """key=value lines; '#' starts a comment."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key == "inputs":
                out[key] = [v for v in value.split(",") if v]
            elif types[key] == "int":
                out[key] = int(value, 0)
            elif types[key] == "bool":
                out[key] = _parse_bool(value)
            else:
                out[key] = value
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: {e}") from None
    return out


def default_mem_size() -> int:
    raw = os.environ.get(MEM_ENV)
    if not raw:
        return vm.MEM_SIZE
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"{MEM_ENV} must be an integer, got {raw!r}") from None


def build_config(args) -> PipelineConfig:
    values = {"mem_size": default_mem_size()}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for f in fields(PipelineConfig):
        flag = getattr(args, f.name, None)
        if flag is not None and flag != []:
            values[f.name] = flag
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers


def load_program(path) -> Program:
    path = Path(path)
    try:
        if path.suffix == ".s":
            return assemble(path.read_text())
        return Program.load(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except AsmError as e:
        raise StageError("asm", f"{path}: {e}") from None
    except (ValueError, DecodeError) as e:
        raise StageError("load", f"{path}: {e}") from None


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise StageError("load", f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def read_inputs(files, texts) -> list[bytes]:
    out = [Path(f).read_bytes() for f in files or []]
    out += [t.encode() for t in texts or []]
    return out or [b""]


def trace_inputs(program: Program, inputs, conf: PipelineConfig) -> trace.TraceSet:
    sets = []
    for i, data in enumerate(inputs):
        r = vm.run(program, data, tracing=True, schedule_quantum=conf.quantum,
                   step_limit=conf.step_limit, mem_size=conf.mem_size)
        if r.fault is not None:
            raise StageError("trace", f"input #{i}: {r.fault.value}: {r.fault_detail}")
        sets.append(r.traces)
    return trace.merge(sets)


def load_cfg_or_trace(path, program: Program) -> cfgmod.Cfg:
    d = read_json(path)
    try:
        if d.get("format") == trace.TRACE_FORMAT:
            t = trace.trace_from_dict(d)
            if t.text_sha256 != program.text_sha256():
                raise StageError("expand", f"{path}: trace was recorded on a different binary")
            return cfgmod.build_cfg(t, program)
        return cfgmod.cfg_from_dict(d, program)
    except (trace.TraceError, cfgmod.CfgError, KeyError) as e:
        raise StageError("cfg", f"{path}: {e}") from None


def load_structure(path, program: Program) -> structure.StructuredProgram:
    try:
        return structure.structure_from_dict(read_json(path), program)
    except (ValueError, KeyError, cfgmod.CfgError) as e:
        raise StageError("structure", f"{path}: {e}") from None


# ---------------------------------------------------------------- stages


def debloat(program: Program, inputs, conf: PipelineConfig, name: str = "prog") -> dict:
    """Full pipeline; returns {artifact name: text or Program, 'metrics': dict}."""
    ts = trace_inputs(program, inputs, conf)
    try:
        c = cfgmod.expand(cfgmod.build_cfg(ts, program), program, conf.strategy)
    except cfgmod.CfgError as e:
        raise StageError("cfg", str(e)) from None
    sp = structure.structure(c)
    out = {"trace": ts, "cfg": c, "structure": sp}
    mode = GuardMode(conf.guard)
    debloated = None
    try:
        if conf.backend in ("source", "both"):
            lp = lift_program(sp, program, mode, localize=conf.localize)
            out["source"] = emit_source(lp, mode, mem_size=conf.mem_size).text
        if conf.backend in ("rewriter", "both"):
            debloated = rewrite_binary(sp, program, mode)
            out["binary"] = debloated
    except LiftError as e:
        raise StageError("lift", str(e)) from None
    except RewriteError as e:
        raise StageError("rewrite", str(e)) from None
    out["metrics"] = metrics.report_dict(
        name, program, metrics.coverage(c, program), debloated, conf.max_len,
        extra={"strategy": conf.strategy, "guard": conf.guard, "backend": conf.backend,
               "guard_sites": len(c.guard_sites), "functions": len(sp.partition.func_entries)})
    return out


def cmd_asm(args, conf):
    try:
        prog = assemble(Path(args.source).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {args.source}") from None
    except AsmError as e:
        raise StageError("asm", f"{args.source}: {e}") from None
    out = args.output or str(Path(args.source).with_suffix(".mvb"))
    prog.save(out)
    return 0


def cmd_dis(args, conf):
    write_text(args.output, disassemble(load_program(args.program)))
    return 0


def cmd_run(args, conf):
    prog = load_program(args.program)
    data = read_inputs(args.input, args.input_text)[0]
    r = vm.run(prog, data, schedule_quantum=conf.quantum, step_limit=conf.step_limit,
               mem_size=conf.mem_size)
    sys.stdout.buffer.write(r.stdout)
    sys.stdout.flush()
    if r.fault is not None:
        raise StageError("run", f"{r.fault.value}: {r.fault_detail}")
    print(f"guest exit code: {r.exit_code}", file=sys.stderr)
    return r.exit_code if args.propagate else 0


def cmd_trace(args, conf):
    prog = load_program(args.program)
    ts = trace_inputs(prog, read_inputs(args.input, args.input_text), conf)
    write_text(args.output, trace.dumps_trace(ts))
    return 0


def cmd_merge(args, conf):
    sets = []
    for p in args.traces:
        try:
            sets.append(trace.trace_from_dict(read_json(p)))
        except trace.TraceError as e:
            raise StageError("merge", f"{p}: {e}") from None
    try:
        merged = trace.merge(sets)
    except trace.TraceError as e:
        raise StageError("merge", str(e)) from None
    write_text(args.output, trace.dumps_trace(merged))
    return 0


def cmd_expand(args, conf):
    prog = load_program(args.program)
    c = load_cfg_or_trace(args.input, prog)
    c = cfgmod.expand(c, prog, conf.strategy)
    write_text(args.output, cfgmod.dumps_cfg(c))
    if args.dot:
        Path(args.dot).write_text(cfgmod.cfg_to_dot(c))
    return 0


def cmd_structure(args, conf):
    prog = load_program(args.program)
    sp = structure.structure(load_cfg_or_trace(args.cfg, prog))
    write_text(args.output, structure.dumps_structure(sp))
    return 0


def cmd_lift(args, conf):
    prog = load_program(args.program)
    sp = load_structure(args.structure, prog)
    mode = GuardMode(conf.guard)
    try:
        lp = lift_program(sp, prog, mode, localize=conf.localize)
        src = emit_source(lp, mode, mem_size=conf.mem_size)
    except LiftError as e:
        raise StageError("lift", str(e)) from None
    write_text(args.output, src.text)
    if args.ir:
        Path(args.ir).write_text(dump_lifted(lp))
    return 0


def cmd_rewrite(args, conf):
    prog = load_program(args.program)
    sp = load_structure(args.structure, prog)
    try:
        out = rewrite_binary(sp, prog, GuardMode(conf.guard))
    except RewriteError as e:
        raise StageError("rewrite", str(e)) from None
    out.save(args.output)
    return 0


def cmd_debloat(args, conf):
    prog = load_program(args.program)
    inputs = read_inputs(conf.inputs, args.input_text)
    stem = Path(args.program).stem
    out_dir = Path(conf.out_dir or Path(args.program).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = debloat(prog, inputs, conf, name=stem)
    if "binary" in res:
        res["binary"].save(out_dir / f"{stem}.debloated.mvb")
    if "source" in res:
        (out_dir / f"{stem}.lifted.c").write_text(res["source"])
    (out_dir / "metrics.json").write_text(metrics.dumps_metrics(res["metrics"]))
    if args.keep_intermediate:
        trace.save(res["trace"], out_dir / f"{stem}.trace.json")
        (out_dir / f"{stem}.cfg.json").write_text(cfgmod.dumps_cfg(res["cfg"]))
        (out_dir / f"{stem}.structure.json").write_text(structure.dumps_structure(res["structure"]))
    sys.stdout.write(metrics.format_table([res["metrics"]]))
    return 0


def cmd_coverage(args, conf):
    prog = load_program(args.program)
    c = load_cfg_or_trace(args.cfg, prog)
    rep = metrics.coverage(c, prog)
    write_text(args.output, metrics.dumps_metrics(rep.to_dict()))
    return 0


def cmd_gadgets(args, conf):
    prog = load_program(args.program)
    base = load_program(args.baseline) if args.baseline else None
    rep = metrics.count_gadgets(prog, conf.max_len, baseline=base)
    write_text(args.output, metrics.dumps_metrics(rep.to_dict()))
    return 0


def cmd_size(args, conf):
    prog = load_program(args.program)
    d = {"code_size": metrics.code_size(prog)}
    if args.baseline:
        base = metrics.code_size(load_program(args.baseline))
        d["baseline_code_size"] = base
        d["percent_of_baseline"] = round(100.0 * d["code_size"] / base, 2) if base else None
    write_text(args.output, metrics.dumps_metrics(d))
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tracelift", description="Trace, recover, lift and debloat MiniISA programs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, strategy=False, guard=False, run=False):
        sp.add_argument("--config", help="key=value config file; flags take precedence")
        sp.add_argument("-o", "--output", help="output file (default: stdout)")
        if strategy:
            sp.add_argument("--strategy", choices=[s.value for s in cfgmod.ExpansionStrategy])
        if guard:
            sp.add_argument("--guard", choices=[g.value for g in GuardMode])
            sp.add_argument("--no-localize", dest="localize", action="store_const", const=False)
        if run:
            sp.add_argument("--input", action="append", default=[], help="file fed to the guest as stdin")
            sp.add_argument("--input-text", action="append", default=[], help="literal stdin text")
            sp.add_argument("--quantum", type=int)
            sp.add_argument("--step-limit", type=int)
            sp.add_argument("--mem-size", type=lambda s: int(s, 0))

    s = sub.add_parser("asm", help="assemble a .s file into an MVB binary")
    s.add_argument("source")
    common(s)
    s.set_defaults(func=cmd_asm)

    s = sub.add_parser("dis", help="disassemble a binary")
    s.add_argument("program")
    common(s)
    s.set_defaults(func=cmd_dis)

    s = sub.add_parser("run", help="execute a program in the vm")
    s.add_argument("program")
    s.add_argument("--propagate", action="store_true", help="exit with the guest's exit code")
    common(s, run=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("trace", help="record a merged trace over one or more inputs")
    s.add_argument("program")
    common(s, run=True)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("merge", help="merge trace files")
    s.add_argument("traces", nargs="+")
    common(s)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("expand", help="build a CFG from a trace (or CFG) and expand it")
    s.add_argument("input", help="trace or CFG JSON")
    s.add_argument("--program", required=True)
    s.add_argument("--dot", help="also write a graph description here")
    common(s, strategy=True)
    s.set_defaults(func=cmd_expand)

    s = sub.add_parser("structure", help="recover functions from a CFG")
    s.add_argument("cfg")
    s.add_argument("--program", required=True)
    common(s)
    s.set_defaults(func=cmd_structure)

    s = sub.add_parser("lift", help="emit C source from a structured program")
    s.add_argument("structure")
    s.add_argument("--program", required=True)
    s.add_argument("--ir", help="also write the micro-op listing here")
    common(s, guard=True)
    s.add_argument("--mem-size", type=lambda s: int(s, 0))
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("rewrite", help="emit a debloated binary from a structured program")
    s.add_argument("structure")
    s.add_argument("--program", required=True)
    common(s, guard=True)
    s.set_defaults(func=cmd_rewrite)

    s = sub.add_parser("debloat", help="run the whole pipeline")
    s.add_argument("program")
    s.add_argument("--input", dest="inputs", action="append", default=[],
                   help="input file to trace (repeatable)")
    s.add_argument("--input-text", action="append", default=[])
    s.add_argument("--backend", choices=BACKENDS)
    s.add_argument("--out-dir")
    s.add_argument("--max-len", type=int)
    s.add_argument("--keep-intermediate", action="store_true")
    s.add_argument("--quantum", type=int)
    s.add_argument("--step-limit", type=int)
    s.add_argument("--mem-size", type=lambda s: int(s, 0))
    common(s, strategy=True, guard=True)
    s.set_defaults(func=cmd_debloat)

    s = sub.add_parser("coverage", help="instruction coverage of a CFG")
    s.add_argument("cfg")
    s.add_argument("--program", required=True)
    common(s)
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("gadgets", help="count unique gadgets")
    s.add_argument("program")
    s.add_argument("--baseline")
    s.add_argument("--max-len", type=int)
    common(s)
    s.set_defaults(func=cmd_gadgets)

    s = sub.add_parser("size", help="text size in bytes")
    s.add_argument("program")
    s.add_argument("--baseline")
    common(s)
    s.set_defaults(func=cmd_size)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        conf = build_config(args)
        return args.func(args, conf)
    except UsageError as e:
        print(f"tracelift: error: {e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"tracelift: {e.stage} failed: {str(e).split(': ', 1)[1]}", file=sys.stderr)
        return 2
    except (OSError, vm.VMFault, ValueError) as e:
        print(f"tracelift: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
