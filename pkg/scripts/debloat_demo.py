"""Walk one program through the pipeline and show what debloating keeps.

Traces the parity program on an even input only, then runs the rewritten
binary on an odd input under each strategy and guard mode. With plain
tracing the odd path is gone and fail-safe guards stop it. Static
expansion brings the path back.
"""

import argparse
import sys

from tracelift import corpus, vm
from tracelift.cli import PipelineConfig, debloat
from tracelift.isa import disassemble


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--program", default="evenodd", choices=corpus.names())
    ap.add_argument("--traced", default="2", help="stdin used for tracing")
    ap.add_argument("--probe", default="7", help="stdin the trace never saw")
    ap.add_argument("--show-asm", action="store_true")
    args = ap.parse_args(argv)

    prog = corpus.program(args.program)
    want = vm.run(prog, args.probe.encode())
    print(f"original on {args.probe!r}: exit {want.exit_code}, stdout {want.stdout!r}")
    for strategy in ("d", "ds1", "ds2"):
        for guard in ("failsafe", "transparent"):
            conf = PipelineConfig(strategy=strategy, guard=guard, backend="rewriter")
            res = debloat(prog, [args.traced.encode()], conf, args.program)
            got = vm.run(res["binary"], args.probe.encode())
            m = res["metrics"]
            print(f"{strategy:>3} {guard:<11} cov {m['coverage']['percent']:6.2f}%  "
                  f"size {m['debloated']['code_size']:4d}B  exit {got.exit_code:3d}  "
                  f"stdout {got.stdout!r}")
            if args.show_asm:
                print(disassemble(res["binary"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
