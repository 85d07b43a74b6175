"""Coverage, code size and gadget counts for every corpus program.

Traces each program on its bundled inputs, expands the CFG with each
strategy, rewrites the binary in fail-safe mode and prints one table per
strategy, plus a JSON dump with --json.
"""

import argparse
import json
import math
import sys

from tracelift import corpus, metrics
from tracelift.cli import PipelineConfig, debloat


def geomean(xs):
    xs = [x for x in xs if x > 0]
    return math.exp(sum(map(math.log, xs)) / len(xs)) if xs else float("nan")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strategies", default="d,ds1,ds2")
    ap.add_argument("--guard", default="failsafe", choices=["failsafe", "transparent"])
    ap.add_argument("--max-len", type=int, default=metrics.DEFAULT_MAX_LEN)
    ap.add_argument("--json", help="write all rows to this file")
    args = ap.parse_args(argv)

    everything = {}
    for strategy in args.strategies.split(","):
        conf = PipelineConfig(strategy=strategy, guard=args.guard, backend="rewriter",
                              max_len=args.max_len)
        conf.validate()
        rows = []
        for name in corpus.names():
            res = debloat(corpus.program(name), corpus.inputs(name), conf, name)
            rows.append(res["metrics"])
        everything[strategy] = rows
        print(f"strategy {strategy}, guard {args.guard}")
        print(metrics.format_table(rows))
        size = geomean([r["debloated"]["code_size_percent"] for r in rows])
        gad = geomean([r["debloated"]["gadgets_percent"] for r in rows])
        print(f"geomean size% {size:.2f}  gadgets% {gad:.2f}\n")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(everything, f, indent=1, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
