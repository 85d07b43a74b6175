"""Bundled MiniISA test programs and the inputs they are traced with."""

from importlib import resources

from ..isa import Program, assemble

# name -> (traced inputs, an input that leaves the traced paths or None)
PROGRAMS = {
    "evenodd": (["3", "2"], None),
    "evenodd_call": (["2"], "5"),
    "factorial": (["5", "1"], None),
    "dispatch": (["0", "1"], "2"),
    "jumptable": (["1", "2"], "0"),
    "threads": (["10"], None),
    "loopsum": (["10"], "100"),
    "gcd": (["48 18", "7 7"], "0 5"),
    "tailcall": (["1", "4"], None),
    "strings": (["0"], "1"),
    "deadcode": (["4"], "-1"),
    "sort": (["5 3 1 4 2 5", "3 9 8 7"], "17"),
    "noreturn": (["5", "-1"], None),
    "collatz": (["7", "1"], "0"),
}

MULTITHREADED = {"threads"}


def names() -> list[str]:
    return sorted(PROGRAMS)


def source(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.s").read_text()


def program(name: str) -> Program:
    return assemble(source(name))


def inputs(name: str) -> list[bytes]:
    return [s.encode() for s in PROGRAMS[name][0]]


def diverging_input(name: str) -> bytes | None:
    d = PROGRAMS[name][1]
    return None if d is None else d.encode()
