"""Lifting of structured programs to micro-ops, C source and MiniISA."""

from .ir import (GuardMode, LiftedBlock, LiftedFunction, LiftedProgram, LiftError, MicroOp,
                 dump_lifted, lift_block, lift_program)
from .liveness import localize, localize_program

__all__ = [
    "GuardMode", "LiftedBlock", "LiftedFunction", "LiftedProgram", "LiftError", "MicroOp",
    "dump_lifted", "lift_block", "lift_program", "localize", "localize_program",
]
