"""Bayesian optimisation of fixed-length antibody sequence mutants."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .seqcore import (
    Alphabet,
    AntibodySequence,
    CdrMask,
    RngStream,
    apply_mutation,
    hamming_distance,
    parse_sequence,
)

__all__ = [
    "BACKEND",
    "Alphabet",
    "AntibodySequence",
    "CdrMask",
    "RngStream",
    "apply_mutation",
    "hamming_distance",
    "parse_sequence",
]
