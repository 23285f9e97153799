"""Sequences, alphabet, CDR masks and seeded random streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CANONICAL_RESIDUES = "ARNDCQEGHILKMFPSTWYV"
SEPARATOR = "|"


class SequenceError(ValueError):
    """Raised for invalid sequences, mutations or masks."""


@dataclass(frozen=True)
class Alphabet:
    """The 20 canonical residues plus one chain separator.

    The symbol order is the BLOSUM order, so index ``i`` of an alphabet and
    row ``i`` of the shipped substitution matrix refer to the same residue.
    """

    residues: str = CANONICAL_RESIDUES
    separator: str = SEPARATOR
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        symbols = self.residues + self.separator
        if len(self.separator) != 1:
            raise SequenceError("separator must be a single character")
        if len(set(symbols)) != len(symbols):
            raise SequenceError("alphabet symbols must be distinct")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(symbols)})

    @property
    def symbols(self) -> str:
        return self.residues + self.separator

    def __len__(self) -> int:
        return len(self.residues) + 1

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise SequenceError(f"symbol {symbol!r} not in alphabet") from None

    def codes(self, text: str) -> np.ndarray:
        """Integer codes of every character of ``text``."""
        idx = self._index
        try:
            return np.fromiter((idx[c] for c in text), dtype=np.intp, count=len(text))
        except KeyError as exc:
            raise SequenceError(f"symbol {exc.args[0]!r} not in alphabet") from None


DEFAULT_ALPHABET = Alphabet()


@dataclass(frozen=True)
class AntibodySequence:
    """Heavy and light chain joined as ``heavy + separator + light``.

    Instances are immutable and hash on the joined string, so they can be used
    directly in pools and dedup sets.
    """

    joined: str
    separator_position: int

    @property
    def heavy(self) -> str:
        return self.joined[: self.separator_position]

    @property
    def light(self) -> str:
        return self.joined[self.separator_position + 1 :]

    def __len__(self) -> int:
        return len(self.joined)

    def __getitem__(self, i):
        return self.joined[i]

    def __str__(self) -> str:
        return self.joined

    def with_residues(self, changes: dict[int, str]) -> "AntibodySequence":
        """Return a copy with several positions replaced (no validation)."""
        chars = list(self.joined)
        for pos, res in changes.items():
            chars[pos] = res
        return AntibodySequence("".join(chars), self.separator_position)

    @classmethod
    def from_joined(
        cls, joined: str, alphabet: Alphabet = DEFAULT_ALPHABET, expected_length: int | None = None
    ) -> "AntibodySequence":
        if joined.count(alphabet.separator) != 1:
            raise SequenceError(
                f"joined sequence must contain exactly one {alphabet.separator!r}"
            )
        heavy, light = joined.split(alphabet.separator)
        return parse_sequence(heavy, light, alphabet, expected_length)


def parse_sequence(
    heavy: str,
    light: str,
    alphabet: Alphabet = DEFAULT_ALPHABET,
    expected_length: int | None = None,
) -> AntibodySequence:
    """Validate two chains and join them with the alphabet separator.

    Parameters
    ----------
    heavy, light : str
        One-letter residue strings; both must be non-empty.
    alphabet : Alphabet
        Alphabet used for validation.
    expected_length : int, optional
        Run-level joined length; a mismatch is rejected.

    Raises
    ------
    SequenceError
        On empty chains, non-canonical characters (reporting the joined
        position and the character) or a length mismatch.
    """
    if not heavy or not light:
        raise SequenceError("heavy and light chains must both be non-empty")
    joined = heavy + alphabet.separator + light
    allowed = set(alphabet.residues)
    sep = len(heavy)
    for pos, char in enumerate(joined):
        if pos == sep:
            continue
        if char not in allowed:
            raise SequenceError(f"invalid residue {char!r} at position {pos}")
    if expected_length is not None and len(joined) != expected_length:
        raise SequenceError(
            f"joined length {len(joined)} does not match expected length {expected_length}"
        )
    return AntibodySequence(joined, sep)


def apply_mutation(
    seq: AntibodySequence,
    position: int,
    new_residue: str,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> AntibodySequence:
    """Substitute a single residue, returning a new sequence."""
    if not 0 <= position < len(seq):
        raise SequenceError(f"position {position} out of range for length {len(seq)}")
    if position == seq.separator_position:
        raise SequenceError(f"position {position} is the separator position")
    if new_residue not in alphabet.residues or len(new_residue) != 1:
        raise SequenceError(f"{new_residue!r} is not a canonical residue")
    if seq.joined[position] == new_residue:
        raise SequenceError(
            f"residue at position {position} is already {new_residue!r}"
        )
    return seq.with_residues({position: new_residue})


def hamming_distance(a: AntibodySequence, b: AntibodySequence) -> int:
    if len(a) != len(b):
        raise SequenceError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a.joined, b.joined))


@dataclass(frozen=True, init=False)
class CdrMask:
    """Indices of the joined sequence that may be mutated."""

    positions: tuple[int, ...]

    def __init__(self, positions: Iterable[int]):
        object.__setattr__(self, "positions", tuple(sorted(set(int(p) for p in positions))))
        if not self.positions:
            raise SequenceError("CDR mask must be non-empty")

    def validate_for(self, seq: AntibodySequence) -> "CdrMask":
        for p in self.positions:
            if p < 0 or p >= len(seq):
                raise SequenceError(f"mask index {p} outside sequence of length {len(seq)}")
            if p == seq.separator_position:
                raise SequenceError(f"mask index {p} is the separator position")
        return self

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def __contains__(self, item) -> bool:
        return item in self.positions

    @classmethod
    def parse(cls, spec: Sequence[int | str] | str) -> "CdrMask":
        """Build a mask from ints and inclusive ``"a-b"`` ranges."""
        if isinstance(spec, str):
            spec = [s for s in spec.replace(",", " ").split() if s]
        positions: list[int] = []
        for item in spec:
            if isinstance(item, str) and "-" in item.strip("-"):
                lo, hi = item.split("-")
                positions.extend(range(int(lo), int(hi) + 1))
            else:
                positions.append(int(item))
        return cls(positions)


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """A labelled, replayable random stream.

    Identical ``(seed, label)`` pairs yield bitwise-identical draws. Streams
    are stateful and should not be shared between workers; use
    :meth:`child` to derive an independent stream instead.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        ss = np.random.SeedSequence(entropy=[self.seed, *_label_words(label)])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def __getattr__(self, name):
        # delegate draws (integers, random, normal, choice, ...) to the generator
        return getattr(self.gen, name)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"
