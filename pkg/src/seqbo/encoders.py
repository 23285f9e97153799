"""Sequence encoders: one-hot, bag of n-grams, BLOSUM flip-spectrum, external
embeddings, and Gaussian random projections.

One-hot and BLOSUM encodings are *blockwise*: every position contributes a
fixed per-symbol vector. Batches of such encodings are kept as integer codes
(:class:`CodedBatch`) so that kernels can compute dot products from a small
symbol Gram matrix instead of materialising ``L * 21`` columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seqcore import DEFAULT_ALPHABET, Alphabet, AntibodySequence, RngStream


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class EncodedSequence:
    values: np.ndarray
    encoder_id: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise EncodingError("encoded values must be a vector")
        if not np.all(np.isfinite(vals)):
            raise EncodingError("encoded values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CodedBatch:
    """Blockwise encodings stored as symbol codes.

    ``codes[i, p]`` is the symbol index at position ``p`` of row ``i``;
    ``symbol_vectors[s]`` is the vector emitted for symbol ``s``.
    """

    codes: np.ndarray
    symbol_vectors: np.ndarray
    symbol_gram: np.ndarray = field(default=None)

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.intp)
        if codes.ndim != 2:
            raise EncodingError("codes must be a 2-d array")
        vecs = np.ascontiguousarray(self.symbol_vectors, dtype=np.float64)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "symbol_vectors", vecs)
        if self.symbol_gram is None:
            object.__setattr__(self, "symbol_gram", np.ascontiguousarray(vecs @ vecs.T))

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.codes.shape[0], self.codes.shape[1] * self.symbol_vectors.shape[1])

    def dense(self) -> np.ndarray:
        n, L = self.codes.shape
        return self.symbol_vectors[self.codes].reshape(n, L * self.symbol_vectors.shape[1])

    def take(self, idx) -> "CodedBatch":
        return CodedBatch(self.codes[idx], self.symbol_vectors, self.symbol_gram)

    def compatible(self, other) -> bool:
        return (
            isinstance(other, CodedBatch)
            and other.codes.shape[1] == self.codes.shape[1]
            and (other.symbol_gram is self.symbol_gram
                 or np.array_equal(other.symbol_gram, self.symbol_gram))
        )


def concat_features(parts: Sequence):
    """Stack feature batches (all dense, or all compatible coded batches)."""
    if all(isinstance(p, CodedBatch) for p in parts):
        first = parts[0]
        return CodedBatch(
            np.concatenate([p.codes for p in parts]), first.symbol_vectors, first.symbol_gram
        )
    dense = [p.dense() if isinstance(p, CodedBatch) else np.atleast_2d(p) for p in parts]
    width = max(d.shape[1] for d in dense)
    return np.concatenate([pad_columns(d, width) for d in dense])


def pad_columns(X: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad a dense batch on the right to ``width`` columns."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] == width:
        return X
    if X.shape[1] > width:
        raise EncodingError(f"cannot pad {X.shape[1]} columns down to {width}")
    out = np.zeros((X.shape[0], width))
    out[:, : X.shape[1]] = X
    return out


# ---------------------------------------------------------------------------
# substitution matrices


@dataclass(frozen=True)
class SubstitutionMatrix:
    symbols: str
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (len(self.symbols), len(self.symbols)):
            raise EncodingError("score matrix shape does not match symbols")
        if not np.all(np.isfinite(scores)):
            raise EncodingError("score matrix has non-finite entries")
        object.__setattr__(self, "scores", scores)

    def score(self, a: str, b: str) -> float:
        return float(self.scores[self.symbols.index(a), self.symbols.index(b)])

    def restrict(self, symbols: str) -> "SubstitutionMatrix":
        idx = [self.symbols.index(s) for s in symbols]
        return SubstitutionMatrix(symbols, self.scores[np.ix_(idx, idx)])


def parse_ncbi_matrix(text: str) -> SubstitutionMatrix:
    """Parse a square score table in the NCBI text layout."""
    rows = [line.split() for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    header = rows[0]
    symbols = "".join(header)
    scores = np.zeros((len(header), len(header)))
    seen = []
    for lineno, row in enumerate(rows[1:], start=2):
        label, values = row[0], row[1:]
        if len(values) != len(header):
            raise EncodingError(f"matrix row {lineno} has {len(values)} entries, expected {len(header)}")
        scores[header.index(label)] = [float(v) for v in values]
        seen.append(label)
    if sorted(seen) != sorted(header):
        raise EncodingError("matrix rows do not match column header")
    return SubstitutionMatrix(symbols, scores)


def load_blosum62() -> SubstitutionMatrix:
    text = resources.files("seqbo").joinpath("data/blosum62.txt").read_text()
    return parse_ncbi_matrix(text)


def blosum62_extended(alphabet: Alphabet = DEFAULT_ALPHABET) -> SubstitutionMatrix:
    """BLOSUM62 over the 20 residues plus the separator.

    The separator scores 1 against itself and 0 against every residue.
    """
    base = load_blosum62().restrict(alphabet.residues)
    k = len(alphabet)
    scores = np.zeros((k, k))
    scores[:-1, :-1] = base.scores
    scores[-1, -1] = 1.0
    return SubstitutionMatrix(alphabet.symbols, scores)


@dataclass(frozen=True)
class FlipSpectrumEmbedding:
    """Per-symbol vectors ``U |D|^{1/2}`` of a symmetric score matrix."""

    symbols: str
    vectors: np.ndarray

    @property
    def gram(self) -> np.ndarray:
        return self.vectors @ self.vectors.T


def build_flip_spectrum(matrix, symbols: str | None = None) -> FlipSpectrumEmbedding:
    """Eigendecompose a symmetric matrix and keep ``U |D|^{1/2}`` as rows.

    The Gram matrix of the returned rows equals ``U |D| U^T``, the positive
    semi-definite matrix obtained by flipping negative eigenvalues.
    """
    if isinstance(matrix, SubstitutionMatrix):
        symbols, scores = matrix.symbols, matrix.scores
    else:
        scores = np.asarray(matrix, dtype=np.float64)
        if symbols is None:
            symbols = "".join(chr(ord("a") + i) for i in range(scores.shape[0]))
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise EncodingError("substitution matrix must be square")
    if not np.allclose(scores, scores.T, rtol=0.0, atol=1e-12):
        raise EncodingError("substitution matrix must be symmetric")
    evals, evecs = np.linalg.eigh(scores)
    vectors = evecs * np.sqrt(np.abs(evals))
    return FlipSpectrumEmbedding(symbols, vectors)


# ---------------------------------------------------------------------------
# encoders


class OneHotEncoder:
    name = "onehot"

    def __init__(self, alphabet: Alphabet = DEFAULT_ALPHABET):
        self.alphabet = alphabet
        self._eye = np.eye(len(alphabet))

    def dimension_for(self, length: int) -> int:
        return length * len(self.alphabet)

    def batch(self, seqs: Sequence[AntibodySequence]) -> CodedBatch:
        codes = np.stack([self.alphabet.codes(s.joined) for s in seqs]) if seqs else \
            np.zeros((0, 0), dtype=np.intp)
        return CodedBatch(codes, self._eye, self._eye)

    def encode(self, seq: AntibodySequence) -> EncodedSequence:
        return EncodedSequence(self.batch([seq]).dense()[0], self.name)


class BlosumEncoder:
    name = "blosum"

    def __init__(self, embedding: FlipSpectrumEmbedding | None = None,
                 alphabet: Alphabet = DEFAULT_ALPHABET):
        self.alphabet = alphabet
        if embedding is None:
            embedding = build_flip_spectrum(blosum62_extended(alphabet))
        self.embedding = embedding
        # map alphabet codes onto embedding rows
        self._rows = np.array(
            [embedding.symbols.index(c) if c in embedding.symbols else -1 for c in alphabet.symbols]
        )
        self._vectors = embedding.vectors[np.where(self._rows >= 0, self._rows, 0)]
        self._gram = np.ascontiguousarray(self._vectors @ self._vectors.T)

    def dimension_for(self, length: int) -> int:
        return length * self.embedding.vectors.shape[1]

    def batch(self, seqs: Sequence[AntibodySequence]) -> CodedBatch:
        codes = np.stack([self._codes(s.joined) for s in seqs])
        return CodedBatch(codes, self._vectors, self._gram)

    def _codes(self, text: str) -> np.ndarray:
        codes = self.alphabet.codes(text)
        missing = self._rows[codes] < 0
        if missing.any():
            pos = int(np.argmax(missing))
            raise EncodingError(f"symbol {text[pos]!r} at position {pos} absent from embedding")
        return codes

    def encode(self, seq: AntibodySequence) -> EncodedSequence:
        return EncodedSequence(self.batch([seq]).dense()[0], self.name)


class NgramVocabulary:
    """Append-only map from n-grams to contiguous column indices."""

    def __init__(self, n: int = 5, grams: Iterable[str] = ()):
        if n < 1:
            raise EncodingError("n must be positive")
        self.n = n
        self.index: dict[str, int] = {}
        for g in grams:
            self.add(g)

    def __len__(self) -> int:
        return len(self.index)

    def add(self, gram: str) -> int:
        if len(gram) != self.n:
            raise EncodingError(f"gram {gram!r} does not have length {self.n}")
        if gram not in self.index:
            self.index[gram] = len(self.index)
        return self.index[gram]

    def windows(self, text: str) -> list[str]:
        if len(text) < self.n:
            raise EncodingError(f"sequence of length {len(text)} is shorter than n={self.n}")
        return [text[i : i + self.n] for i in range(len(text) - self.n + 1)]

    @classmethod
    def from_sequences(cls, seqs: Iterable[AntibodySequence], n: int = 5) -> "NgramVocabulary":
        vocab = cls(n)
        for s in seqs:
            for g in vocab.windows(s.joined):
                vocab.add(g)
        return vocab


class NgramEncoder:
    """Bag of n-grams counts over a (possibly growing) vocabulary."""

    name = "ngram"

    def __init__(self, vocab: NgramVocabulary, extend: bool = False):
        self.vocab = vocab
        self.extend = extend

    @property
    def dimension(self) -> int:
        return len(self.vocab)

    def _counts(self, text: str) -> dict[int, int]:
        counts: dict[int, int] = {}
        index = self.vocab.index
        for g in self.vocab.windows(text):
            j = self.vocab.add(g) if self.extend else index.get(g)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        return counts

    def batch(self, seqs: Sequence[AntibodySequence]) -> np.ndarray:
        rows = [self._counts(s.joined) for s in seqs]
        out = np.zeros((len(rows), len(self.vocab)))
        for i, row in enumerate(rows):
            if row:
                out[i, list(row)] = list(row.values())
        return out

    def encode(self, seq: AntibodySequence) -> EncodedSequence:
        return EncodedSequence(self.batch([seq])[0], self.name)


class ExternalEmbeddings:
    """Lookup table of precomputed vectors keyed by joined sequence."""

    name = "external"

    def __init__(self, table: dict[str, np.ndarray]):
        if not table:
            raise EncodingError("embedding table is empty")
        dims = {v.shape[0] for v in table.values()}
        if len(dims) != 1:
            raise EncodingError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self.table = table
        self.dimension = dims.pop()

    def __len__(self) -> int:
        return len(self.table)

    def __contains__(self, seq) -> bool:
        return str(seq) in self.table

    def lookup(self, seq: AntibodySequence | str) -> np.ndarray:
        key = str(seq)
        try:
            return self.table[key]
        except KeyError:
            raise EncodingError(f"no external embedding for sequence {key}") from None

    def batch(self, seqs: Sequence[AntibodySequence]) -> np.ndarray:
        if not seqs:
            return np.zeros((0, self.dimension))
        return np.stack([self.lookup(s) for s in seqs])

    def encode(self, seq: AntibodySequence) -> EncodedSequence:
        return EncodedSequence(self.lookup(seq), self.name)


def load_external_embeddings(path: str | Path) -> ExternalEmbeddings:
    """Read a tab-separated embedding file: joined sequence, then values."""
    path = Path(path)
    table: dict[str, np.ndarray] = {}
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, *vals = line.split("\t")
            try:
                vec = np.array([float(v) for v in vals])
            except ValueError:
                raise EncodingError(f"{path}:{lineno}: non-numeric embedding value") from None
            if vec.size == 0 or not np.all(np.isfinite(vec)):
                raise EncodingError(f"{path}:{lineno}: empty or non-finite embedding")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise EncodingError(
                    f"{path}:{lineno}: embedding has {vec.size} values, expected {dim}"
                )
            if key in table and not np.array_equal(table[key], vec):
                raise EncodingError(f"{path}:{lineno}: duplicate sequence {key} with a different vector")
            table[key] = vec
    return ExternalEmbeddings(table)


class RandomProjection:
    """``N_emb x N_low`` matrix of standard normals scaled by ``1/sqrt(N_low)``.

    Rows are drawn in order from a dedicated stream, so the matrix can be
    grown for an expanding n-gram vocabulary without changing existing rows.
    """

    def __init__(self, n_emb: int, n_low: int, rng: RngStream):
        if n_low < 1 or n_emb < 1:
            raise EncodingError("projection dimensions must be positive")
        self.n_low = n_low
        self._rng = rng
        self.matrix = np.zeros((0, n_low))
        self.extend_to(n_emb)

    @property
    def n_emb(self) -> int:
        return self.matrix.shape[0]

    def extend_to(self, n_emb: int) -> None:
        extra = n_emb - self.matrix.shape[0]
        if extra > 0:
            rows = self._rng.standard_normal((extra, self.n_low)) / math.sqrt(self.n_low)
            self.matrix = np.vstack([self.matrix, rows])

    def apply(self, X, grow: bool = False) -> np.ndarray:
        X = X.dense() if isinstance(X, CodedBatch) else np.atleast_2d(np.asarray(X, dtype=np.float64))
        if grow:
            self.extend_to(X.shape[1])
        if X.shape[1] != self.n_emb:
            raise EncodingError(
                f"projection expects dimension {self.n_emb}, got {X.shape[1]}"
            )
        return X @ self.matrix


def project(x: EncodedSequence, proj: RandomProjection) -> EncodedSequence:
    return EncodedSequence(proj.apply(x.values[None, :])[0], x.encoder_id + "+proj")


class ProjectedEncoder:
    """Wrap an encoder with a fixed random projection."""

    def __init__(self, base, proj: RandomProjection, grow: bool = False):
        self.base = base
        self.proj = proj
        self.grow = grow
        self.name = f"{base.name}+proj{proj.n_low}"

    def batch(self, seqs: Sequence[AntibodySequence]) -> np.ndarray:
        return self.proj.apply(self.base.batch(seqs), grow=self.grow)

    def encode(self, seq: AntibodySequence) -> EncodedSequence:
        return EncodedSequence(self.batch([seq])[0], self.name)


# ---------------------------------------------------------------------------
# single-sequence helpers


def encode_one_hot(seq: AntibodySequence, alphabet: Alphabet = DEFAULT_ALPHABET) -> EncodedSequence:
    return OneHotEncoder(alphabet).encode(seq)


def encode_bag_of_ngrams(seq: AntibodySequence, vocab: NgramVocabulary,
                         extend: bool = False) -> EncodedSequence:
    return NgramEncoder(vocab, extend=extend).encode(seq)


def encode_blosum(seq: AntibodySequence, emb: FlipSpectrumEmbedding,
                  alphabet: Alphabet = DEFAULT_ALPHABET) -> EncodedSequence:
    return BlosumEncoder(emb, alphabet).encode(seq)


ENCODERS = ("onehot", "blosum", "ngram", "external")


def make_encoder(
    name: str,
    *,
    sequences: Sequence[AntibodySequence] = (),
    extend: bool = False,
    embeddings: ExternalEmbeddings | None = None,
    projection_dim: int | None = None,
    rng: RngStream | None = None,
    alphabet: Alphabet = DEFAULT_ALPHABET,
    ngram_n: int = 5,
):
    """Build an encoder by name, optionally followed by a random projection.

    ``sequences`` seeds the n-gram vocabulary and fixes the projection input
    size for the other encoders.
    """
    if name == "onehot":
        enc = OneHotEncoder(alphabet)
    elif name == "blosum":
        enc = BlosumEncoder(alphabet=alphabet)
    elif name == "ngram":
        enc = NgramEncoder(NgramVocabulary.from_sequences(sequences, ngram_n), extend=extend)
    elif name == "external":
        if embeddings is None:
            raise EncodingError("external encoder requires an embedding file")
        enc = embeddings
    else:
        raise EncodingError(f"unknown encoder {name!r}; choose from {ENCODERS}")
    if not projection_dim:
        return enc
    if rng is None:
        raise EncodingError("a random stream is required for projection")
    if name == "ngram":
        n_emb = max(enc.dimension, 1)
    elif name == "external":
        n_emb = enc.dimension
    else:
        if not sequences:
            raise EncodingError("projection needs a reference sequence for its input size")
        n_emb = enc.dimension_for(len(sequences[0]))
    return ProjectedEncoder(enc, RandomProjection(n_emb, projection_dim, rng), grow=(name == "ngram"))
