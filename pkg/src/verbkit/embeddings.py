"""Vocabulary-indexed word vectors with cosine similarity and exact k-NN.

Search is an exhaustive scan over the whole matrix. With vocabularies of a
few hundred thousand rows that is cheap enough, and it keeps neighbor lists
exactly reproducible (ties are broken by vocabulary index).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from verbkit.errors import NumericError, OOVError, ParseError

logger = logging.getLogger(__name__)

_CHUNK = 16384


@dataclass(frozen=True)
class Neighbor:
    word: str
    similarity: float


class EmbeddingStore:
    """Word vectors indexed by an ordered vocabulary.

    ``token_ids`` is set when the store comes from a language model's input
    embedding layer; row ``i`` then corresponds to token id ``token_ids[i]``.
    """

    def __init__(self, vocab: Sequence[str], matrix, token_ids=None):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != len(vocab):
            raise ValueError(
                f"matrix shape {matrix.shape} does not match vocabulary of {len(vocab)} words"
            )
        if not np.all(np.isfinite(matrix)):
            raise NumericError("embedding matrix has non-finite entries")
        self.vocab = list(vocab)
        self.index = {}
        for i, w in enumerate(self.vocab):
            if w in self.index:
                raise ValueError(f"duplicate word {w!r} in vocabulary")
            self.index[w] = i
        self.matrix = matrix
        self.norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        self.token_ids = None if token_ids is None else np.asarray(token_ids, dtype=np.int64)

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, word):
        return word in self.index

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self._idx(word)]

    def _idx(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise OOVError(f"word {word!r} not in embedding store") from None

    def resolve(self, word: str) -> Optional[str]:
        """Vocabulary key for a class-name word, or None.

        The leading-space (mid-sentence) form wins over the bare form when
        both exist; for stores of plain words only the bare form matches.
        """
        for form in (" " + word, word):
            if form in self.index:
                return form
        return None

    def cosine_similarity(self, a: str, b: str) -> float:
        ia, ib = self._idx(a), self._idx(b)
        na, nb = self.norms[ia], self.norms[ib]
        if na == 0 or nb == 0:
            raise NumericError(f"zero-norm vector for {a if na == 0 else b!r}")
        va = self.matrix[ia].astype(np.float64)
        vb = self.matrix[ib].astype(np.float64)
        return float(va @ vb / (na * nb))

    def similarities(self, word: str) -> np.ndarray:
        """Cosine similarity of ``word`` to every row; NaN for zero-norm rows."""
        i = self._idx(word)
        if self.norms[i] == 0:
            raise NumericError(f"zero-norm vector for {word!r}")
        q = self.matrix[i].astype(np.float64)
        dots = np.empty(len(self), dtype=np.float64)
        for start in range(0, len(self), _CHUNK):
            block = self.matrix[start:start + _CHUNK].astype(np.float64)
            dots[start:start + _CHUNK] = block @ q
        with np.errstate(divide="ignore", invalid="ignore"):
            sims = dots / (self.norms * self.norms[i])
        sims[self.norms == 0] = np.nan
        return sims

    def top_k_neighbors(self, word: str, k: int) -> list:
        """The ``k`` most similar words to ``word``, excluding itself.

        Sorted by descending similarity, ties by ascending vocabulary index.
        Zero-norm rows are never returned.
        """
        if k < 0:
            raise ValueError("k must be non-negative")
        i = self._idx(word)
        if k == 0:
            return []
        sims = self.similarities(word)
        candidates = np.flatnonzero(~np.isnan(sims))
        candidates = candidates[candidates != i]
        order = np.lexsort((candidates, -sims[candidates]))
        top = candidates[order[:k]]
        return [Neighbor(self.vocab[j], float(np.clip(sims[j], -1.0, 1.0))) for j in top]

    def rows_for(self, words: Iterable[str]) -> np.ndarray:
        return self.matrix[[self._idx(w) for w in words]]

    def save(self, path: Union[str, Path], format: str = "word2vec_text") -> None:
        """Write the store as word2vec or GloVe text (UTF-8)."""
        if format not in ("word2vec_text", "glove_text"):
            raise ValueError(f"unknown format {format!r}")
        for w in self.vocab:
            if not w or any(c.isspace() for c in w):
                raise ValueError(f"word {w!r} cannot be written in a whitespace-separated format")
        with open(path, "w", encoding="utf-8") as f:
            if format == "word2vec_text":
                f.write(f"{len(self)} {self.dim}\n")
            for w, row in zip(self.vocab, self.matrix):
                f.write(w + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_external(path: Union[str, Path], format: str, limit: Optional[int] = None) -> EmbeddingStore:
    """Load word2vec text (``count dim`` header) or GloVe text (headerless).

    ``limit`` keeps only the first ``limit`` vectors, which for the common
    frequency-sorted releases means the most frequent words.
    """
    if format not in ("word2vec_text", "glove_text"):
        raise ValueError(f"unknown format {format!r}")
    vocab, rows = [], []
    declared = None
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            if parts and parts[-1] == "":
                parts = parts[:-1]
            if lineno == 1 and format == "word2vec_text":
                try:
                    declared, dim = (int(p) for p in parts)
                except ValueError:
                    raise ParseError("expected 'count dim' header", path, lineno) from None
                continue
            if not line.strip():
                continue
            if len(parts) < 2:
                raise ParseError("expected a word followed by its vector", path, lineno)
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim:
                raise ParseError(f"vector has {len(parts) - 1} values, expected {dim}", path, lineno)
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ParseError("non-numeric vector entry", path, lineno) from None
            vocab.append(parts[0])
            if limit is not None and len(vocab) >= limit:
                break
    if declared is not None and limit is None and len(vocab) != declared:
        raise ParseError(f"header declares {declared} vectors, file has {len(vocab)}", path)
    matrix = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim or 0)
    seen = {}
    for i, w in enumerate(vocab):
        if w in seen:
            raise ParseError(f"duplicate word {w!r}", path)
        seen[w] = i
    return EmbeddingStore(vocab, matrix)
