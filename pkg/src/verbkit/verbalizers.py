"""Verbalizers: label -> label-word mappings, and the four ways to build them.

* ``build_manual``: class-name words from the shipped tables.
* ``enrich_maven``: each core word plus its ``k`` nearest neighbors in an
  embedding space, each neighbor weighted by its cosine similarity to the
  core word it came from.
* ``build_petal``: label words mined from labelled data by a
  positive-vs-negative log-likelihood contrast at the MASK position.
* ``init_soft``: one trainable prototype vector per label, initialised from
  the static embeddings of the manual words.

A word may carry explicit ``token_ids``. Words mined from a language model's
own vocabulary keep the exact token they came from (so " science" and the
in-word piece "science" stay distinct); words without ids are tokenized with
the leading-space convention when scored.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from verbkit.embeddings import EmbeddingStore
from verbkit.errors import OOVError, ParseError
from verbkit.templates import Example, Template, render

logger = logging.getLogger(__name__)

DEFAULT_K = 15


@dataclass
class Verbalizer:
    labels: list
    words: list
    token_ids: Optional[list] = None

    def __post_init__(self):
        self.labels = list(self.labels)
        self.words = [list(ws) for ws in self.words]
        if len(self.words) != len(self.labels):
            raise ValueError("one word list per label required")
        if self.token_ids is None:
            self.token_ids = [[None] * len(ws) for ws in self.words]
        else:
            self.token_ids = [
                [None if t is None else tuple(int(i) for i in t) for t in ts]
                for ts in self.token_ids
            ]
        for label, ws, ts in zip(self.labels, self.words, self.token_ids):
            if not ws:
                raise ValueError(f"label {label!r} has no label words")
            if len(ts) != len(ws):
                raise ValueError(f"label {label!r}: token_ids do not align with words")
            keys = list(zip(ws, ts))
            if len(set(keys)) != len(keys):
                raise ValueError(f"label {label!r} has duplicate label words")

    def __len__(self):
        return len(self.labels)

    def resolved(self, lm) -> "Verbalizer":
        """Copy with every word's token ids filled in from backend ``lm``."""
        out = self._copy()
        out.token_ids = [
            [t if t is not None else tuple(lm.tokenize_label_word(w)) for w, t in zip(ws, ts)]
            for ws, ts in zip(self.words, self.token_ids)
        ]
        return out

    def _copy(self):
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "kind": "manual",
            "labels": [
                {"label": label, "words": list(ws), "token_ids": [None if t is None else list(t) for t in ts]}
                for label, ws, ts in zip(self.labels, self.words, self.token_ids)
            ],
        }


@dataclass
class WeightedVerbalizer(Verbalizer):
    weights: Optional[list] = None
    provenance: Optional[list] = None
    missing: list = field(default_factory=list)

    def __post_init__(self):
        super().__post_init__()
        if self.weights is None:
            self.weights = [[1.0] * len(ws) for ws in self.words]
        if self.provenance is None:
            self.provenance = [list(ws) for ws in self.words]
        self.weights = [[float(q) for q in qs] for qs in self.weights]
        for label, ws, qs, ps in zip(self.labels, self.words, self.weights, self.provenance):
            if len(qs) != len(ws) or len(ps) != len(ws):
                raise ValueError(f"label {label!r}: weights/provenance do not align with words")
            if not all(np.isfinite(qs)):
                raise ValueError(f"label {label!r} has non-finite weights")

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["kind"] = "weighted"
        for entry, qs, ps in zip(d["labels"], self.weights, self.provenance):
            entry["weights"] = list(qs)
            entry["provenance"] = list(ps)
        d["missing"] = list(self.missing)
        return d


@dataclass
class SoftVerbalizer:
    labels: list
    prototypes: np.ndarray

    def __post_init__(self):
        self.labels = list(self.labels)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] != len(self.labels):
            raise ValueError("need one prototype row per label")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")

    def __len__(self):
        return len(self.labels)

    def to_dict(self) -> dict:
        return {
            "kind": "soft",
            "labels": [
                {"label": label, "prototype": row.tolist()} for label, row in zip(self.labels, self.prototypes)
            ],
        }


# -- persistence -------------------------------------------------------------


def verbalizer_from_dict(d: Mapping):
    kind = d.get("kind", "manual")
    entries = d["labels"]
    labels = [e["label"] for e in entries]
    if kind == "soft":
        return SoftVerbalizer(labels, [e["prototype"] for e in entries])
    words = [e["words"] for e in entries]
    token_ids = [e.get("token_ids") or [None] * len(e["words"]) for e in entries]
    has_weights = any("weights" in e for e in entries)
    if kind == "weighted" or has_weights:
        return WeightedVerbalizer(
            labels,
            words,
            token_ids,
            weights=[e.get("weights") or [1.0] * len(e["words"]) for e in entries],
            provenance=[e.get("provenance") or list(e["words"]) for e in entries],
            missing=list(d.get("missing", [])),
        )
    return Verbalizer(labels, words, token_ids)


def save_verbalizer(v, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(v.to_dict(), f, indent=2, ensure_ascii=False)


def load_verbalizer(path: Union[str, Path]):
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(str(e), path=path, line=e.lineno) from e
    return verbalizer_from_dict(data)


# -- builders ----------------------------------------------------------------


def _manual_tables() -> dict:
    with resources.files("verbkit.data").joinpath("manual_verbalizers.json").open(encoding="utf-8") as f:
        return json.load(f)


def label_names(dataset_id: str) -> list:
    return [e["label"] for e in _manual_tables()[dataset_id.lower()]]


def build_manual(source: Union[str, Mapping, Sequence]) -> Verbalizer:
    """Manual verbalizer from a built-in dataset id or a label -> words table.

    ``source`` may be ``"ag"``, ``"dbpedia"``, ``"yahoo"``, a mapping
    ``{label: [words]}``, or a list of ``{"label": ..., "words": [...]}``.
    """
    if isinstance(source, str):
        tables = _manual_tables()
        if source.lower() not in tables:
            raise ValueError(f"no manual verbalizer for dataset {source!r}")
        entries = tables[source.lower()]
    elif isinstance(source, Mapping):
        entries = [{"label": k, "words": v} for k, v in source.items()]
    else:
        entries = list(source)
    for e in entries:
        if not e["words"]:
            raise ValueError(f"label {e['label']!r} maps to an empty word list")
    return Verbalizer([e["label"] for e in entries], [list(e["words"]) for e in entries])


def _store_key(store: EmbeddingStore, word: str, token_ids) -> Optional[str]:
    if token_ids is not None and len(token_ids) == 1 and store.token_ids is not None:
        hit = np.flatnonzero(store.token_ids == token_ids[0])
        if hit.size:
            return store.vocab[int(hit[0])]
    return store.resolve(word)


def _row_token(store: EmbeddingStore, key: str):
    if store.token_ids is None:
        return None
    return (int(store.token_ids[store.index[key]]),)


def enrich_maven(
    v: Verbalizer, store: EmbeddingStore, k: int = DEFAULT_K, on_missing: str = "report"
) -> WeightedVerbalizer:
    """Enrich each label's core words with their ``k`` nearest neighbors.

    The enriched word set of a label is the union, over its core words
    ``w0``, of ``{w0}`` plus the top-``k`` neighbors of ``w0``. A neighbor
    starts with weight ``s(w, w0)`` and a core word with weight 1. A word
    reached from two core words of the same label keeps the higher
    similarity. Labels do not share entries; a word may appear under
    several labels with independent weights.

    Core words absent from ``store`` raise ``OOVError`` when
    ``on_missing="raise"``; with ``"report"`` they are logged, listed in
    ``.missing``, and kept alone with weight 1.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if on_missing not in ("report", "raise"):
        raise ValueError(f"on_missing must be 'report' or 'raise', got {on_missing!r}")
    words, token_ids, weights, provenance, missing = [], [], [], [], []
    for y, label in enumerate(v.labels):
        entries = {}  # dedup key -> [word, token_ids, weight, provenance, similarity]
        for w0, t0 in zip(v.words[y], v.token_ids[y]):
            key0 = _store_key(store, w0, t0)
            if key0 is None:
                if on_missing == "raise":
                    raise OOVError(f"core word {w0!r} of label {label!r} not in embedding store")
                logger.warning("core word %r of label %r not in embedding store; kept alone", w0, label)
                missing.append(w0)
                entries[("missing", w0, t0)] = [w0, t0, 1.0, w0, 1.0]
                continue
            tok0 = t0
            if tok0 is None and key0 == " " + w0:
                tok0 = _row_token(store, key0)
            dedup0 = _row_token(store, key0) if store.token_ids is not None else key0
            entries[dedup0] = [w0, tok0, 1.0, w0, 1.0]
            for nb in store.top_k_neighbors(key0, k):
                tok = _row_token(store, nb.word)
                dedup = tok if store.token_ids is not None else nb.word
                if dedup in entries:
                    if nb.similarity > entries[dedup][4]:
                        entries[dedup][2:] = [nb.similarity, w0, nb.similarity]
                else:
                    entries[dedup] = [nb.word, tok, nb.similarity, w0, nb.similarity]
        vals = list(entries.values())
        words.append([e[0] for e in vals])
        token_ids.append([e[1] for e in vals])
        weights.append([e[2] for e in vals])
        provenance.append([e[3] for e in vals])
    return WeightedVerbalizer(
        list(v.labels), words, token_ids, weights=weights, provenance=provenance, missing=missing
    )


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def petal_scores(log_probs: np.ndarray, labels: Sequence[int], n_labels: int) -> np.ndarray:
    """(n_labels, |V|) contrast: mean log-prob over positives minus negatives."""
    labels = np.asarray(labels)
    out = np.zeros((n_labels, log_probs.shape[1]))
    for y in range(n_labels):
        pos = labels == y
        if not pos.any():
            raise ValueError(f"label {y} has no positive examples")
        out[y] = log_probs[pos].mean(axis=0)
        if (~pos).any():
            out[y] -= log_probs[~pos].mean(axis=0)
    return out


def build_petal(
    train: Sequence[Example],
    template: Template,
    lm,
    k_auto: int,
    labels: Sequence[str],
    candidate_ids=None,
    batch_size: int = 32,
) -> Verbalizer:
    """Mine ``k_auto`` label words per label from labelled examples.

    Every candidate token is scored per label by the mean MASK log-softmax
    over the label's examples minus the mean over all other examples; the
    highest-scoring tokens win, ties going to the lower token id. Special
    tokens are never candidates.
    """
    if k_auto < 1:
        raise ValueError("k_auto must be >= 1")
    y = [x.label for x in train]
    counts = np.bincount(np.asarray(y, dtype=int), minlength=len(labels)) if y else np.zeros(len(labels))
    empty = [labels[i] for i in range(len(labels)) if counts[i] == 0]
    if empty:
        raise ValueError(f"labels without positive examples: {empty}")
    seqs = [render(template, x, lm) for x in train]
    logits = np.concatenate(
        [lm.mask_logits_batch(seqs[i:i + batch_size]) for i in range(0, len(seqs), batch_size)]
    )
    scores = petal_scores(_log_softmax(logits), y, len(labels))

    if candidate_ids is None:
        candidate_ids = np.setdiff1d(np.arange(lm.vocab_size), np.asarray(lm.special_ids, dtype=np.int64))
    candidate_ids = np.asarray(sorted(set(int(i) for i in candidate_ids)), dtype=np.int64)
    keys = lm.vocab_keys()
    words, token_ids = [], []
    for c in range(len(labels)):
        s = scores[c, candidate_ids]
        order = np.lexsort((candidate_ids, -s))[:k_auto]
        top = candidate_ids[order]
        words.append([keys[int(t)] for t in top])
        token_ids.append([(int(t),) for t in top])
    return Verbalizer(list(labels), words, token_ids)


def init_soft(v: Verbalizer, store: EmbeddingStore) -> SoftVerbalizer:
    """Prototype per label = mean embedding of its label words."""
    protos = []
    for y, label in enumerate(v.labels):
        rows = []
        for w, t in zip(v.words[y], v.token_ids[y]):
            key = _store_key(store, w, t)
            if key is not None:
                rows.append(store.matrix[store.index[key]].astype(np.float64))
            elif t is not None and store.token_ids is not None and all(i in store.token_ids for i in t):
                pos = [int(np.flatnonzero(store.token_ids == i)[0]) for i in t]
                rows.append(store.matrix[pos].astype(np.float64).mean(axis=0))
            else:
                raise OOVError(f"label word {w!r} of label {label!r} not in embedding store")
        protos.append(np.mean(rows, axis=0))
    return SoftVerbalizer(list(v.labels), np.stack(protos))
