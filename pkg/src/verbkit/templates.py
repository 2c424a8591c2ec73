"""Cloze templates and their rendering into masked token sequences.

A template is plain data: an ordered list of segments, each a literal
string, a reference to an input field, or the single MASK slot. Rendering
tokenizes every segment separately so the positions of input text stay
known; that is what allows truncation to cut the input and never the
scaffold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, Union

from verbkit.errors import ParseError, StructuralError


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Field:
    name: str


@dataclass(frozen=True)
class Mask:
    pass


Segment = Union[Literal, Field, Mask]


@dataclass(frozen=True)
class Template:
    id: int
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        n_mask = sum(isinstance(s, Mask) for s in self.segments)
        if n_mask != 1:
            raise StructuralError(f"template {self.id} has {n_mask} MASK slots, expected 1")
        for s in self.segments:
            if not isinstance(s, (Literal, Field, Mask)):
                raise TypeError(f"unknown segment {s!r}")

    @property
    def fields(self) -> frozenset:
        return frozenset(s.name for s in self.segments if isinstance(s, Field))

    def to_dict(self) -> dict:
        segs = []
        for s in self.segments:
            if isinstance(s, Literal):
                segs.append({"lit": s.text})
            elif isinstance(s, Field):
                segs.append({"field": s.name})
            else:
                segs.append({"mask": True})
        return {"id": self.id, "segments": segs}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Template":
        segs = []
        for raw in d["segments"]:
            if "lit" in raw:
                segs.append(Literal(str(raw["lit"])))
            elif "field" in raw:
                segs.append(Field(str(raw["field"])))
            elif raw.get("mask"):
                segs.append(Mask())
            else:
                raise ParseError(f"bad template segment {raw!r}")
        return cls(int(d["id"]), tuple(segs))

    def text(self, example: "Example", mask_token: str = "<mask>") -> str:
        """Plain-string rendering, with ``mask_token`` at the slot."""
        out = []
        for s in self.segments:
            if isinstance(s, Literal):
                out.append(s.text)
            elif isinstance(s, Field):
                out.append(example.fields[s.name])
            else:
                out.append(mask_token)
        return "".join(out)


@dataclass
class Example:
    fields: dict
    label: Optional[int] = None
    id: Optional[str] = None


class Tokenizer(Protocol):
    mask_token_id: int

    def tokenize(self, text: str) -> list: ...


@dataclass(frozen=True)
class Piece:
    kind: str  # "lit" | "field" | "mask"
    ids: tuple
    name: Optional[str] = None


@dataclass(frozen=True)
class MaskedSequence:
    """Token ids of a rendered template, kept as per-segment pieces.

    Special tokens (CLS/SEP) are not included; the backend adds them.
    """

    pieces: tuple
    mask_token_id: int
    _ids: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(i for p in self.pieces for i in p.ids)
        n = ids.count(self.mask_token_id)
        if n != 1:
            raise StructuralError(f"masked sequence contains {n} MASK tokens, expected 1")
        object.__setattr__(self, "_ids", ids)

    @property
    def ids(self) -> tuple:
        return self._ids

    @property
    def mask_index(self) -> int:
        return self._ids.index(self.mask_token_id)

    def __len__(self):
        return len(self._ids)

    def truncate(self, max_tokens: int) -> "MaskedSequence":
        """Cut input-field tokens from the tail of the longest field until
        the sequence fits. Literal and MASK pieces are never touched."""
        excess = len(self) - max_tokens
        if excess <= 0:
            return self
        lens = [len(p.ids) if p.kind == "field" else -1 for p in self.pieces]
        while excess > 0:
            i = max(range(len(lens)), key=lambda j: (lens[j], j))
            if lens[i] <= 0:
                raise StructuralError(
                    f"sequence needs {len(self)} tokens, scaffold alone exceeds {max_tokens}"
                )
            second = max([l for j, l in enumerate(lens) if j != i] + [0])
            cut = min(excess, max(1, lens[i] - second))
            lens[i] -= cut
            excess -= cut
        pieces = tuple(
            Piece(p.kind, p.ids[: lens[j]], p.name) if p.kind == "field" else p
            for j, p in enumerate(self.pieces)
        )
        return MaskedSequence(pieces, self.mask_token_id)


def render(t: Template, x: Example, tokenizer: Tokenizer) -> MaskedSequence:
    """Render example ``x`` through template ``t`` into a MaskedSequence.

    Each segment is tokenized on its own. Trailing whitespace of a segment is
    carried over to the start of the next one, so word-initial spaces land
    where a whole-string BPE tokenization would put them; whitespace running
    into the MASK slot is dropped (the MASK token absorbs it).
    """
    missing = t.fields - set(x.fields)
    if missing:
        raise ValueError(f"template {t.id} needs fields {sorted(missing)} absent from example")

    raw = []
    for s in t.segments:
        if isinstance(s, Literal):
            raw.append(["lit", s.text, None])
        elif isinstance(s, Field):
            value = x.fields[s.name]
            if value is None:
                raise ValueError(f"field {s.name!r} is null")
            raw.append(["field", str(value), s.name])
        else:
            raw.append(["mask", "", None])

    for i in range(len(raw) - 1):
        text = raw[i][1]
        stripped = text.rstrip()
        if stripped != text and raw[i][0] != "mask":
            raw[i][1] = stripped
            if raw[i + 1][0] != "mask":
                raw[i + 1][1] = text[len(stripped):] + raw[i + 1][1]

    pieces = []
    for kind, text, name in raw:
        if kind == "mask":
            ids = (tokenizer.mask_token_id,)
        else:
            ids = tuple(tokenizer.tokenize(text)) if text else ()
        pieces.append(Piece(kind, ids, name))
    return MaskedSequence(tuple(pieces), tokenizer.mask_token_id)


def _t(i, *segs) -> Template:
    return Template(i, tuple(segs))


M = Mask()

_BUILTIN = {
    "ag": [
        _t(0, M, Literal(" news: "), Field("text")),
        _t(1, Field("text"), Literal(" This topic is about "), M, Literal(".")),
        _t(2, Literal("[Category: "), M, Literal("] "), Field("text")),
        _t(3, Literal("[Topic: "), M, Literal("] "), Field("text")),
    ],
    "dbpedia": [
        _t(i, Field("title"), Literal(" "), Field("content"), Literal(lead), Field("title"),
           Literal(" is "), M, Literal("."))
        for i, lead in enumerate([" In this sentence, ", " ", " The category of ", " The type of "])
    ],
    "yahoo": [
        _t(0, M, Literal(" question: "), Field("text"), Literal(".")),
        _t(1, Field("text"), Literal(" This topic is about "), M, Literal(".")),
        _t(2, Literal("[Topic: "), M, Literal("] "), Field("text"), Literal(".")),
        _t(3, Literal("[Category: "), M, Literal("] "), Field("text"), Literal(".")),
    ],
}


def builtin_templates(dataset_id: str) -> list:
    """The four templates T0..T3 shipped for ``ag``, ``dbpedia`` and ``yahoo``."""
    try:
        return list(_BUILTIN[dataset_id.lower()])
    except KeyError:
        raise ValueError(f"no built-in templates for dataset {dataset_id!r}") from None


def load_templates(path: Union[str, Path]) -> list:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(str(e), path=path, line=e.lineno) from e
    if isinstance(data, dict):
        data = data["templates"]
    return [Template.from_dict(d) for d in data]


def save_templates(templates: Sequence[Template], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([t.to_dict() for t in templates], f, indent=2, ensure_ascii=False)
