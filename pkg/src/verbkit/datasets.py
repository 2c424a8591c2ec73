"""Dataset ingestion and the few-shot sampling protocol."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from verbkit.errors import ParseError
from verbkit.templates import Example
from verbkit.verbalizers import label_names as _label_names

# Column layouts of the public CSV releases (labels are 1-based there).
SCHEMAS = {
    "ag": {"columns": ["label", "title", "description"], "n_labels": 4},
    "dbpedia": {"columns": ["label", "title", "content"], "n_labels": 14},
    "yahoo": {"columns": ["label", "title", "content", "answer"], "n_labels": 10},
}

# Published test-set sizes, for sanity checks on downloaded copies.
TEST_SIZES = {"ag": 7600, "dbpedia": 75000, "yahoo": 60000}


def _join(*parts) -> str:
    return " ".join(p.strip() for p in parts if p and p.strip())


def _derive_fields(dataset_id: Optional[str], fields: dict) -> dict:
    if dataset_id == "ag":
        fields.setdefault("text", _join(fields.get("title", ""), fields.get("description", "")))
    elif dataset_id == "yahoo":
        fields.setdefault("text", _join(fields.get("title", ""), fields.get("content", ""), fields.get("answer", "")))
    return fields


@dataclass
class Dataset:
    schema: list
    examples: list
    label_names: list
    name: Optional[str] = None

    def __post_init__(self):
        n = len(self.label_names)
        for x in self.examples:
            if x.label is not None and not 0 <= x.label < n:
                raise ValueError(f"example {x.id} has label {x.label} outside [0, {n})")

    def __len__(self):
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([x.label for x in self.examples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.schema, [self.examples[i] for i in indices], self.label_names, self.name)


def load_dataset(
    source: Union[str, Path],
    format: str = "csv",
    dataset_id: Optional[str] = None,
    label_names: Optional[Sequence[str]] = None,
    columns: Optional[Sequence[str]] = None,
    label_offset: Optional[int] = None,
) -> Dataset:
    """Read a labelled split from delimited text or JSON lines.

    CSV files follow the public releases: no header, the label first
    (1-based by default for the built-in datasets), then the text columns.
    JSON-lines records hold the text fields plus ``label`` (a 0-based index
    or a label name). For ``ag`` and ``yahoo`` a ``text`` field joining the
    text columns is added.
    """
    if dataset_id is not None:
        dataset_id = dataset_id.lower()
    schema = SCHEMAS.get(dataset_id, {})
    if label_names is None:
        if dataset_id not in SCHEMAS:
            raise ValueError("label_names are required for datasets without a built-in schema")
        label_names = _label_names(dataset_id)
    label_names = list(label_names)
    columns = list(columns or schema.get("columns") or [])
    index = {name: i for i, name in enumerate(label_names)}
    examples = []
    path = Path(source)

    def _label(raw, offset, line):
        if isinstance(raw, str) and raw.strip() in index:
            return index[raw.strip()]
        try:
            y = int(raw) - offset
        except (TypeError, ValueError):
            raise ParseError(f"unknown label {raw!r}", path, line) from None
        if not 0 <= y < len(label_names):
            raise ParseError(f"unknown label {raw!r}", path, line)
        return y

    if format == "csv":
        if "label" not in columns:
            raise ValueError("csv columns must include 'label'")
        offset = 1 if label_offset is None else label_offset
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(columns):
                    raise ParseError(f"expected {len(columns)} columns, got {len(row)}", path, line)
                rec = dict(zip(columns, row))
                y = _label(rec.pop("label"), offset, line)
                fields = {k: v.replace("\\n", " ") for k, v in rec.items()}
                examples.append(Example(_derive_fields(dataset_id, fields), y, f"{path.name}:{line}"))
    elif format == "jsonl":
        offset = 0 if label_offset is None else label_offset
        with open(path, encoding="utf-8") as f:
            for line, raw in enumerate(f, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                except json.JSONDecodeError as e:
                    raise ParseError(f"invalid JSON: {e.msg}", path, line) from None
                if not isinstance(rec, dict) or "label" not in rec:
                    raise ParseError("record must be an object with a 'label'", path, line)
                y = _label(rec.pop("label"), offset, line)
                ex_id = str(rec.pop("id", f"{path.name}:{line}"))
                fields = {k: "" if v is None else str(v) for k, v in rec.items()}
                missing = [c for c in columns if c != "label" and c not in fields]
                if missing:
                    raise ParseError(f"missing fields {missing}", path, line)
                examples.append(Example(_derive_fields(dataset_id, fields), y, ex_id))
    else:
        raise ValueError(f"unknown dataset format {format!r}")

    field_names = [c for c in columns if c != "label"]
    if examples:
        field_names = list(examples[0].fields)
    return Dataset(field_names, examples, label_names, dataset_id)


@dataclass
class FewShotSplit:
    d_train: list
    d_valid: list
    seed: int
    n: int
    stratified: bool = True
    class_counts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.d_train) + len(self.d_valid) != self.n:
            raise ValueError("split sizes do not add up to n")


def _halve(per_class: list) -> tuple:
    """Split per-class picks into train/valid halves, |train| = ceil(N/2)."""
    n = sum(len(p) for p in per_class)
    take = [len(p) // 2 for p in per_class]
    extra = math.ceil(n / 2) - sum(take)
    for c, p in enumerate(per_class):
        if extra and len(p) % 2:
            take[c] += 1
            extra -= 1
    train = [i for p, t in zip(per_class, take) for i in p[:t]]
    valid = [i for p, t in zip(per_class, take) for i in p[t:]]
    return train, valid


def sample_fewshot(ds: Dataset, n: int, seed: int, stratified: bool = True) -> FewShotSplit:
    """Draw a labelled set D of size ``n`` from ``ds`` and split it in halves.

    Stratified draws take ``n // C`` examples per class, the remainder going
    one each to the lowest class indices; the halves then keep the per-class
    balance as far as parity allows. The draw depends only on ``seed``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > len(ds):
        raise ValueError(f"cannot sample {n} examples from a pool of {len(ds)}")
    rng = np.random.default_rng(seed)
    n_labels = len(ds.label_names)
    labels = ds.labels
    if stratified:
        base, rem = divmod(n, n_labels)
        quota = [base + (1 if c < rem else 0) for c in range(n_labels)]
        per_class = []
        for c in range(n_labels):
            pool = np.flatnonzero(labels == c)
            if quota[c] > len(pool):
                raise ValueError(f"class {c} has {len(pool)} examples, {quota[c]} requested")
            per_class.append([int(i) for i in rng.permutation(pool)[: quota[c]]])
    else:
        picks = rng.permutation(len(ds))[:n]
        per_class = [[int(i) for i in picks if labels[i] == c] for c in range(n_labels)]
    train, valid = _halve(per_class)
    return FewShotSplit(
        [ds.examples[i] for i in train],
        [ds.examples[i] for i in valid],
        seed,
        n,
        stratified,
        [len(p) for p in per_class],
    )
