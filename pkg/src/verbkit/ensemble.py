"""Combining per-template models: majority vote, mean probability, mean logit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from verbkit.scoring import ClassScores, predict_proba

STRATEGIES = ("vote", "proba", "logit")
DEFAULT_STRATEGY = "logit"


@dataclass
class MemberOutput:
    template_id: int
    class_logits: ClassScores

    @classmethod
    def from_logits(cls, template_id, logits) -> "MemberOutput":
        return cls(template_id, ClassScores(np.asarray(logits, dtype=np.float64)))


def _stack(members: Sequence[MemberOutput]) -> np.ndarray:
    if not members:
        raise ValueError("cannot aggregate an empty member list")
    z = np.stack([np.asarray(m.class_logits.logits, dtype=np.float64) for m in members])
    if z.ndim != 2:
        raise ValueError("members must hold one logit vector each")
    return z


def aggregate_vote(members: Sequence[MemberOutput]) -> int:
    """Modal argmax label. Ties go to the tied label with the highest mean
    probability across members, then to the lowest label index."""
    return int(ensemble_predictions(_stack(members)[:, None, :], "vote")[0])


def aggregate_proba(members: Sequence[MemberOutput]) -> int:
    return int(np.argmax(predict_proba(_stack(members)).mean(axis=0)))


def aggregate_logit(members: Sequence[MemberOutput]) -> int:
    return int(np.argmax(_stack(members).mean(axis=0)))


def aggregate(members: Sequence[MemberOutput], strategy: str = DEFAULT_STRATEGY) -> int:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown ensemble strategy {strategy!r}; expected one of {STRATEGIES}")
    return {"vote": aggregate_vote, "proba": aggregate_proba, "logit": aggregate_logit}[strategy](members)


def ensemble_predictions(logits, strategy: str = DEFAULT_STRATEGY) -> np.ndarray:
    """Vectorised aggregation over examples.

    ``logits`` has shape (members, examples, labels); returns one label per
    example, identical to calling :func:`aggregate` example by example.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown ensemble strategy {strategy!r}; expected one of {STRATEGIES}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] == 0:
        raise ValueError("expected a non-empty (members, examples, labels) array")
    if strategy == "logit":
        return np.argmax(z.mean(axis=0), axis=-1)
    mean_p = predict_proba(z).mean(axis=0)
    if strategy == "proba":
        return np.argmax(mean_p, axis=-1)
    n_labels = z.shape[-1]
    votes = np.argmax(z, axis=-1)  # (members, examples)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(n_labels)], axis=-1)
    tied = counts == counts.max(axis=-1, keepdims=True)
    # argmax returns the first maximum, which is the lowest index among equals
    return np.argmax(np.where(tied, mean_p, -np.inf), axis=-1)
