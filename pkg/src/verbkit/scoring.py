"""From MASK-position model outputs to class scores.

The numpy functions are the reference definitions. The torch heads
compute the same quantities differentiably and are what training and batch
evaluation use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from verbkit.errors import NumericError
from verbkit.verbalizers import SoftVerbalizer, Verbalizer, WeightedVerbalizer


def predict_proba(logits) -> np.ndarray:
    """Softmax over the last axis, stabilised by max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite class logit")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassScores:
    logits: np.ndarray

    @property
    def proba(self) -> np.ndarray:
        return predict_proba(self.logits)

    @property
    def prediction(self):
        return np.argmax(self.logits, axis=-1)


def cross_entropy(scores, gold: int) -> float:
    """-log p(gold), computed as logsumexp(logits) - logits[gold]."""
    z = np.asarray(scores.logits if isinstance(scores, ClassScores) else scores, dtype=np.float64)
    if not 0 <= gold < z.shape[-1]:
        raise ValueError(f"gold label {gold} out of range for {z.shape[-1]} labels")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite class logit")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[gold])


def _require_ids(v: Verbalizer):
    for label, ts in zip(v.labels, v.token_ids):
        if any(t is None or len(t) == 0 for t in ts):
            raise ValueError(f"label {label!r} has unresolved words; call .resolved(lm) first")


def word_logits(vocab_logits, token_ids) -> np.ndarray:
    """Logit of one label word: the mean over its tokens' logits."""
    vl = np.asarray(vocab_logits, dtype=np.float64)
    return np.add.reduce(vl[..., list(token_ids)], axis=-1) / len(token_ids)


def _label_word_matrix(vl, v: Verbalizer, y: int) -> np.ndarray:
    return np.stack([word_logits(vl, t) for t in v.token_ids[y]], axis=-1)


def class_logits_mean(vocab_logits, v: Verbalizer) -> ClassScores:
    """Mean label-word logit per label; ``vocab_logits`` may be (V,) or (B, V)."""
    _require_ids(v)
    out = [
        np.add.reduce(_label_word_matrix(vocab_logits, v, y), axis=-1) / len(v.token_ids[y])
        for y in range(len(v))
    ]
    return ClassScores(np.stack(out, axis=-1))


def class_logits_weighted(vocab_logits, wv: WeightedVerbalizer) -> ClassScores:
    """Weighted mean of label-word logits, weights normalised by their signed sum."""
    _require_ids(wv)
    out = []
    for y, label in enumerate(wv.labels):
        q = np.asarray(wv.weights[y], dtype=np.float64)
        den = np.add.reduce(q)
        if den == 0:
            raise NumericError(f"weights of label {label!r} sum to zero")
        out.append(np.add.reduce(_label_word_matrix(vocab_logits, wv, y) * q, axis=-1) / den)
    return ClassScores(np.stack(out, axis=-1))


def class_logits_soft(hidden, sv: SoftVerbalizer) -> ClassScores:
    h = np.asarray(hidden, dtype=np.float64)
    if h.shape[-1] != sv.prototypes.shape[1]:
        raise ValueError(
            f"hidden size {h.shape[-1]} does not match prototype size {sv.prototypes.shape[1]}"
        )
    return ClassScores(h @ sv.prototypes.T)


# -- differentiable heads -----------------------------------------------------


class WordHead(nn.Module):
    """Class logits from vocabulary logits through (weighted) label words.

    With unit, frozen weights this is the plain mean over label words; with a
    WeightedVerbalizer the weights are a trainable parameter.
    """

    needs = "logits"

    def __init__(self, v: Verbalizer, trainable=None, dtype=torch.float32):
        super().__init__()
        _require_ids(v)
        self.verbalizer = v
        weighted = isinstance(v, WeightedVerbalizer)
        if trainable is None:
            trainable = weighted
        flat_tokens, word_label, seg = [], [], []
        w = 0
        for y, ts in enumerate(v.token_ids):
            for t in ts:
                for tok in t:
                    flat_tokens.append(tok)
                    seg.append((w, 1.0 / len(t)))
                word_label.append(y)
                w += 1
        avg = torch.zeros(len(flat_tokens), w, dtype=dtype)
        for i, (wi, val) in enumerate(seg):
            avg[i, wi] = val
        member = torch.zeros(w, len(v), dtype=dtype)
        member[torch.arange(w), torch.tensor(word_label)] = 1.0
        q = [x for qs in v.weights for x in qs] if weighted else [1.0] * w
        self.register_buffer("tokens", torch.tensor(flat_tokens, dtype=torch.long))
        self.register_buffer("avg", avg)
        self.register_buffer("member", member)
        self.q = nn.Parameter(torch.tensor(q, dtype=dtype), requires_grad=trainable)

    def forward(self, vocab_logits: torch.Tensor) -> torch.Tensor:
        m = vocab_logits[..., self.tokens].to(self.avg.dtype) @ self.avg
        den = self.q @ self.member
        if torch.any(den == 0):
            raise NumericError("label weights sum to zero")
        return ((m * self.q) @ self.member) / den

    def export(self) -> Verbalizer:
        """Verbalizer carrying the current (possibly trained) weights."""
        v = self.verbalizer
        if not isinstance(v, WeightedVerbalizer):
            return v
        flat = self.q.detach().cpu().double().tolist()
        weights, i = [], 0
        for ws in v.words:
            weights.append(flat[i:i + len(ws)])
            i += len(ws)
        return WeightedVerbalizer(
            v.labels, v.words, v.token_ids, weights=weights, provenance=v.provenance, missing=v.missing
        )


class SoftHead(nn.Module):
    """Class logits as dot products of the MASK hidden state with prototypes."""

    needs = "hidden"

    def __init__(self, sv: SoftVerbalizer, dtype=torch.float32):
        super().__init__()
        self.labels = list(sv.labels)
        self.prototypes = nn.Parameter(torch.tensor(sv.prototypes, dtype=dtype))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.prototypes.shape[1]:
            raise ValueError(
                f"hidden size {hidden.shape[-1]} does not match prototype size {self.prototypes.shape[1]}"
            )
        return hidden.to(self.prototypes.dtype) @ self.prototypes.T

    def export(self) -> SoftVerbalizer:
        return SoftVerbalizer(self.labels, self.prototypes.detach().cpu().double().numpy())


def make_head(v, lm=None, dtype=torch.float32) -> nn.Module:
    """Head for any verbalizer kind; word verbalizers are resolved against ``lm``."""
    if isinstance(v, SoftVerbalizer):
        return SoftHead(v, dtype=dtype)
    if lm is not None:
        v = v.resolved(lm)
    return WordHead(v, dtype=dtype)
