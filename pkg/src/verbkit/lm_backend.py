"""Masked language model backend built on Hugging Face ``transformers``.

The backend owns a model and its tokenizer and exposes what verbalizers
need: vocabulary logits and the final hidden state at the MASK position, the
input-embedding matrix as an :class:`EmbeddingStore`, label-word
tokenization, and a single optimizer step for fine-tuning.

Training mutates the model; an instance must not be shared while training.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from verbkit.embeddings import EmbeddingStore
from verbkit.errors import StructuralError, TrainingError
from verbkit.templates import MaskedSequence

logger = logging.getLogger(__name__)

_NO_DECAY = ("bias", "LayerNorm.weight", "layer_norm.weight", "ln.weight")


def default_device() -> str:
    return "cuda" if torch.cuda.is_available() else "cpu"


class MaskedLM:
    def __init__(self, model, tokenizer, device: Optional[str] = None, max_length: Optional[int] = None):
        self.device = device or default_device()
        self.model = model.to(self.device)
        self.model.eval()
        self.tokenizer = tokenizer
        if tokenizer.mask_token_id is None:
            raise ValueError("tokenizer has no MASK token")
        self.mask_token_id = int(tokenizer.mask_token_id)
        self.mask_token = tokenizer.mask_token
        self.vocab_size = len(tokenizer)
        self.hidden_size = int(model.config.hidden_size)
        self._prefix = [tokenizer.cls_token_id] if tokenizer.cls_token_id is not None else []
        self._suffix = [tokenizer.sep_token_id] if tokenizer.sep_token_id is not None else []
        if max_length is None:
            max_length = getattr(tokenizer, "model_max_length", None)
            if max_length is None or max_length > 100_000:
                max_length = model.config.max_position_embeddings
                if getattr(model.config, "model_type", "") in ("roberta", "xlm-roberta", "camembert"):
                    max_length -= 2
        self.max_length = int(max_length)
        self._keys = None
        self._store = None
        self.optimizer = None
        self.scheduler = None
        self.loss_history = []

    @classmethod
    def from_pretrained(cls, name: str, device: Optional[str] = None, **kwargs) -> "MaskedLM":
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(name, **kwargs)
        model = AutoModelForMaskedLM.from_pretrained(name, **kwargs)
        return cls(model, tokenizer, device=device)

    # -- tokenization ------------------------------------------------------

    @property
    def special_ids(self) -> list:
        return sorted(set(self.tokenizer.all_special_ids))

    def tokenize(self, text: str) -> list:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def tokenize_label_word(self, word: str) -> list:
        """Token ids of ``word`` as it would appear mid-sentence."""
        if not word or not word.strip():
            raise ValueError("label word must be a non-empty string")
        text = word if word[0].isspace() else " " + word
        ids = self.tokenize(text)
        # some tokenizers emit a lone word-boundary token for the leading space
        if len(ids) > 1 and self.tokenizer.convert_ids_to_tokens(ids[0]) in ("Ġ", "▁"):
            ids = ids[1:]
        if not ids:
            raise ValueError(f"label word {word!r} produced no tokens")
        return ids

    def vocab_keys(self) -> list:
        """One unique display string per token id.

        Tokens decode to their surface form (" sports" for "Ġsports");
        tokens whose surface form is empty or shared fall back to the raw
        token string.
        """
        if self._keys is None:
            raw = self.tokenizer.convert_ids_to_tokens(list(range(self.vocab_size)))
            decoded = [self.tokenizer.convert_tokens_to_string([t]) for t in raw]
            counts = {}
            for d in decoded:
                counts[d] = counts.get(d, 0) + 1
            keys = [d if d and counts[d] == 1 else r for d, r in zip(decoded, raw)]
            seen = set()
            for i, k in enumerate(keys):
                if k in seen:
                    k = f"{raw[i]}#{i}"
                    keys[i] = k
                seen.add(k)
            self._keys = keys
        return self._keys

    # -- forward passes ----------------------------------------------------

    def _encode(self, seqs: Sequence[MaskedSequence]):
        if not seqs:
            raise ValueError("empty batch")
        budget = self.max_length - len(self._prefix) - len(self._suffix)
        rows, positions = [], []
        for s in seqs:
            if not isinstance(s, MaskedSequence):
                raise TypeError("expected a MaskedSequence")
            if s.mask_token_id != self.mask_token_id:
                raise StructuralError("sequence was rendered for a different tokenizer")
            s = s.truncate(budget)
            ids = self._prefix + list(s.ids) + self._suffix
            if ids.count(self.mask_token_id) != 1:
                raise StructuralError("input must contain exactly one MASK token")
            rows.append(ids)
            positions.append(len(self._prefix) + s.mask_index)
        width = max(len(r) for r in rows)
        pad = self.tokenizer.pad_token_id if self.tokenizer.pad_token_id is not None else 0
        input_ids = torch.full((len(rows), width), pad, dtype=torch.long)
        attention = torch.zeros((len(rows), width), dtype=torch.long)
        for i, r in enumerate(rows):
            input_ids[i, : len(r)] = torch.tensor(r)
            attention[i, : len(r)] = 1
        return input_ids.to(self.device), attention.to(self.device), torch.tensor(positions, device=self.device)

    def forward(self, seqs: Sequence[MaskedSequence], hidden: bool = False):
        """Differentiable (vocab_logits [B, V], hidden [B, d] or None)."""
        input_ids, attention, pos = self._encode(seqs)
        out = self.model(input_ids=input_ids, attention_mask=attention, output_hidden_states=hidden)
        rows = torch.arange(len(pos), device=self.device)
        logits = out.logits[rows, pos, : self.vocab_size]
        h = out.hidden_states[-1][rows, pos] if hidden else None
        return logits, h

    def _eval(self, seqs, hidden):
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                return self.forward(seqs, hidden=hidden)
        finally:
            self.model.train(was_training)

    def mask_logits_batch(self, seqs: Sequence[MaskedSequence]) -> np.ndarray:
        logits, _ = self._eval(seqs, hidden=False)
        return logits.double().cpu().numpy()

    def mask_logits(self, seq: MaskedSequence) -> np.ndarray:
        """Unnormalised vocabulary logits at the MASK position, eval mode."""
        return self.mask_logits_batch([seq])[0]

    def mask_hidden_state(self, seq: MaskedSequence) -> np.ndarray:
        _, h = self._eval([seq], hidden=True)
        return h[0].double().cpu().numpy()

    def embedding_matrix(self) -> EmbeddingStore:
        if self._store is None:
            weight = self.model.get_input_embeddings().weight.detach()[: self.vocab_size]
            self._store = EmbeddingStore(
                self.vocab_keys(), weight.float().cpu().numpy(), token_ids=np.arange(self.vocab_size)
            )
        return self._store

    # -- training ----------------------------------------------------------

    def snapshot(self) -> dict:
        return {k: v.detach().cpu().clone() for k, v in self.model.state_dict().items()}

    def restore(self, state: dict) -> None:
        self.model.load_state_dict(state)
        self._store = None

    def configure_optimizer(
        self,
        head: Optional[nn.Module],
        num_training_steps: int,
        lr: float = 1e-5,
        weight_decay: float = 0.01,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        warmup_ratio: float = 0.1,
    ) -> None:
        """AdamW over model and head parameters with linear warmup/decay.

        Biases, LayerNorm weights and head parameters are not decayed.
        """
        from transformers import get_linear_schedule_with_warmup

        decay, no_decay = [], []
        for name, p in self.model.named_parameters():
            if p.requires_grad:
                (no_decay if any(n in name for n in _NO_DECAY) else decay).append(p)
        if head is not None:
            no_decay += [p for p in head.parameters() if p.requires_grad]
        groups = [g for g in ({"params": decay, "weight_decay": weight_decay},
                              {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
        self.loss_history = []
        if not groups:
            self.optimizer = self.scheduler = None
            return
        self.optimizer = torch.optim.AdamW(groups, lr=lr, betas=tuple(betas), eps=eps)
        warmup = int(math.ceil(warmup_ratio * num_training_steps)) if warmup_ratio else 0
        self.scheduler = get_linear_schedule_with_warmup(self.optimizer, warmup, max(num_training_steps, 1))

    def batch_loss(self, batch, head: nn.Module) -> torch.Tensor:
        seqs = [s for s, _ in batch]
        gold = torch.tensor([int(y) for _, y in batch], device=self.device)
        logits, h = self.forward(seqs, hidden=head.needs == "hidden")
        scores = head(h if head.needs == "hidden" else logits)
        return nn.functional.cross_entropy(scores.float(), gold)

    def train_step(self, batch, head: nn.Module) -> float:
        """One optimizer step on ``batch`` (a list of (MaskedSequence, label))."""
        self.model.train()
        head.to(self.device)
        loss = self.batch_loss(batch, head)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value}")
        if self.optimizer is not None and loss.requires_grad:
            loss.backward()
            self.optimizer.step()
            self.scheduler.step()
            self.optimizer.zero_grad(set_to_none=True)
        self.loss_history.append(value)
        self._store = None
        return value
