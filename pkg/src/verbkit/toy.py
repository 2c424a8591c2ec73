"""Self-contained toy data and a tiny masked LM for offline runs.

Nothing here is a benchmark. The toy corpus has four AG-shaped topics whose
headlines draw on disjoint keyword banks, and ``build_toy_backend`` makes a
small RoBERTa (own byte-level BPE vocabulary, random init, optionally a few
hundred MLM steps on the toy corpus, where the template lines always
mask the topic word). Tests and demos use them to exercise
every code path without downloading a checkpoint.
"""

from __future__ import annotations

import numpy as np
import torch

from verbkit.datasets import Dataset
from verbkit.lm_backend import MaskedLM
from verbkit.templates import Example, builtin_templates, render

TOY_LABELS = ["World", "Sports", "Business", "Sci/Tech"]

TOPIC_WORDS = {
    "World": ["president", "election", "minister", "government", "war", "treaty",
              "parliament", "embassy", "rebels", "summit", "world", "politics"],
    "Sports": ["team", "coach", "match", "league", "season", "striker", "championship",
               "goal", "tournament", "stadium", "sports", "players"],
    "Business": ["shares", "profit", "market", "bank", "stocks", "merger", "investors",
                 "earnings", "company", "economy", "business", "sales"],
    "Sci/Tech": ["software", "internet", "researchers", "computer", "space", "chip",
                 "study", "phone", "web", "science", "technology", "robot"],
}

FILLERS = ["the", "a", "new", "says", "after", "in", "on", "report", "today", "week", "big", "over"]

# Words that fill the MASK slot during toy pretraining, per topic.
_MASK_WORDS = {
    "World": ["world", "politics"],
    "Sports": ["sports"],
    "Business": ["business"],
    "Sci/Tech": ["science", "technology"],
}


def toy_headline(label: int, rng: np.random.Generator) -> str:
    bank = TOPIC_WORDS[TOY_LABELS[label]]
    words = list(rng.choice(bank, size=3, replace=False))
    fill = list(rng.choice(FILLERS, size=2, replace=False))
    text = f"{words[0]} {fill[0]} {words[1]} {fill[1]} {words[2]}"
    return text[0].upper() + text[1:]


def toy_dataset(n_per_class: int, seed: int = 0) -> Dataset:
    """AG-shaped dataset (fields title/description/text) of toy headlines."""
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_per_class * len(TOY_LABELS)):
        y = i % len(TOY_LABELS)
        title = toy_headline(y, rng)
        examples.append(Example({"title": title, "description": "", "text": title}, y, f"toy-{seed}-{i}"))
    return Dataset(["title", "description", "text"], examples, list(TOY_LABELS), "toy")


def _corpus(rng, n=400) -> tuple:
    """Plain headlines plus (headline, topic word) pairs for the templates."""
    lines, cloze = [], []
    for i in range(n):
        y = i % len(TOY_LABELS)
        h = toy_headline(y, rng)
        lines += [h, " " + h]
        for t in builtin_templates("ag"):
            w = str(rng.choice(_MASK_WORDS[TOY_LABELS[y]]))
            lines.append(t.text(Example({"text": h}), mask_token=w))
            cloze.append((t, h, w))
    return lines, cloze


def _tokenizer(lines, vocab_size):
    from tokenizers import AddedToken, ByteLevelBPETokenizer
    from tokenizers.processors import RobertaProcessing
    from transformers import PreTrainedTokenizerFast

    bpe = ByteLevelBPETokenizer()
    specials = ["<s>", "<pad>", "</s>", "<unk>", AddedToken("<mask>", lstrip=True)]
    bpe.train_from_iterator(lines, vocab_size=vocab_size, min_frequency=1, special_tokens=specials,
                            show_progress=False)
    bpe._tokenizer.post_processor = RobertaProcessing(("</s>", 2), ("<s>", 0))
    tok = PreTrainedTokenizerFast(
        tokenizer_object=bpe._tokenizer, bos_token="<s>", eos_token="</s>", unk_token="<unk>",
        pad_token="<pad>", cls_token="<s>", sep_token="</s>", mask_token="<mask>",
    )
    tok.model_max_length = 128
    return tok


def build_toy_backend(
    seed: int = 0,
    hidden_size: int = 64,
    layers: int = 2,
    heads: int = 2,
    dropout: float = 0.1,
    vocab_size: int = 1000,
    pretrain_steps: int = 0,
    pretrain_lr: float = 3e-3,
    device: str = "cpu",
) -> MaskedLM:
    """Tiny RoBERTa on a toy BPE vocabulary, optionally MLM-pretrained."""
    from transformers import RobertaConfig, RobertaForMaskedLM

    rng = np.random.default_rng(seed)
    lines, cloze = _corpus(rng)
    tok = _tokenizer(lines, vocab_size)
    torch.manual_seed(seed)
    cfg = RobertaConfig(
        vocab_size=len(tok), hidden_size=hidden_size, num_hidden_layers=layers,
        num_attention_heads=heads, intermediate_size=2 * hidden_size, max_position_embeddings=130,
        pad_token_id=tok.pad_token_id, bos_token_id=0, eos_token_id=2,
        hidden_dropout_prob=dropout, attention_probs_dropout_prob=dropout,
    )
    model = RobertaForMaskedLM(cfg)
    if pretrain_steps:
        _pretrain(model, tok, lines, cloze, pretrain_steps, pretrain_lr, seed)
    return MaskedLM(model, tok, device=device)


class _Tok:
    def __init__(self, tok):
        self.tok = tok
        self.mask_token_id = tok.mask_token_id

    def tokenize(self, text):
        return self.tok(text, add_special_tokens=False)["input_ids"]


def _encode_cloze(tok, cloze):
    """Token ids with the topic word at the MASK slot, and that word's positions."""
    wrap = _Tok(tok)
    out = []
    for t, h, w in cloze:
        ids = list(render(t, Example({"text": h}), wrap).ids)
        word = wrap.tokenize(" " + w)
        m = ids.index(tok.mask_token_id)
        ids = [tok.cls_token_id] + ids[:m] + word + ids[m + 1:] + [tok.sep_token_id]
        out.append((ids, list(range(m + 1, m + 1 + len(word)))))
    return out


def _pretrain(model, tok, lines, cloze, steps, lr, seed, batch_size=32, mask_prob=0.15):
    """MLM on the toy corpus; in template lines the topic word is always masked."""
    gen = torch.Generator().manual_seed(seed)
    enc = [(tok(line)["input_ids"], []) for line in lines] + _encode_cloze(tok, cloze)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    specials = torch.tensor(sorted(set(tok.all_special_ids)))
    model.train()
    for _ in range(steps):
        idx = torch.randint(len(enc), (batch_size,), generator=gen).tolist()
        width = max(len(enc[i][0]) for i in idx)
        ids = torch.full((batch_size, width), tok.pad_token_id)
        forced = torch.zeros((batch_size, width), dtype=torch.bool)
        for r, i in enumerate(idx):
            row, pos = enc[i]
            ids[r, : len(row)] = torch.tensor(row)
            forced[r, pos] = True
        attn = (ids != tok.pad_token_id).long()
        maskable = attn.bool() & ~torch.isin(ids, specials)
        chosen = ((torch.rand(ids.shape, generator=gen) < mask_prob) & maskable) | forced
        labels = torch.where(chosen, ids, torch.full_like(ids, -100))
        inputs = torch.where(chosen, torch.full_like(ids, tok.mask_token_id), ids)
        loss = model(input_ids=inputs, attention_mask=attn, labels=labels).loss
        loss.backward()
        opt.step()
        opt.zero_grad()
    model.eval()
