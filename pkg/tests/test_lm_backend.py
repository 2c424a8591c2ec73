"""Masked LM backend on the toy RoBERTa: forward passes, tokenization, training."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from verbkit.errors import StructuralError, TrainingError
from verbkit.scoring import make_head
from verbkit.templates import Example, Literal, Mask, MaskedSequence, Piece, Template, builtin_templates, render
from verbkit.toy import toy_dataset, toy_headline
from verbkit.verbalizers import build_manual

T0 = builtin_templates("ag")[0]


def _seq(lm, text="Coach says the league season is over", t=T0):
    return render(t, Example({"text": text}), lm)


class TestForward:
    def test_logits_deterministic(self, toy_lm):
        s = _seq(toy_lm)
        a, b = toy_lm.mask_logits(s), toy_lm.mask_logits(s)
        assert a.shape == (toy_lm.vocab_size,)
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_single(self, toy_lm):
        seqs = [_seq(toy_lm, x.fields["text"]) for x in toy_dataset(2, seed=4).examples]
        batch = toy_lm.mask_logits_batch(seqs)
        for s, row in zip(seqs, batch):
            np.testing.assert_allclose(toy_lm.mask_logits(s), row, atol=1e-4)

    def test_hidden_state(self, toy_lm):
        h = toy_lm.mask_hidden_state(_seq(toy_lm))
        assert h.shape == (toy_lm.hidden_size,)
        assert np.all(np.isfinite(h))
        np.testing.assert_array_equal(h, toy_lm.mask_hidden_state(_seq(toy_lm)))

    def test_hidden_states_differ(self, toy_lm):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = toy_lm.mask_hidden_state(_seq(toy_lm, toy_headline(0, rng)))
            b = toy_lm.mask_hidden_state(_seq(toy_lm, toy_headline(2, rng)))
            assert np.any(a != b)

    def test_two_masks(self, toy_lm):
        t = Template(5, (Mask(), Literal(" and <mask> again")))
        with pytest.raises(StructuralError):
            render(t, Example({}), toy_lm)

    def test_foreign_mask_id(self, toy_lm):
        s = MaskedSequence((Piece("mask", (3,)),), 3)
        with pytest.raises(StructuralError):
            toy_lm.mask_logits(s)

    def test_long_input_truncated(self, toy_lm):
        s = _seq(toy_lm, " ".join(["coach"] * 400))
        ids, attn, pos = toy_lm._encode([s])
        assert ids.shape[1] == toy_lm.max_length
        assert int(ids[0, pos[0]]) == toy_lm.mask_token_id
        assert toy_lm.mask_logits(s).shape == (toy_lm.vocab_size,)

    def test_scaffold_too_long(self, toy_lm):
        t = Template(6, (Literal(" ".join(["topic"] * 400)), Mask()))
        with pytest.raises(StructuralError):
            toy_lm.mask_logits(render(t, Example({}), toy_lm))

    def test_sports_beats_business(self, toy_lm):
        """Ten unambiguous sports headlines: ' sports' must outscore ' business' on at least 8."""
        rng = np.random.default_rng(42)
        (sports,) = toy_lm.tokenize_label_word("sports")
        (business,) = toy_lm.tokenize_label_word("business")
        wins = 0
        for _ in range(10):
            z = toy_lm.mask_logits(_seq(toy_lm, toy_headline(1, rng)))
            wins += z[sports] > z[business]
        assert wins >= 8


class TestTokenization:
    def test_label_word_single_token(self, toy_lm):
        ids = toy_lm.tokenize_label_word("sports")
        assert ids == toy_lm.tokenizer(" sports", add_special_tokens=False)["input_ids"]
        assert len(ids) == 1
        assert toy_lm.tokenizer.convert_ids_to_tokens(ids) == ["Ġsports"]

    def test_empty(self, toy_lm):
        with pytest.raises(ValueError):
            toy_lm.tokenize_label_word("")
        with pytest.raises(ValueError):
            toy_lm.tokenize_label_word("   ")

    def test_rare_word_splits(self, toy_lm):
        word = "xylophonic"
        assert len(toy_lm.tokenizer(" " + word, add_special_tokens=False)["input_ids"]) >= 2
        assert len(toy_lm.tokenize_label_word(word)) >= 2

    def test_vocab_keys_unique(self, toy_lm):
        keys = toy_lm.vocab_keys()
        assert len(keys) == toy_lm.vocab_size == len(set(keys))
        (i,) = toy_lm.tokenize_label_word("sports")
        assert keys[i] == " sports"

    def test_special_ids(self, toy_lm):
        assert toy_lm.mask_token_id in toy_lm.special_ids


class TestEmbeddingStore:
    def test_round_trip_through_model(self, toy_lm):
        store = toy_lm.embedding_matrix()
        assert store.dim == toy_lm.hidden_size
        np.testing.assert_array_equal(store.token_ids, np.arange(toy_lm.vocab_size))
        assert toy_lm.embedding_matrix() is store


class _NanHead(torch.nn.Module):
    needs = "logits"

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.ones(1))

    def forward(self, logits):
        return logits[..., :4] * self.w * float("nan")


def _batch(lm, n_per_class=1, seed=9):
    return [(render(T0, x, lm), x.label) for x in toy_dataset(n_per_class, seed=seed).examples]


class TestTraining:
    def test_overfit_single_batch(self, raw_lm):
        state = raw_lm.snapshot()
        try:
            head = make_head(build_manual("ag"), raw_lm)
            batch = _batch(raw_lm)
            raw_lm.configure_optimizer(head, 1000, lr=1e-3, warmup_ratio=0.0)
            losses = [raw_lm.train_step(batch, head) for _ in range(50)]
            assert losses[-1] <= 0.1 * losses[0]
            # the window trend is downward: every 10-step block mean below the previous one
            blocks = np.asarray(losses).reshape(5, 10).mean(axis=1)
            assert np.all(np.diff(blocks) < 0)
            assert raw_lm.loss_history == losses
        finally:
            raw_lm.restore(state)

    def test_frozen_parameters(self, raw_lm):
        params = list(raw_lm.model.parameters())
        try:
            for p in params:
                p.requires_grad_(False)
            head = make_head(build_manual("ag"), raw_lm)
            raw_lm.configure_optimizer(head, 10)
            assert raw_lm.optimizer is None
            batch = _batch(raw_lm)
            losses = [raw_lm.train_step(batch, head) for _ in range(3)]
            assert losses[0] == losses[1] == losses[2]
        finally:
            for p in params:
                p.requires_grad_(True)

    def test_nan_loss(self, raw_lm):
        head = _NanHead()
        raw_lm.configure_optimizer(head, 10)
        with pytest.raises(TrainingError):
            raw_lm.train_step(_batch(raw_lm), head)

    def test_optimizer_groups(self, raw_lm):
        from verbkit.verbalizers import WeightedVerbalizer

        v = build_manual("ag")
        wv = WeightedVerbalizer(v.labels, v.words, weights=[[1.0] * len(ws) for ws in v.words])
        head = make_head(wv, raw_lm)
        raw_lm.configure_optimizer(head, 100, lr=1e-5, weight_decay=0.01)
        decay, no_decay = raw_lm.optimizer.param_groups
        assert decay["weight_decay"] == 0.01 and no_decay["weight_decay"] == 0.0
        assert any(p is head.q for p in no_decay["params"])
        names = {id(p): n for n, p in raw_lm.model.named_parameters()}
        assert all(not names[id(p)].endswith("bias") for p in decay["params"])
        assert all("LayerNorm" not in names[id(p)] for p in decay["params"])
        assert decay["betas"] == (0.9, 0.999)

    def test_warmup_then_linear_decay(self, raw_lm):
        head = make_head(build_manual("ag"), raw_lm)
        raw_lm.configure_optimizer(head, 100, lr=1e-5, warmup_ratio=0.1)
        sched = raw_lm.scheduler
        lrs = []
        for _ in range(100):
            lrs.append(sched.get_last_lr()[0])
            raw_lm.optimizer.step()
            sched.step()
        assert lrs[0] == 0.0
        assert lrs[10] == pytest.approx(1e-5)
        assert lrs[5] == pytest.approx(0.5e-5)
        assert lrs[55] == pytest.approx(1e-5 * 45 / 90)
        assert sched.get_last_lr()[0] == pytest.approx(0.0, abs=1e-12)

    def test_snapshot_restore(self, raw_lm):
        state = raw_lm.snapshot()
        s = _seq(raw_lm)
        before = raw_lm.mask_logits(s)
        with torch.no_grad():
            for p in raw_lm.model.parameters():
                p.add_(0.01)
        assert not np.array_equal(before, raw_lm.mask_logits(s))
        raw_lm.restore(state)
        np.testing.assert_array_equal(before, raw_lm.mask_logits(s))

    def test_eval_mode_restored(self, raw_lm):
        raw_lm.model.train()
        raw_lm.mask_logits(_seq(raw_lm))
        assert raw_lm.model.training
        raw_lm.model.eval()
        assert math.isfinite(float(raw_lm.mask_logits(_seq(raw_lm))[0]))
