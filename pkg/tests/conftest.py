from __future__ import annotations

import numpy as np
import pytest

from verbkit.templates import MaskedSequence


class StubLM:
    """Word-level stand-in for a masked LM, driven by a numpy logit function.

    ``logit_fn(ids)`` receives the token ids of one rendered sequence and
    returns a vocabulary-sized logit vector. Token 0 is the MASK and token 1
    an unknown-word bucket; both count as special.
    """

    def __init__(self, words, logit_fn=None, hidden_size=8, seed=0):
        self.words = ["<mask>", "<unk>"] + list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.mask_token_id = 0
        self.vocab_size = len(self.words)
        self.special_ids = [0, 1]
        self.hidden_size = hidden_size
        self.device = "cpu"
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(size=(self.vocab_size, hidden_size))
        self.logit_fn = logit_fn or (lambda ids: self._proj[ids].sum(axis=0) @ self._proj.T)

    def tokenize(self, text):
        out = []
        for piece in text.replace("<mask>", " <mask> ").split():
            out.append(self.index.get(piece, 1))
        return out

    def tokenize_label_word(self, word):
        if not word.strip():
            raise ValueError("empty label word")
        return [self.index.get(word.strip(), 1)]

    def vocab_keys(self):
        return list(self.words)

    def mask_logits_batch(self, seqs):
        for s in seqs:
            assert isinstance(s, MaskedSequence)
        return np.stack([np.asarray(self.logit_fn(np.asarray(s.ids)), dtype=np.float64) for s in seqs])


@pytest.fixture(scope="session")
def toy_lm():
    """Toy RoBERTa pretrained until it separates the four toy topics zero-shot."""
    from verbkit.toy import build_toy_backend

    return build_toy_backend(seed=0, pretrain_steps=700)


@pytest.fixture(scope="session")
def raw_lm():
    """Untrained toy RoBERTa with dropout off, for optimisation tests."""
    from verbkit.toy import build_toy_backend

    return build_toy_backend(seed=1, dropout=0.0)


@pytest.fixture
def fresh_lm(toy_lm):
    """The session toy model, restored to its pretrained weights afterwards."""
    state = toy_lm.snapshot()
    yield toy_lm
    toy_lm.restore(state)
    toy_lm.optimizer = toy_lm.scheduler = None


def planted_petal_instance(seed, n_labels=None, n_words=None, n_per_class=None):
    """Random stub LM plus labelled examples where one token separates class 0.

    Every example carries a class marker word. The stub's MASK logits are
    random per example, except that the planted token gets +10 on class-0
    examples and -10 elsewhere. Returns (lm, template, examples, labels, planted_id).
    """
    from verbkit.templates import Example, Field, Literal, Mask, Template

    rng = np.random.default_rng(seed)
    n_labels = n_labels or int(rng.integers(2, 6))
    n_words = n_words or int(rng.integers(20, 200))
    n_per_class = n_per_class or int(rng.integers(2, 8))
    markers = [f"class{c}" for c in range(n_labels)]
    vocab = [f"tok{i}" for i in range(n_words)] + markers
    lm = StubLM(vocab)
    planted = int(rng.integers(2, 2 + n_words))
    marker_ids = {lm.index[m]: c for c, m in enumerate(markers)}
    noise = {}

    def logit_fn(ids):
        key = tuple(int(i) for i in ids)
        if key not in noise:
            noise[key] = np.random.default_rng(abs(hash(key)) % (2**32)).normal(size=lm.vocab_size)
        z = noise[key].copy()
        label = next(marker_ids[i] for i in key if i in marker_ids)
        z[planted] = 10.0 if label == 0 else -10.0
        return z

    lm.logit_fn = logit_fn
    template = Template(0, (Field("text"), Literal(" "), Mask()))
    examples = []
    for c in range(n_labels):
        for j in range(n_per_class):
            filler = " ".join(rng.choice(vocab[:n_words], size=3))
            examples.append(Example({"text": f"{filler} {markers[c]} e{j}"}, c, f"{c}-{j}"))
    return lm, template, examples, [f"L{c}" for c in range(n_labels)], planted


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the summary lines."""

    class Recorder:
        def __init__(self, number):
            self.number = number
            self.details = []

        def note(self, text):
            self.details.append(text)

    number = request.node.get_closest_marker("criterion").args[0]
    rec = Recorder(number)
    yield rec
    call = getattr(request.node, "rep_call", None)
    ok = call is not None and call.passed
    reason = ""
    if call is not None and call.failed:
        reason = str(call.longrepr.reprcrash.message if hasattr(call.longrepr, "reprcrash") else call.longrepr)
        reason = reason.splitlines()[0]
    ACCEPTANCE.setdefault(number, []).append((ok, "; ".join(rec.details), reason))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p[0] for p in parts)
        detail = " | ".join(filter(None, [p[1] if p[0] else (p[2] or p[1]) for p in parts]))
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
