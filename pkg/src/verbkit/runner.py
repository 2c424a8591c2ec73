"""Few-shot benchmark protocol: fine-tune, evaluate, ensemble, report.

For every seed a labelled set D of size N is drawn from the training pool
and split in halves; one model per template is fine-tuned on the first half,
the epoch with the best accuracy on the second half is kept, and the
template models are ensembled on the test set. Reports carry per-seed and
per-template accuracies with mean and standard deviation across seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import yaml

from verbkit.datasets import Dataset, FewShotSplit, load_dataset, sample_fewshot
from verbkit.embeddings import load_external
from verbkit.ensemble import DEFAULT_STRATEGY, STRATEGIES, ensemble_predictions
from verbkit.errors import ParseError
from verbkit.lm_backend import MaskedLM
from verbkit.scoring import make_head
from verbkit.templates import Template, builtin_templates, load_templates, render
from verbkit.verbalizers import (
    DEFAULT_K,
    Verbalizer,
    build_manual,
    build_petal,
    enrich_maven,
    init_soft,
    load_verbalizer,
)

logger = logging.getLogger(__name__)

VERBALIZER_KINDS = ("manual", "soft", "auto", "maven", "auto-maven")


@dataclass
class TrainingConfig:
    lr: float = 1e-5
    epochs: int = 10
    batch_size: int = 4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_ratio: float = 0.1
    grad_accum: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.grad_accum != 1:
            raise ValueError("only gradient accumulation of 1 is supported")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class ExperimentConfig:
    dataset: str = "ag"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    data_format: str = "csv"
    checkpoint: str = "roberta-large"
    verbalizer: str = "manual"
    verbalizer_table: Optional[str] = None
    k: int = DEFAULT_K
    k_auto: int = 15
    embeddings: str = "lm"
    embeddings_format: str = "glove_text"
    embeddings_limit: Optional[int] = None
    templates_path: Optional[str] = None
    template_ids: list = field(default_factory=lambda: [0, 1, 2, 3])
    n: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    stratified: bool = True
    ensemble: str = DEFAULT_STRATEGY
    test_limit: Optional[int] = None
    test_seed: int = 0
    export_logits: bool = False
    output_dir: Optional[str] = None
    device: Optional[str] = None
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)
        if self.verbalizer not in VERBALIZER_KINDS:
            raise ValueError(f"verbalizer must be one of {VERBALIZER_KINDS}, got {self.verbalizer!r}")
        if self.ensemble not in STRATEGIES:
            raise ValueError(f"ensemble must be one of {STRATEGIES}, got {self.ensemble!r}")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.k < 0 or self.k_auto < 1:
            raise ValueError("k must be >= 0 and k_auto >= 1")
        self.template_ids = [int(t) for t in self.template_ids]
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ParseError(str(e), path=path) from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["training"]["betas"] = list(self.training.betas)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def variants(self) -> list:
        return ["auto", "auto+maven"] if self.verbalizer == "auto-maven" else [self.verbalizer]


# -- model loading -----------------------------------------------------------


def load_backend(checkpoint: str, device: Optional[str] = None) -> MaskedLM:
    """``toy`` / ``toy:<pretrain_steps>`` builds the offline toy model;
    anything else goes through ``transformers.from_pretrained``."""
    if checkpoint == "toy" or checkpoint.startswith("toy:"):
        from verbkit.toy import build_toy_backend

        steps = int(checkpoint.split(":", 1)[1]) if ":" in checkpoint else 700
        return build_toy_backend(pretrain_steps=steps, device=device or "cpu")
    return MaskedLM.from_pretrained(checkpoint, device=device)


# -- training and evaluation -------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    logits: np.ndarray
    gold: np.ndarray
    ids: list

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)


def score_examples(lm: MaskedLM, template: Template, heads, examples: Sequence, batch_size: int = 16) -> list:
    """Class logits of ``examples`` under each head; one forward pass per batch."""
    seqs = [render(template, x, lm) for x in examples]
    hidden = any(h.needs == "hidden" for h in heads)
    outs = [[] for _ in heads]
    for h in heads:
        h.to(lm.device).eval()
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            logits, hid = lm._eval(seqs[i:i + batch_size], hidden=hidden)
            for o, h in zip(outs, heads):
                o.append(h(hid if h.needs == "hidden" else logits).double().cpu().numpy())
    n_labels = [len(h.verbalizer) if hasattr(h, "verbalizer") else len(h.labels) for h in heads]
    return [np.concatenate(o) if o else np.zeros((0, c)) for o, c in zip(outs, n_labels)]


def accuracy(predictions, gold) -> float:
    """Fraction of predictions equal to the gold labels."""
    predictions, gold = np.asarray(predictions), np.asarray(gold)
    if predictions.shape != gold.shape:
        raise ValueError("predictions and gold labels differ in length")
    return float(np.mean(predictions == gold)) if len(gold) else float("nan")


def _accuracy(logits: np.ndarray, gold: np.ndarray) -> float:
    return accuracy(np.argmax(logits, axis=-1), gold)


def evaluate(lm: MaskedLM, template: Template, verbalizer, test: Sequence, batch_size: int = 16) -> EvalResult:
    """Accuracy on ``test`` plus per-example class logits.

    ``verbalizer`` may be any verbalizer or an already built scoring head.
    """
    if not test:
        raise ValueError("test set is empty")
    head = verbalizer if isinstance(verbalizer, torch.nn.Module) else make_head(verbalizer, lm)
    (logits,) = score_examples(lm, template, [head], test, batch_size)
    gold = np.asarray([x.label for x in test], dtype=np.int64)
    return EvalResult(_accuracy(logits, gold), logits, gold, [x.id for x in test])


@dataclass
class FineTuneResult:
    head: torch.nn.Module
    best_epoch: Optional[int]
    valid_accuracy: list
    loss_history: list

    @property
    def verbalizer(self):
        return self.head.export()


def fine_tune(
    lm: MaskedLM,
    template: Template,
    verbalizer,
    split: FewShotSplit,
    hp: Optional[TrainingConfig] = None,
    seed: int = 0,
) -> FineTuneResult:
    """Fine-tune ``lm`` and the verbalizer weights on ``split.d_train``.

    Validation accuracy on ``split.d_valid`` is measured after every epoch;
    the model is left in the state of the best epoch (earliest on ties).
    An empty split returns the untouched model. Raises TrainingError on a
    non-finite loss.
    """
    hp = hp or TrainingConfig()
    head = make_head(verbalizer, lm).to(lm.device)
    if not split.d_train or hp.epochs == 0:
        return FineTuneResult(head, None, [], [])
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    train = [(render(template, x, lm), x.label) for x in split.d_train]
    steps_per_epoch = math.ceil(len(train) / hp.batch_size)
    lm.configure_optimizer(
        head, steps_per_epoch * hp.epochs, lr=hp.lr, weight_decay=hp.weight_decay,
        betas=hp.betas, eps=hp.eps, warmup_ratio=hp.warmup_ratio,
    )
    best, best_epoch, best_state = -1.0, None, None
    history, losses = [], []
    for epoch in range(hp.epochs):
        order = torch.randperm(len(train), generator=gen).tolist()
        for i in range(0, len(order), hp.batch_size):
            losses.append(lm.train_step([train[j] for j in order[i:i + hp.batch_size]], head))
        if split.d_valid:
            acc = evaluate(lm, template, head, split.d_valid, hp.eval_batch_size).accuracy
        else:
            acc = 0.0
        history.append(acc)
        logger.info("epoch %d: valid accuracy %.4f", epoch, acc)
        if acc > best:
            best, best_epoch = acc, epoch
            best_state = (lm.snapshot(), {k: v.detach().clone() for k, v in head.state_dict().items()})
    lm.restore(best_state[0])
    head.load_state_dict(best_state[1])
    return FineTuneResult(head, best_epoch, history, losses)


# -- logit export ------------------------------------------------------------


def write_logits(path: Union[str, Path], ids, gold, logits, template_id=None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, y, row in zip(ids, gold, np.asarray(logits, dtype=np.float64).reshape(len(ids), -1)):
            rec = {"id": i, "gold": None if y is None else int(y), "logits": [float(v) for v in row]}
            if template_id is not None:
                rec["template_id"] = template_id
            f.write(json.dumps(rec) + "\n")


def export_logits(lm: MaskedLM, template: Template, verbalizer, examples: Sequence, path, batch_size: int = 16) -> None:
    """Write one JSON record per example: id, gold label, class-logit vector."""
    if not examples:
        Path(path).write_text("", encoding="utf-8")
        return
    head = verbalizer if isinstance(verbalizer, torch.nn.Module) else make_head(verbalizer, lm)
    (logits,) = score_examples(lm, template, [head], examples, batch_size)
    write_logits(path, [x.id for x in examples], [x.label for x in examples], logits, template.id)


def load_logits(path: Union[str, Path]) -> dict:
    ids, gold, rows, tid = [], [], [], None
    with open(path, encoding="utf-8") as f:
        for line, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                ids.append(rec["id"])
                gold.append(rec["gold"])
                rows.append(rec["logits"])
            except (json.JSONDecodeError, KeyError) as e:
                raise ParseError(f"bad logit record: {e}", path, line) from None
            tid = rec.get("template_id", tid)
    n = len(rows[0]) if rows else 0
    return {"ids": ids, "gold": gold, "logits": np.asarray(rows, dtype=np.float64).reshape(len(rows), n),
            "template_id": tid}


def ensemble_exports(paths: Sequence, strategy: str = DEFAULT_STRATEGY) -> dict:
    """Offline ensembling of several exported logit files over the same examples."""
    loaded = [load_logits(p) for p in paths]
    if not loaded:
        raise ValueError("no logit files given")
    ids = loaded[0]["ids"]
    for d in loaded[1:]:
        if d["ids"] != ids:
            raise ValueError("logit files cover different examples")
    preds = ensemble_predictions(np.stack([d["logits"] for d in loaded]), strategy)
    gold = loaded[0]["gold"]
    acc = None
    if ids and all(g is not None for g in gold):
        acc = float(np.mean(preds == np.asarray(gold)))
    return {"ids": ids, "predictions": preds, "accuracy": acc}


# -- reports -----------------------------------------------------------------


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and population standard deviation; (nan, nan) when empty."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class RunReport:
    config: dict
    config_hash: str
    variants: dict
    started: str = ""
    finished: str = ""
    stratified: bool = True

    def summary(self, variant: Optional[str] = None) -> tuple:
        variant = variant or next(iter(self.variants))
        v = self.variants[variant]
        return v["mean"], v["std"]

    def seed_accuracies(self, variant: Optional[str] = None) -> list:
        variant = variant or next(iter(self.variants))
        return [s["ensemble_accuracy"] for s in self.variants[variant]["seeds"]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, allow_nan=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))

    def format(self) -> str:
        lines = [f"config {self.config_hash}  dataset={self.config.get('dataset')}  N={self.config.get('n')}"]
        for name, v in self.variants.items():
            for s in v["seeds"]:
                members = "  ".join(
                    f"T{m['template_id']}={m['accuracy']:.4f}" if m["status"] == "ok" else f"T{m['template_id']}=FAILED"
                    for m in s["members"]
                )
                ens = s["ensemble_accuracy"]
                ens_s = "n/a" if ens is None else f"{ens:.4f}"
                lines.append(f"  {name} seed={s['seed']}: {members}  ensemble={ens_s}")
            lines.append(f"  {name}: {100 * v['mean']:.2f} ± {100 * v['std']:.2f}")
        return "\n".join(lines)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_data(cfg: ExperimentConfig):
    if cfg.dataset == "toy":
        from verbkit.toy import toy_dataset

        return toy_dataset(50, seed=1000), toy_dataset(25, seed=2000)
    train = load_dataset(cfg.train_path, cfg.data_format, cfg.dataset) if cfg.train_path else None
    if not cfg.test_path:
        raise ValueError("config needs a test_path")
    return train, load_dataset(cfg.test_path, cfg.data_format, cfg.dataset)


def _templates(cfg: ExperimentConfig) -> list:
    pool = load_templates(cfg.templates_path) if cfg.templates_path else builtin_templates(
        "ag" if cfg.dataset == "toy" else cfg.dataset
    )
    by_id = {t.id: t for t in pool}
    missing = [i for i in cfg.template_ids if i not in by_id]
    if missing:
        raise ValueError(f"unknown template ids {missing}")
    return [by_id[i] for i in cfg.template_ids]


def _manual(cfg: ExperimentConfig) -> Verbalizer:
    table = cfg.verbalizer_table or ("ag" if cfg.dataset == "toy" else cfg.dataset)
    if Path(table).suffix == ".json" and Path(table).exists():
        return load_verbalizer(table)
    return build_manual(table)


def sample_test_subset(test: Dataset, limit: Optional[int], seed: int) -> list:
    """Fixed random subset of the test set (all of it when ``limit`` is None)."""
    if limit is None or limit >= len(test):
        return list(test.examples)
    idx = np.sort(np.random.default_rng(seed).choice(len(test), size=limit, replace=False))
    return [test.examples[i] for i in idx]


def run_benchmark(
    cfg: ExperimentConfig,
    lm: Optional[MaskedLM] = None,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    save: bool = True,
) -> RunReport:
    """Run every (seed, template, variant) member and ensemble per seed.

    Failed members are recorded with their error and left out of the
    ensemble; the report is produced regardless.
    """
    started = _now()
    if test is None:
        train, test = _load_data(cfg)
    if lm is None:
        lm = load_backend(cfg.checkpoint, cfg.device)
    if cfg.n > 0 and train is None:
        raise ValueError("few-shot runs need a training pool (train_path)")
    templates = _templates(cfg)
    examples = sample_test_subset(test, cfg.test_limit, cfg.test_seed)
    gold = np.asarray([x.label for x in examples], dtype=np.int64)
    manual = _manual(cfg)
    if len(manual) != len(test.label_names):
        raise ValueError("verbalizer and dataset disagree on the number of labels")

    store = None
    needs_store = cfg.verbalizer in ("maven", "soft", "auto-maven")
    if needs_store:
        if cfg.embeddings == "lm":
            store = lm.embedding_matrix()
        else:
            store = load_external(cfg.embeddings, cfg.embeddings_format, cfg.embeddings_limit)
    initial = lm.snapshot() if cfg.n > 0 else None
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None

    variants = {name: {"seeds": []} for name in cfg.variants()}
    cache = {}
    for seed in cfg.seeds:
        split = sample_fewshot(train, cfg.n, seed, cfg.stratified) if cfg.n > 0 else FewShotSplit([], [], seed, 0)
        member_logits = {name: [] for name in variants}
        members = {name: [] for name in variants}
        for t in templates:
            built = {}
            try:
                if cfg.verbalizer in ("auto", "auto-maven"):
                    if not split.d_train:
                        raise ValueError("automatic verbalizers need labelled training examples")
                    if initial is not None:
                        lm.restore(initial)
                    petal = build_petal(split.d_train, t, lm, cfg.k_auto, test.label_names)
                    built["auto"] = petal
                    if cfg.verbalizer == "auto-maven":
                        built["auto+maven"] = enrich_maven(petal, store, cfg.k)
                elif cfg.verbalizer == "manual":
                    built["manual"] = manual
                elif cfg.verbalizer == "maven":
                    built["maven"] = enrich_maven(manual, store, cfg.k)
                else:
                    built["soft"] = init_soft(manual, store)
            except Exception as e:  # recorded, not raised: the report must still be produced
                logger.exception("building verbalizer for template %d failed", t.id)
                for name in variants:
                    members[name].append({"template_id": t.id, "status": "failed", "accuracy": None,
                                          "error": f"{type(e).__name__}: {e}"})
                continue

            for name, vb in built.items():
                key = (name, t.id)
                record = {"template_id": t.id}
                try:
                    if cfg.n == 0 and key in cache:
                        logits, record = cache[key]
                    else:
                        if initial is not None:
                            lm.restore(initial)
                        result = fine_tune(lm, t, vb, split, cfg.training, seed=seed * 1000 + t.id)
                        logits = evaluate(lm, t, result.head, examples, cfg.training.eval_batch_size).logits
                        record.update(best_epoch=result.best_epoch, valid_accuracy=result.valid_accuracy)
                        if cfg.n == 0:
                            cache[key] = (logits, dict(record))
                        if cfg.export_logits and out_dir is not None:
                            (out_dir / "logits").mkdir(parents=True, exist_ok=True)
                            write_logits(out_dir / "logits" / f"{name.replace('+', '_')}-seed{seed}-T{t.id}.jsonl",
                                         [x.id for x in examples], gold, logits, t.id)
                    record = dict(record, status="ok", accuracy=_accuracy(logits, gold))
                    member_logits[name].append(logits)
                except Exception as e:  # diverged or broken member: flag it and carry on
                    logger.exception("member %s T%d seed %d failed", name, t.id, seed)
                    record.update(status="failed", accuracy=None, error=f"{type(e).__name__}: {e}")
                members[name].append(record)

        for name in variants:
            ens = None
            if member_logits[name]:
                preds = ensemble_predictions(np.stack(member_logits[name]), cfg.ensemble)
                ens = float(np.mean(preds == gold))
            variants[name]["seeds"].append({
                "seed": seed,
                "split": {"n": split.n, "train": len(split.d_train), "valid": len(split.d_valid),
                          "class_counts": list(split.class_counts), "stratified": split.stratified},
                "members": members[name],
                "ensemble_accuracy": ens,
            })

    if initial is not None:
        lm.restore(initial)
    for name, v in variants.items():
        v["mean"], v["std"] = mean_std([s["ensemble_accuracy"] for s in v["seeds"]])
        per_t = {}
        for s in v["seeds"]:
            for m in s["members"]:
                per_t.setdefault(str(m["template_id"]), []).append(m["accuracy"])
        v["templates"] = {tid: dict(zip(("mean", "std"), mean_std(a))) for tid, a in per_t.items()}

    report = RunReport(cfg.to_dict(), cfg.hash(), variants, started, _now(), cfg.stratified)
    if save and out_dir is not None:
        report.save(out_dir / f"report-{cfg.hash()}.json")
    return report
