"""Fine-tuning protocol, evaluation, reports and logit export."""

from __future__ import annotations

import numpy as np
import pytest

import verbkit.runner as runner
from verbkit.datasets import FewShotSplit
from verbkit.ensemble import ensemble_predictions
from verbkit.errors import TrainingError
from verbkit.runner import (
    ExperimentConfig,
    RunReport,
    TrainingConfig,
    accuracy,
    ensemble_exports,
    evaluate,
    export_logits,
    fine_tune,
    load_logits,
    mean_std,
    run_benchmark,
)
from verbkit.templates import builtin_templates
from verbkit.toy import toy_dataset
from verbkit.verbalizers import build_manual

AG = builtin_templates("ag")
FAST = {"lr": 3e-3, "epochs": 2}


@pytest.fixture(scope="module")
def data():
    return toy_dataset(10, seed=1000), toy_dataset(5, seed=2000)


def cfg(**kw):
    base = dict(dataset="toy", checkpoint="toy", seeds=[0], template_ids=[0])
    base.update(kw)
    return ExperimentConfig.from_dict(base)


class TestDefaults:
    def test_training_defaults(self):
        hp = TrainingConfig()
        assert (hp.lr, hp.epochs, hp.batch_size) == (1e-5, 10, 4)
        assert hp.weight_decay == 0.01 and hp.betas == (0.9, 0.999) and hp.warmup_ratio == 0.1

    def test_experiment_defaults(self):
        c = ExperimentConfig()
        assert c.seeds == [0, 1, 2] and c.k == 15 and c.ensemble == "logit"

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"datset": "ag"})

    def test_bad_values(self):
        with pytest.raises(ValueError):
            ExperimentConfig(verbalizer="fancy")
        with pytest.raises(ValueError):
            ExperimentConfig(ensemble="median")

    def test_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("dataset: toy\nn: 32\nverbalizer: maven\ntraining:\n  lr: 0.001\n  epochs: 3\n")
        c = ExperimentConfig.from_file(p)
        assert c.n == 32 and c.training.lr == 0.001 and c.training.epochs == 3
        assert c.hash() == ExperimentConfig.from_file(p).hash()
        assert c.hash() != cfg().hash()


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_majority_ag(self):
        gold = np.repeat(np.arange(4), 1900)  # balanced AG test set, 7600 examples
        assert accuracy(np.zeros_like(gold), gold) == pytest.approx(0.25)

    def test_majority_dbpedia(self):
        gold = np.repeat(np.arange(14), 5000)  # balanced, as the DBpedia test set
        assert round(accuracy(np.zeros_like(gold), gold), 4) == 0.0714

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([0], [0, 1])


class TestEvaluate:
    def test_zero_shot_toy(self, toy_lm, data):
        res = evaluate(toy_lm, AG[1], build_manual("ag"), data[1].examples)
        assert res.logits.shape == (20, 4)
        assert res.accuracy == accuracy(res.predictions, res.gold)
        assert res.accuracy > 0.9

    def test_empty(self, toy_lm):
        with pytest.raises(ValueError):
            evaluate(toy_lm, AG[0], build_manual("ag"), [])


class TestFineTune:
    def test_empty_split_untouched(self, fresh_lm):
        before = fresh_lm.snapshot()
        res = fine_tune(fresh_lm, AG[0], build_manual("ag"), FewShotSplit([], [], 0, 0))
        assert res.best_epoch is None and res.valid_accuracy == []
        after = fresh_lm.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_overfit_n8(self, raw_lm):
        state = raw_lm.snapshot()
        try:
            xs = toy_dataset(2, seed=5).examples
            split = FewShotSplit(xs, xs, 0, 16)
            res = fine_tune(raw_lm, AG[0], build_manual("ag"), split, TrainingConfig(lr=3e-3, epochs=20))
            assert res.valid_accuracy[res.best_epoch] == 1.0
            assert evaluate(raw_lm, AG[0], res.head, xs).accuracy == 1.0
        finally:
            raw_lm.restore(state)

    def test_best_epoch_earliest_tie(self, fresh_lm, data, monkeypatch):
        scores = iter([0.5, 0.75, 0.75, 0.25])

        class R:
            def __init__(self):
                self.accuracy = next(scores)

        monkeypatch.setattr(runner, "evaluate", lambda *a, **k: R())
        split = FewShotSplit(data[0].examples[:4], data[0].examples[4:8], 0, 8)
        res = fine_tune(fresh_lm, AG[0], build_manual("ag"), split, TrainingConfig(lr=1e-3, epochs=4))
        assert res.best_epoch == 1
        assert res.valid_accuracy == [0.5, 0.75, 0.75, 0.25]

    def test_weights_trained(self, fresh_lm, data):
        from verbkit.verbalizers import enrich_maven

        vb = enrich_maven(build_manual("ag"), fresh_lm.embedding_matrix(), k=3)
        split = FewShotSplit(data[0].examples[:8], data[0].examples[8:16], 0, 16)
        res = fine_tune(fresh_lm, AG[0], vb, split, TrainingConfig(lr=1e-2, epochs=2))
        out = res.verbalizer
        assert out.words == vb.words
        assert out.weights != vb.weights


class TestRunBenchmark:
    def test_zero_shot_single(self, toy_lm, data):
        rep = run_benchmark(cfg(), lm=toy_lm, train=data[0], test=data[1], save=False)
        assert len(rep.seed_accuracies()) == 1
        mean, std = rep.summary()
        assert std == 0.0 and mean == rep.seed_accuracies()[0]

    def test_three_seeds_recompute(self, fresh_lm, data, tmp_path):
        c = cfg(n=8, seeds=[0, 1, 2], template_ids=[0, 1], training=FAST, output_dir=str(tmp_path))
        rep = run_benchmark(c, lm=fresh_lm, train=data[0], test=data[1])
        accs = rep.seed_accuracies()
        assert len(accs) == 3
        mean, std = rep.summary()
        assert mean == pytest.approx(np.mean(accs), abs=1e-9)
        assert std == pytest.approx(np.std(accs), abs=1e-9)
        for s in rep.variants["manual"]["seeds"]:
            assert s["split"] == {"n": 8, "train": 4, "valid": 4, "class_counts": [2, 2, 2, 2], "stratified": True}
            assert [m["status"] for m in s["members"]] == ["ok", "ok"]
        back = RunReport.load(tmp_path / f"report-{c.hash()}.json")
        assert back.seed_accuracies() == accs

    def test_auto_maven_pairs(self, fresh_lm, data):
        c = cfg(n=8, seeds=[0, 1], template_ids=[0, 2], verbalizer="auto-maven", k=2, k_auto=3, training=FAST)
        rep = run_benchmark(c, lm=fresh_lm, train=data[0], test=data[1], save=False)
        assert list(rep.variants) == ["auto", "auto+maven"]
        for name in rep.variants:
            seeds = rep.variants[name]["seeds"]
            assert [s["seed"] for s in seeds] == [0, 1]
            assert all([m["template_id"] for m in s["members"]] == [0, 2] for s in seeds)

    @pytest.mark.parametrize("kind", ["maven", "soft"])
    def test_other_verbalizers_zero_shot(self, toy_lm, data, kind):
        rep = run_benchmark(cfg(verbalizer=kind, k=3), lm=toy_lm, train=data[0], test=data[1], save=False)
        assert rep.seed_accuracies()[0] is not None

    def test_failed_member_recorded(self, fresh_lm, data, monkeypatch):
        real = runner.fine_tune

        def flaky(lm, t, vb, split, hp=None, seed=0):
            if t.id == 1:
                raise TrainingError("non-finite loss nan")
            return real(lm, t, vb, split, hp, seed)

        monkeypatch.setattr(runner, "fine_tune", flaky)
        c = cfg(n=8, template_ids=[0, 1], training=FAST)
        rep = run_benchmark(c, lm=fresh_lm, train=data[0], test=data[1], save=False)
        members = rep.variants["manual"]["seeds"][0]["members"]
        assert members[0]["status"] == "ok"
        assert members[1]["status"] == "failed" and "TrainingError" in members[1]["error"]
        assert rep.seed_accuracies()[0] == members[0]["accuracy"]
        assert "FAILED" in rep.format()

    def test_mean_std(self):
        assert mean_std([0.5, 0.7, 0.9]) == pytest.approx((0.7, np.std([0.5, 0.7, 0.9])))
        assert np.isnan(mean_std([])[0])


class TestExport:
    def test_offline_equals_in_process(self, toy_lm, data, tmp_path):
        vb = build_manual("ag")
        xs = data[1].examples
        paths, stacked = [], []
        for t in AG:
            p = tmp_path / f"T{t.id}.jsonl"
            export_logits(toy_lm, t, vb, xs, p)
            paths.append(p)
            stacked.append(evaluate(toy_lm, t, vb, xs).logits)
        for s in ("vote", "proba", "logit"):
            off = ensemble_exports(paths, s)
            np.testing.assert_array_equal(off["predictions"], ensemble_predictions(np.stack(stacked), s))
        loaded = load_logits(paths[0])
        assert loaded["ids"] == [x.id for x in xs] and loaded["template_id"] == 0
        np.testing.assert_array_equal(loaded["logits"], stacked[0])

    def test_empty(self, toy_lm, tmp_path):
        p = tmp_path / "e.jsonl"
        export_logits(toy_lm, AG[0], build_manual("ag"), [], p)
        assert p.read_text() == ""
        assert load_logits(p)["logits"].shape == (0, 0)

    def test_reexport_deterministic(self, toy_lm, data, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (a, b):
            export_logits(toy_lm, AG[3], build_manual("ag"), data[1].examples, p)
        np.testing.assert_allclose(load_logits(a)["logits"], load_logits(b)["logits"], rtol=0, atol=1e-9)

    def test_mismatched_files(self, tmp_path):
        from verbkit.runner import write_logits

        write_logits(tmp_path / "a.jsonl", ["x", "y"], [0, 1], np.zeros((2, 2)))
        write_logits(tmp_path / "b.jsonl", ["x", "z"], [0, 1], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ensemble_exports([tmp_path / "a.jsonl", tmp_path / "b.jsonl"])
