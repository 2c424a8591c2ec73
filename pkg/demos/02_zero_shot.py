"""Zero-shot classification: four templates, three verbalizers, three ensembles.

Nothing is trained. Each template turns a headline into a cloze sentence,
the verbalizer reads class scores off the MASK position, and the four
per-template predictions are combined.

    python3 demos/02_zero_shot.py                      # toy model and toy data
    python3 demos/02_zero_shot.py --checkpoint roberta-large --test ag/test.csv --limit 1000
"""

from __future__ import annotations

import argparse

import numpy as np

from verbkit.datasets import load_dataset
from verbkit.ensemble import STRATEGIES, ensemble_predictions
from verbkit.runner import evaluate, load_backend, sample_test_subset
from verbkit.templates import builtin_templates
from verbkit.toy import toy_dataset
from verbkit.verbalizers import build_manual, enrich_maven, init_soft

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default="toy")
parser.add_argument("--test", help="AG test.csv; the toy test set is used when omitted")
parser.add_argument("--limit", type=int, default=200)
args = parser.parse_args()

lm = load_backend(args.checkpoint)
test = load_dataset(args.test, "csv", "ag") if args.test else toy_dataset(50, seed=2000)
examples = sample_test_subset(test, args.limit, seed=0)
gold = np.array([x.label for x in examples])
print(f"{len(examples)} test examples, majority baseline {np.bincount(gold).max() / len(gold):.2f}\n")

manual = build_manual("ag")
store = lm.embedding_matrix()
verbalizers = {
    "manual": manual,
    "maven k=15": enrich_maven(manual, store, k=15),
    "soft (untrained)": init_soft(manual, store),
}

for name, vb in verbalizers.items():
    results = [evaluate(lm, t, vb, examples) for t in builtin_templates("ag")]
    per_template = "  ".join(f"T{t}={r.accuracy:.3f}" for t, r in enumerate(results))
    stacked = np.stack([r.logits for r in results])
    ensembles = "  ".join(f"{s}={np.mean(ensemble_predictions(stacked, s) == gold):.3f}" for s in STRATEGIES)
    print(f"{name:17} {per_template}\n{'':17} {ensembles}\n")
