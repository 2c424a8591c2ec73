"""Export per-template class logits, then ensemble them from the files alone.

Useful when the members were scored on different machines or by another
implementation: only the JSON-lines exports are needed to combine them.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from verbkit.ensemble import STRATEGIES, ensemble_predictions
from verbkit.runner import ensemble_exports, evaluate, export_logits, load_backend
from verbkit.templates import builtin_templates
from verbkit.toy import toy_dataset
from verbkit.verbalizers import build_manual

lm = load_backend("toy")
examples = toy_dataset(25, seed=2000).examples
verbalizer = build_manual("ag")

with tempfile.TemporaryDirectory() as tmp:
    paths, in_memory = [], []
    for t in builtin_templates("ag"):
        path = Path(tmp) / f"T{t.id}.jsonl"
        export_logits(lm, t, verbalizer, examples, path)
        paths.append(path)
        in_memory.append(evaluate(lm, t, verbalizer, examples).logits)
    print("first record:", paths[0].read_text().splitlines()[0][:100], "...")

    for strategy in STRATEGIES:
        offline = ensemble_exports(paths, strategy)
        same = np.array_equal(offline["predictions"], ensemble_predictions(np.stack(in_memory), strategy))
        print(f"{strategy:6} accuracy {offline['accuracy']:.3f}   identical to in-process: {same}")
