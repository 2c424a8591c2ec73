"""Nearest neighbors in an embedding space, and a verbalizer enriched with them.

Run with the offline toy model (default) or any Hugging Face masked LM:

    python3 demos/01_neighbors.py
    python3 demos/01_neighbors.py --checkpoint roberta-large

With roberta-large the neighbors of " sports" start with " Sports" and
" sport"; the toy model only knows a few hundred words, so its lists are
short on meaning but show the mechanics.
"""

from __future__ import annotations

import argparse

from verbkit.runner import load_backend
from verbkit.verbalizers import build_manual, enrich_maven

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default="toy")
parser.add_argument("--k", type=int, default=8)
args = parser.parse_args()

lm = load_backend(args.checkpoint)
store = lm.embedding_matrix()
print(f"embedding store: {len(store)} tokens, dimension {store.dim}\n")

for word in ("sports", "science"):
    key = store.resolve(word)
    print(f"neighbors of {key!r}:")
    for nb in store.top_k_neighbors(key, args.k):
        print(f"    {nb.word!r:20} {nb.similarity:.4f}")
    print()

# Each core word keeps weight 1; every neighbor starts at its cosine similarity.
enriched = enrich_maven(build_manual("ag"), store, k=args.k)
for label, words, weights in zip(enriched.labels, enriched.words, enriched.weights):
    shown = ", ".join(f"{w.strip()}:{q:.2f}" for w, q in list(zip(words, weights))[:6])
    print(f"{label:9} {len(words):3d} words  {shown} ...")
