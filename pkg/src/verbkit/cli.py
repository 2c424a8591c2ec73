"""``verbkit`` command line: run, zero-shot, neighbors, export-logits, ensemble."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from verbkit.ensemble import STRATEGIES


def _cmd_run(args):
    from verbkit.runner import ExperimentConfig, run_benchmark

    cfg = ExperimentConfig.from_file(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = run_benchmark(cfg)
    print(report.format())


def _cmd_zero_shot(args):
    from verbkit.runner import ExperimentConfig, run_benchmark

    cfg = ExperimentConfig(
        dataset=args.dataset, test_path=args.test_path, data_format=args.format,
        checkpoint=args.checkpoint, verbalizer=args.verbalizer, k=args.k,
        embeddings=args.embeddings, embeddings_format=args.embeddings_format,
        template_ids=args.templates, n=0, seeds=[0], ensemble=args.ensemble,
        test_limit=args.limit, output_dir=args.output_dir, device=args.device,
    )
    print(run_benchmark(cfg).format())


def _cmd_neighbors(args):
    from verbkit.embeddings import load_external
    from verbkit.runner import load_backend

    if args.embeddings == "lm":
        store = load_backend(args.checkpoint, args.device).embedding_matrix()
    else:
        store = load_external(args.embeddings, args.embeddings_format, args.limit)
    key = store.resolve(args.word)
    if key is None:
        sys.exit(f"{args.word!r} is not in the embedding store")
    for nb in store.top_k_neighbors(key, args.k):
        print(f"{nb.word!r}\t{nb.similarity:.4f}")


def _cmd_export(args):
    from verbkit.datasets import load_dataset
    from verbkit.runner import load_backend, export_logits, sample_test_subset
    from verbkit.templates import builtin_templates
    from verbkit.verbalizers import build_manual, enrich_maven, load_verbalizer

    lm = load_backend(args.checkpoint, args.device)
    if args.verbalizer_file:
        vb = load_verbalizer(args.verbalizer_file)
    else:
        vb = build_manual(args.dataset)
        if args.verbalizer == "maven":
            vb = enrich_maven(vb, lm.embedding_matrix(), args.k)
    test = load_dataset(args.test_path, args.format, args.dataset)
    template = {t.id: t for t in builtin_templates(args.dataset)}[args.template]
    export_logits(lm, template, vb, sample_test_subset(test, args.limit, 0), args.out)


def _cmd_ensemble(args):
    from verbkit.runner import ensemble_exports

    res = ensemble_exports(args.files, args.strategy)
    print(json.dumps({"n": len(res["ids"]), "accuracy": res["accuracy"]}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="verbkit", description="Prompt-based few-shot classification with verbalizers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a benchmark described by a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.set_defaults(func=_cmd_run)

    z = sub.add_parser("zero-shot", help="zero-shot evaluation with the built-in templates")
    z.add_argument("--dataset", default="ag")
    z.add_argument("--test-path")
    z.add_argument("--format", default="csv")
    z.add_argument("--checkpoint", default="roberta-large")
    z.add_argument("--verbalizer", default="manual", choices=["manual", "maven", "soft"])
    z.add_argument("--k", type=int, default=15)
    z.add_argument("--embeddings", default="lm")
    z.add_argument("--embeddings-format", default="glove_text")
    z.add_argument("--templates", type=int, nargs="+", default=[0, 1, 2, 3])
    z.add_argument("--ensemble", default="logit", choices=STRATEGIES)
    z.add_argument("--limit", type=int)
    z.add_argument("--output-dir")
    z.add_argument("--device")
    z.set_defaults(func=_cmd_zero_shot)

    n = sub.add_parser("neighbors", help="nearest neighbors of a word in an embedding space")
    n.add_argument("--word", required=True)
    n.add_argument("--k", type=int, default=15)
    n.add_argument("--embeddings", default="lm", help="'lm' or a word2vec/GloVe text file")
    n.add_argument("--embeddings-format", default="glove_text", choices=["glove_text", "word2vec_text"])
    n.add_argument("--limit", type=int)
    n.add_argument("--checkpoint", default="roberta-large")
    n.add_argument("--device")
    n.set_defaults(func=_cmd_neighbors)

    e = sub.add_parser("export-logits", help="write per-example class logits for one template")
    e.add_argument("--dataset", default="ag")
    e.add_argument("--test-path", required=True)
    e.add_argument("--format", default="csv")
    e.add_argument("--checkpoint", default="roberta-large")
    e.add_argument("--template", type=int, default=0)
    e.add_argument("--verbalizer", default="manual", choices=["manual", "maven"])
    e.add_argument("--verbalizer-file")
    e.add_argument("--k", type=int, default=15)
    e.add_argument("--limit", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--device")
    e.set_defaults(func=_cmd_export)

    s = sub.add_parser("ensemble", help="ensemble exported logit files offline")
    s.add_argument("files", nargs="+")
    s.add_argument("--strategy", default="logit", choices=STRATEGIES)
    s.set_defaults(func=_cmd_ensemble)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.func(args)


if __name__ == "__main__":
    main()
