"""The few-shot protocol end to end on the toy task.

For each of three seeds, N labelled examples are drawn (stratified), split
into halves, one model per template is fine-tuned on the first half with
the best epoch picked on the second, and the template models are ensembled.
The same code runs the real benchmark from a YAML config:

    verbkit run --config demos/configs/ag_n32_maven.yaml
"""

from __future__ import annotations

import logging

from verbkit.runner import ExperimentConfig, TrainingConfig, run_benchmark

logging.basicConfig(level=logging.WARNING)

# The toy model needs a larger learning rate than the 1e-5 default for a
# visible change within a few epochs.
for kind in ("manual", "maven", "auto-maven"):
    cfg = ExperimentConfig(
        dataset="toy", checkpoint="toy", verbalizer=kind, k=5, k_auto=5, n=32, seeds=[0, 1, 2],
        template_ids=[0, 1], test_limit=60, training=TrainingConfig(lr=1e-4, epochs=3),
    )
    report = run_benchmark(cfg, save=False)
    print(report.format())
    print()
