"""verbkit: verbalizers for prompt-based few-shot text classification.

Templates turn an input into a cloze sentence with one MASK; a verbalizer
maps each label to words whose MASK-position logits score that label. The
package builds manual, soft, automatic (PETAL) and nearest-neighbor enriched
(MaVEN) verbalizers, scores and ensembles them, and runs the few-shot
fine-tuning benchmark end to end.
"""

from verbkit.embeddings import EmbeddingStore, Neighbor, load_external
from verbkit.ensemble import aggregate, aggregate_logit, aggregate_proba, aggregate_vote, MemberOutput
from verbkit.errors import NumericError, OOVError, ParseError, StructuralError, TrainingError, VerbkitError
from verbkit.scoring import (
    ClassScores,
    class_logits_mean,
    class_logits_soft,
    class_logits_weighted,
    cross_entropy,
    predict_proba,
)
from verbkit.templates import Example, MaskedSequence, Template, builtin_templates, render
from verbkit.verbalizers import (
    SoftVerbalizer,
    Verbalizer,
    WeightedVerbalizer,
    build_manual,
    build_petal,
    enrich_maven,
    init_soft,
    load_verbalizer,
    save_verbalizer,
)

__version__ = "0.1.0"
