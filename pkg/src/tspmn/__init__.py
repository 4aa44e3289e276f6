"""Term/query matching toolkit.

A dictionary of formal terms, fast multi-pattern retrieval over dialogue
corpora, a compact trainable matching encoder with self-supervised
pretraining objectives, fine-tuning and few-shot tooling, multi-label
evaluation, and a CLI that wires it all together.
"""

from .corpus import (
    Dialogue,
    LabeledQuery,
    SynthSpec,
    SyntheticWorld,
    Turn,
    generate_synthetic_world,
    sample_few_shot,
)
from .encoder import EncodedStates, ModelConfig, encode, grad_check, init_params
from .estimator import TermMatcher
from .evalkit import Metrics, aggregate_predictions, compute_metrics
from .heads import decide, match_probabilities, msf_loss, pretrain_loss
from .packing import (
    PackedExample,
    TermSequence,
    assemble_msf_example,
    assemble_pretrain_example,
    pack_term_sequences,
)
from .terminology import (
    DialogueTermsPair,
    TermDictionary,
    TermMatch,
    build_dictionary,
    make_dialogue_terms_pairs,
    normalize_text,
    retrieve_terms,
)
from .textcodec import Vocab, build_vocab, encode_text
from .training import (
    Checkpoint,
    TrainConfig,
    adamw_step,
    evaluate_queries,
    load_checkpoint,
    predict_term_sets,
    run_finetuning,
    run_pretraining,
    save_checkpoint,
)
from .util import DataError, NumericalError, TspmnError

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DataError",
    "Dialogue",
    "DialogueTermsPair",
    "EncodedStates",
    "LabeledQuery",
    "Metrics",
    "ModelConfig",
    "NumericalError",
    "PackedExample",
    "SynthSpec",
    "SyntheticWorld",
    "TermDictionary",
    "TermMatch",
    "TermMatcher",
    "TermSequence",
    "TrainConfig",
    "TspmnError",
    "Turn",
    "Vocab",
    "adamw_step",
    "aggregate_predictions",
    "assemble_msf_example",
    "assemble_pretrain_example",
    "build_dictionary",
    "build_vocab",
    "compute_metrics",
    "decide",
    "encode",
    "encode_text",
    "evaluate_queries",
    "generate_synthetic_world",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "make_dialogue_terms_pairs",
    "match_probabilities",
    "msf_loss",
    "normalize_text",
    "pack_term_sequences",
    "predict_term_sets",
    "pretrain_loss",
    "retrieve_terms",
    "run_finetuning",
    "run_pretraining",
    "sample_few_shot",
    "save_checkpoint",
]
