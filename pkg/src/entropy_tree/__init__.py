"""Entropy-gated tree decoding with baseline decoders and evaluation metrics."""

from .errors import (
    CalibrationError,
    ConfigError,
    DecodeError,
    EntropyTreeError,
    InputError,
    ParseError,
    UndefinedAUROCError,
    UndefinedImportanceError,
    ValidationError,
)
from .eval import (
    EvalReport,
    ProblemRecord,
    SampleRecord,
    auroc,
    calibrate_thresholds,
    pass_at_k,
    percentile,
    run_ablation,
    run_entropy_tree,
    run_multi_chain,
)
from .model import (
    AttentionImportanceModel,
    NGramModel,
    ScriptedModel,
    StepOutput,
    TokenDistribution,
    ToyAttentionLayer,
    Vocabulary,
    attention_matrix,
    importance_score,
    load_scripted,
    score_next,
    train_ngram,
)
from .sampling import SamplerConfig, token_entropy
from .tree import BranchConfig, DecodingTree, LeafSequence, collect_leaves, decode_chain, decode_tree
from .uncertainty import NO_ANSWER, ExtractionRule, majority_vote, predictive_entropy

__version__ = "0.1.0"

__all__ = [
    "AttentionImportanceModel",
    "BranchConfig",
    "CalibrationError",
    "ConfigError",
    "DecodeError",
    "DecodingTree",
    "EntropyTreeError",
    "EvalReport",
    "ExtractionRule",
    "InputError",
    "LeafSequence",
    "NGramModel",
    "NO_ANSWER",
    "ParseError",
    "ProblemRecord",
    "SampleRecord",
    "SamplerConfig",
    "ScriptedModel",
    "StepOutput",
    "TokenDistribution",
    "ToyAttentionLayer",
    "UndefinedAUROCError",
    "UndefinedImportanceError",
    "ValidationError",
    "Vocabulary",
    "attention_matrix",
    "auroc",
    "calibrate_thresholds",
    "collect_leaves",
    "decode_chain",
    "decode_tree",
    "importance_score",
    "load_scripted",
    "majority_vote",
    "pass_at_k",
    "percentile",
    "predictive_entropy",
    "run_ablation",
    "run_entropy_tree",
    "run_multi_chain",
    "score_next",
    "token_entropy",
    "train_ngram",
]
