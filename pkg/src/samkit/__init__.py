"""Select domain experts, merge their parameter deltas, and score NER output."""

from .errors import (
    AlignmentError,
    ConfigError,
    EndpointUnavailable,
    FormatError,
    InvalidValue,
    RemoteError,
    SamError,
    ShapeMismatch,
    UnsupportedDtype,
)
from .merge import MergeRecipe, MergeReport, dare_preprocess, merge, merge_linear, merge_task_arithmetic, ties_merge
from .ner_eval import EntityMention, EvalReport, PredictionSet, micro_f1, parse_prediction
from .selection import ExpertRecord, SelectionConfig, SelectionResult, rank_by_domain_similarity, rank_by_sampling_eval
from .tensor_store import DeltaSet, TensorMap, apply_delta, compute_delta, load_tensor_archive, save_tensor_archive

__version__ = "0.1.0"
