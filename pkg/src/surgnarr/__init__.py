"""Curation, hierarchical annotation, interleaving and streaming evaluation
for narrated surgical video datasets."""

from .curation import SentenceClass, classify_sentences, correct_flagged, filter_actions
from .errors import (
    CausalityViolation,
    ClientTransportError,
    EmptyInputError,
    EmptySequenceError,
    HierarchyValidationError,
    ParseError,
    StreamRunError,
    SurgNarrError,
    ValidationError,
)
from .evaluation import (
    JudgeVerdict,
    NarrationArtifactDoc,
    WinRateReport,
    compute_win_rate,
    judge_pairwise,
    phase_correctness,
)
from .hierarchy import (
    HierarchicalRecord,
    PhaseAnnotation,
    StepAnnotation,
    assemble_record,
    detect_transitions,
    propose_steps,
    split_dataset,
    validate_record,
)
from .interleave import InterleavedSequence, build_sequence, build_sequence_v1, deserialize, serialize
from .stream import NgramNarrationModel, NullModel, ReplayModel, simulate
from .transcript import Sentence, TimedWord, Transcript, flag_low_confidence, load_asr, parse_asr

__version__ = "0.1.0"

__all__ = [
    "CausalityViolation", "ClientTransportError", "EmptyInputError", "EmptySequenceError",
    "HierarchicalRecord", "HierarchyValidationError", "InterleavedSequence", "JudgeVerdict",
    "NarrationArtifactDoc", "NgramNarrationModel", "NullModel", "ParseError", "PhaseAnnotation",
    "ReplayModel", "Sentence", "SentenceClass", "StepAnnotation", "StreamRunError", "SurgNarrError",
    "TimedWord", "Transcript", "ValidationError", "WinRateReport", "assemble_record",
    "build_sequence", "build_sequence_v1", "classify_sentences", "compute_win_rate",
    "correct_flagged", "deserialize", "detect_transitions", "filter_actions",
    "flag_low_confidence", "judge_pairwise", "load_asr", "parse_asr", "phase_correctness",
    "propose_steps", "serialize", "simulate", "split_dataset", "validate_record",
]
