"""coqharness: an LLM proof-synthesis harness for Coq.

Prompting pipelines (zero/few-shot, retrieval-augmented, lemma-augmented),
interactive agent loops with prover feedback and tool use, error-repair and
prompt-diversity ensembles, and machine-checked evaluation with failure
taxonomy reports.
"""

__version__ = "0.1.0"

from .corpus import Corpus, TheoremRecord, ingest_project, load_corpus, save_corpus, split_corpus
from .driver import ProofCheckResult, SessionConfig, StepResult, start_session
from .proofstate import ProofState, parse_proof_state, render_proof_state
from .sentences import Sentence, segment_sentences

__all__ = [
    "Corpus",
    "TheoremRecord",
    "ingest_project",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "ProofCheckResult",
    "SessionConfig",
    "StepResult",
    "start_session",
    "ProofState",
    "parse_proof_state",
    "render_proof_state",
    "Sentence",
    "segment_sentences",
]
