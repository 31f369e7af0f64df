"""Speaker profiling over multiparty dialogue corpora.

Three trainable stages — persona discovery, persona-type identification
with adaptive decision boundaries, and persona-value generation — plus a
corpus toolkit, metrics, and a standalone/pipeline evaluation harness.
"""

from .corpus import (
    Corpus,
    CorpusError,
    Dialogue,
    PersonaType,
    TypedInstance,
    Utterance,
    build_instances,
    corpus_stats,
    load_corpus,
    save_corpus,
    validate_annotations,
)
from .agreement import AnnotationSet, krippendorff_alpha

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "Corpus",
    "CorpusError",
    "Dialogue",
    "PersonaType",
    "TypedInstance",
    "Utterance",
    "build_instances",
    "corpus_stats",
    "krippendorff_alpha",
    "load_corpus",
    "save_corpus",
    "validate_annotations",
    "__version__",
]
