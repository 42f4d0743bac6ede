"""corpusforge: stage-based curation, distillation, and mixture building
for reasoning corpora, with replayable model calls."""

from .client import ChatRequest, EmbedRequest, Endpoint, ModelClient, ReplayMiss
from .records import Record, StageManifest, normalize_text, read_records, write_records

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "EmbedRequest",
    "Endpoint",
    "ModelClient",
    "Record",
    "ReplayMiss",
    "StageManifest",
    "__version__",
    "normalize_text",
    "read_records",
    "write_records",
]
