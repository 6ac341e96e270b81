"""Exception hierarchy. DataError subclasses map to CLI exit code 2."""


class DocspotError(Exception):
    """Base class for all engine errors."""


class DataError(DocspotError):
    """Invalid input data: bad files, schema violations, dangling references."""


class CorpusError(DataError):
    """Corpus or ground-truth file violates its schema or invariants."""


class DetectionFileError(DataError):
    """Detections JSONL is malformed or references unknown pages."""


class EmbeddingFileError(DataError):
    """Binary embedding file is malformed, truncated, or inconsistent."""


class IndexFormatError(DataError):
    """Persisted index is corrupt or inconsistent with its manifest."""


class EncoderMismatchError(DataError):
    """Query and index embeddings come from different encoders or dims."""
