"""Contextual token discrimination for same-length correction of speech-query transcripts."""

__version__ = "0.1.0"
