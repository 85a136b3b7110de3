"""Clinical concept extraction with contextual embeddings from a character-aware biLM."""
from .errors import DimensionError, IntegrityError, NumericError, TagParseError, ValidationError

__version__ = "0.1.0"

__all__ = ["DimensionError", "IntegrityError", "NumericError", "TagParseError", "ValidationError"]
