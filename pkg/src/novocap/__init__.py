"""novocap: novel-object image captioning with online vocabulary expansion.

A trained caption model learns word embeddings for object categories from
their visual prototype features. New categories are added online from a
handful of feature samples, with no retraining and no change to any existing
embedding row, and tag-constrained captions are decoded with a finite-state
constrained beam search.
"""

__version__ = "0.1.0"

from .errors import DataError, NovocapError, NumericError, UsageError

__all__ = ["DataError", "NovocapError", "NumericError", "UsageError", "__version__"]
