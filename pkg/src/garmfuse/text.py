"""Closed caption vocabulary and the learned token embedding table.

Captions in this project are templated over garment categories, pattern
names, and a small color palette, so a lookup table over a closed word
list replaces a general text encoder. Row 0 is the NULL token used for
the dropped-text branch of classifier-free guidance; row 1 absorbs
out-of-vocabulary words.
"""

import numpy as np

from .module import Module, param
from .tensor import gather_rows

NULL_TOKEN = "<null>"
OOV_TOKEN = "<oov>"

CATEGORIES = ("upper", "lower", "dress", "outer")
PATTERNS = ("solid", "stripes", "checks", "dots")
COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "black")
TEMPLATE_WORDS = ("model", "wearing", "and")

VOCAB = (NULL_TOKEN, OOV_TOKEN) + CATEGORIES + PATTERNS + COLOR_NAMES + TEMPLATE_WORDS
_INDEX = {w: i for i, w in enumerate(VOCAB)}

NULL_ID = _INDEX[NULL_TOKEN]
OOV_ID = _INDEX[OOV_TOKEN]


def token_ids(tokens):
    """Map words to table rows; unknown words land on the OOV row."""
    return [_INDEX.get(t, OOV_ID) for t in tokens]


class TextEmbedding(Module):
    """Lookup table over the closed vocabulary."""

    def __init__(self, dim, rng):
        super().__init__()
        self.dim = dim
        self.table = param((len(VOCAB), dim), rng, std=0.05)

    def embed_caption(self, tokens):
        """Deterministic row lookup; an empty caption becomes [NULL row]."""
        ids = token_ids(tokens) if tokens else [NULL_ID]
        return gather_rows(self.table, np.asarray(ids, dtype=np.int64))

    def embed_null(self):
        return self.embed_caption([])
