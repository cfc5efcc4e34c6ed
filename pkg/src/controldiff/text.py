"""Closed-vocabulary tokenizer for templated scene captions.

Captions are built from a fixed template ("red circle left-of blue square
above green triangle"), so the whole language is 16 words.  Token ids are
embedded by a learned lookup table inside the backbone; PAD (id 0) fills
captions up to the fixed prompt length.
"""

from __future__ import annotations

from .errors import ContractViolation

PAD_WORD = "<pad>"

COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange",
               "purple")
KIND_WORDS = ("circle", "square", "triangle")
RELATION_WORDS = ("left-of", "right-of", "above", "below")

VOCAB = (PAD_WORD,) + COLOR_WORDS + KIND_WORDS + RELATION_WORDS
VOCAB_SIZE = len(VOCAB)
PAD_ID = 0

_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def encode(caption: str, length: int = 8) -> list[int]:
    """Tokenize a caption and pad with PAD_ID to `length`."""
    words = caption.split() if caption else []
    ids = []
    for w in words:
        if w not in _WORD_TO_ID:
            raise ContractViolation(f"word {w!r} not in the closed vocabulary")
        ids.append(_WORD_TO_ID[w])
    if len(ids) > length:
        raise ContractViolation(
            f"caption has {len(ids)} tokens, prompt length is {length}"
        )
    return ids + [PAD_ID] * (length - len(ids))


def decode(ids) -> str:
    """Inverse of encode; PAD tokens are dropped."""
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise ContractViolation(f"token id {i} outside vocabulary")
        if i != PAD_ID:
            words.append(VOCAB[i])
    return " ".join(words)
