"""Deterministic keyword labeler standing in for a neural report labeler on synthetic text."""

from __future__ import annotations

from typing import Sequence

from ..codebook import N_LABELS
from ..core import FindingLabel, LabelVector
from ..text import split_sentences, tokenize

# one keyword (or phrase) per codebook slot
KEYWORDS: tuple[str, ...] = (
    "cardiomediastinum",
    "cardiomegaly",
    "opacity",
    "lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "thickening",
    "fracture",
    "device",
    "unremarkable",
)

NEGATORS = frozenset({"no"})


def keyword_label(sentence: str, vocab: Sequence[str] = KEYWORDS) -> LabelVector:
    """Positive where a keyword occurs, Negative where it only occurs as ``no <keyword>``."""
    if len(vocab) != N_LABELS:
        raise ValueError(f"vocabulary needs {N_LABELS} entries")
    toks = tokenize(sentence)
    labels = [FindingLabel.ABSENT] * N_LABELS
    for j, phrase in enumerate(vocab):
        pt = tokenize(phrase)
        n = len(pt)
        for i in range(len(toks) - n + 1):
            if toks[i:i + n] != pt:
                continue
            if i > 0 and toks[i - 1] in NEGATORS:
                if labels[j] is FindingLabel.ABSENT:
                    labels[j] = FindingLabel.NEGATIVE
            else:
                labels[j] = FindingLabel.POSITIVE
    return LabelVector(tuple(labels))


def label_text(text: str, vocab: Sequence[str] = KEYWORDS) -> set[int]:
    """Pathology indices labelled Positive in any sentence of ``text``."""
    found: set[int] = set()
    for s in split_sentences(text):
        lv = keyword_label(s, vocab)
        found.update(j for j in range(N_LABELS - 1) if lv[j] is FindingLabel.POSITIVE)
    return found
