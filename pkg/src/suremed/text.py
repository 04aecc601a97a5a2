"""Sentence splitting and word tokenization for report text."""

from __future__ import annotations

import re

# Tokens that end in a period but never end a sentence. Matched case-insensitively
# against the whitespace-delimited word that carries the period.
ABBREVIATIONS: frozenset[str] = frozenset(
    {
        "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "vs.", "etc.", "e.g.", "i.e.",
        "a.m.", "p.m.", "approx.", "fig.", "cf.", "resp.",
    }
)

_BOUNDARY = re.compile(r"[.!?]+(?=\s|$)")
_WORD = re.compile(r"[A-Za-z0-9_\-']+(?:\.[0-9]+)*|[^\sA-Za-z0-9_\-']")


def _word_before(text: str, end: int) -> str:
    start = end
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    return text[start:end]


def split_sentences(text: str) -> list[str]:
    """Split findings text into sentences.

    A sentence ends at ``.``, ``!`` or ``?`` followed by whitespace or end of
    text. Periods belonging to a word in :data:`ABBREVIATIONS` do not split.
    Decimals such as ``1.5`` never split because the period is followed by a
    digit, not whitespace.
    """
    out: list[str] = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        word = _word_before(text, m.end())
        if m.group() == "." and word.lower() in ABBREVIATIONS and m.end() < len(text):
            continue
        piece = text[start:m.end()].strip()
        if piece:
            out.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def tokenize(sentence: str) -> list[str]:
    """Lower-cased word tokens; punctuation marks become their own tokens."""
    return [t.lower() for t in _WORD.findall(sentence)]


def sentence_spans(sentences: list[str]) -> tuple[list[str], list[tuple[int, int]]]:
    """Tokenize each sentence and return the flat token stream with per-sentence spans."""
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for s in sentences:
        toks = tokenize(s)
        spans.append((len(tokens), len(tokens) + len(toks)))
        tokens.extend(toks)
    return tokens, spans
