"""Contextual evidence filter for prior-report sentences.

Prior sentences survive only if they carry a positive finding and, depending
on the mode, are similar enough to the current study's pooled image
embedding. In dynamic mode, sentences from the older prior that mention a
finding which has since disappeared from the most recent prior face a
stricter threshold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .codebook import N_PATHOLOGIES
from .core import FindingLabel, LabelVector, Report, Study, has_positive_finding
from .emb import EmbeddingStore
from .errors import ShapeMismatch, ZeroVector
from .text import split_sentences  # noqa: F401  (re-exported)


class Source(enum.Enum):
    PRIOR1 = "prior1"
    PRIOR2 = "prior2"


class FilterMode(enum.Enum):
    NONE = "none"
    FIXED = "fixed"
    DYNAMIC = "dynamic"


class DropReason(enum.Enum):
    NO_POSITIVE_FINDING = "NoPositiveFinding"
    BELOW_TAU = "BelowTau"
    BELOW_TAU_HIGH_PLUS = "BelowTauHighPlus"


@dataclass(frozen=True, eq=False)
class SentenceRecord:
    text: str
    source: Source
    labels: LabelVector
    embedding: np.ndarray | None
    index: int = 0  # position within its prior report
    similarity: float | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.source.value, self.index)


@dataclass(frozen=True)
class FilterConfig:
    mode: FilterMode = FilterMode.DYNAMIC
    tau: float = 0.22
    tau_high_plus: float = 0.30
    require_positive: bool = True
    # apply the strict threshold to every prior2 sentence, not only vanished findings
    strict_all_prior2: bool = False

    def __post_init__(self):
        if not self.tau_high_plus > self.tau:
            raise ValueError(f"tau_high_plus ({self.tau_high_plus}) must exceed tau ({self.tau})")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "tau": self.tau,
            "tau_high_plus": self.tau_high_plus,
            "require_positive": self.require_positive,
            "strict_all_prior2": self.strict_all_prior2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        base = cls()
        return cls(
            mode=FilterMode(d.get("mode", base.mode.value)),
            tau=float(d.get("tau", base.tau)),
            tau_high_plus=float(d.get("tau_high_plus", base.tau_high_plus)),
            require_positive=bool(d.get("require_positive", base.require_positive)),
            strict_all_prior2=bool(d.get("strict_all_prior2", base.strict_all_prior2)),
        )


@dataclass(frozen=True)
class FilterOutcome:
    retained: list[SentenceRecord]
    dropped: list[tuple[SentenceRecord, DropReason]]


def cosine_sim(v: Sequence[float], t: Sequence[float]) -> float:
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if v.shape != t.shape or v.ndim != 1:
        raise ShapeMismatch(f"cosine similarity of shapes {v.shape} and {t.shape}")
    nv = float(np.linalg.norm(v))
    nt = float(np.linalg.norm(t))
    if nv == 0.0 or nt == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.dot(v, t)) / (nv * nt)


def vanished_findings(prior1: Sequence[SentenceRecord], prior2: Sequence[SentenceRecord]) -> set[int]:
    """Pathologies Positive somewhere in the older prior but nowhere in the recent one."""
    def positives(recs):
        found = set()
        for r in recs:
            found.update(j for j in range(N_PATHOLOGIES) if r.labels[j] is FindingLabel.POSITIVE)
        return found

    return positives(prior2) - positives(prior1)


def _mentions(rec: SentenceRecord, findings: set[int]) -> bool:
    return any(rec.labels[j] is FindingLabel.POSITIVE for j in findings)


def filter_prior(
    sentences: Sequence[SentenceRecord],
    image_embedding: Sequence[float] | None,
    cfg: FilterConfig = FilterConfig(),
) -> FilterOutcome:
    """Split prior sentences into retained and dropped (with reasons).

    Every returned record carries its cosine similarity to
    ``image_embedding``. A similarity exactly at the threshold is retained.
    ``image_embedding`` may be None only in mode NONE.
    """
    ordered = sorted(sentences, key=lambda r: 0 if r.source is Source.PRIOR1 else 1)
    if image_embedding is None and cfg.mode is not FilterMode.NONE:
        raise ValueError(f"mode {cfg.mode.value} needs an image embedding")
    vanished = vanished_findings(
        [r for r in ordered if r.source is Source.PRIOR1],
        [r for r in ordered if r.source is Source.PRIOR2],
    )
    retained: list[SentenceRecord] = []
    dropped: list[tuple[SentenceRecord, DropReason]] = []
    for rec in ordered:
        sim = None
        if image_embedding is not None and rec.embedding is not None:
            sim = cosine_sim(image_embedding, rec.embedding)
        rec = replace(rec, similarity=sim)
        if cfg.require_positive and not has_positive_finding(rec.labels):
            dropped.append((rec, DropReason.NO_POSITIVE_FINDING))
            continue
        if cfg.mode is FilterMode.NONE:
            retained.append(rec)
            continue
        if sim is None:
            raise ValueError(f"sentence {rec.key} has no embedding")
        strict = cfg.mode is FilterMode.DYNAMIC and rec.source is Source.PRIOR2 and (
            cfg.strict_all_prior2 or _mentions(rec, vanished)
        )
        threshold = cfg.tau_high_plus if strict else cfg.tau
        if sim >= threshold:
            retained.append(rec)
        else:
            dropped.append((rec, DropReason.BELOW_TAU_HIGH_PLUS if strict else DropReason.BELOW_TAU))
    return FilterOutcome(retained, dropped)


def report_records(report: Report | None, source: Source, store: EmbeddingStore | None) -> list[SentenceRecord]:
    if report is None:
        return []
    if report.label_vectors is None:
        raise ValueError(f"{source.value} report has no per-sentence label vectors")
    embs = None
    if store is not None and report.embedding_ref is not None:
        embs = store.rows(report.embedding_ref)
    return [
        SentenceRecord(text, source, lv, None if embs is None else embs[i], i)
        for i, (text, lv) in enumerate(zip(report.sentences, report.label_vectors))
    ]


def prior_records(study: Study, store: EmbeddingStore | None) -> list[SentenceRecord]:
    return report_records(study.prior1, Source.PRIOR1, store) + report_records(study.prior2, Source.PRIOR2, store)


def pooled_image_embedding(study: Study, store: EmbeddingStore) -> np.ndarray | None:
    """Mean of the per-image pooled embeddings, or None if no image has one."""
    rows = [store.rows(im.clip_ref).mean(axis=0) for im in study.images if im.clip_ref is not None]
    if not rows:
        return None
    return np.mean(rows, axis=0)


def outcome_record(study_id: str, outcome: FilterOutcome, cfg: FilterConfig) -> dict:
    def rec(r: SentenceRecord) -> dict:
        return {"source": r.source.value, "index": r.index, "text": r.text, "similarity": r.similarity}

    return {
        "study_id": study_id,
        "mode": cfg.mode.value,
        "retained": [rec(r) for r in outcome.retained],
        "dropped": [dict(rec(r), reason=reason.value) for r, reason in outcome.dropped],
    }
