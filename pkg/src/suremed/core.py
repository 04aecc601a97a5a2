"""Domain types shared by every stage: label vectors, view tags, images, reports, studies."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .codebook import N_LABELS, N_PATHOLOGIES
from .errors import InvalidLabelCode, ShapeMismatch
from .text import split_sentences


class FindingLabel(enum.IntEnum):
    NEGATIVE = -1
    ABSENT = 0
    POSITIVE = 1
    UNCERTAIN = 2


@dataclass(frozen=True)
class LabelVector:
    labels: tuple[FindingLabel, ...]

    def __post_init__(self):
        if len(self.labels) != N_LABELS:
            raise ShapeMismatch(f"label vector must have {N_LABELS} slots, got {len(self.labels)}")

    def __getitem__(self, j: int) -> FindingLabel:
        return self.labels[j]

    def __iter__(self):
        return iter(self.labels)

    def __repr__(self) -> str:
        return f"LabelVector({self.codes()})"

    def codes(self) -> list[int]:
        return [int(v) for v in self.labels]

    @classmethod
    def from_indices(
        cls,
        positive: Iterable[int] = (),
        uncertain: Iterable[int] = (),
        negative: Iterable[int] = (),
    ) -> "LabelVector":
        vals = [FindingLabel.ABSENT] * N_LABELS
        for j in negative:
            vals[j] = FindingLabel.NEGATIVE
        for j in uncertain:
            vals[j] = FindingLabel.UNCERTAIN
        for j in positive:
            vals[j] = FindingLabel.POSITIVE
        return cls(tuple(vals))

    @classmethod
    def empty(cls) -> "LabelVector":
        return _EMPTY


_EMPTY = LabelVector((FindingLabel.ABSENT,) * N_LABELS)
_VALID_CODES = {-1, 0, 1, 2}


def parse_label_vector(raw: Sequence[int]) -> LabelVector:
    """Map 14 integer codes onto :class:`FindingLabel` values."""
    if len(raw) != N_LABELS:
        raise ShapeMismatch(f"label vector must have {N_LABELS} entries, got {len(raw)}")
    out = []
    for i, v in enumerate(raw):
        # bool is an int subclass; reject it along with floats and strings
        if isinstance(v, bool) or not isinstance(v, int) or v not in _VALID_CODES:
            raise InvalidLabelCode(i, v)
        out.append(FindingLabel(v))
    return LabelVector(tuple(out))


def is_key_sentence(lv: LabelVector) -> bool:
    """Any pathology slot Positive or Uncertain ("No Finding" is ignored)."""
    return any(
        v is FindingLabel.POSITIVE or v is FindingLabel.UNCERTAIN
        for v in lv.labels[:N_PATHOLOGIES]
    )


def has_positive_finding(lv: LabelVector) -> bool:
    """Any pathology slot exactly Positive. Uncertain does not count."""
    return any(v is FindingLabel.POSITIVE for v in lv.labels[:N_PATHOLOGIES])


def key_findings(lv: LabelVector) -> list[int]:
    return [
        j
        for j in range(N_PATHOLOGIES)
        if lv.labels[j] is FindingLabel.POSITIVE or lv.labels[j] is FindingLabel.UNCERTAIN
    ]


def positive_findings(lv: LabelVector) -> list[int]:
    return [j for j in range(N_PATHOLOGIES) if lv.labels[j] is FindingLabel.POSITIVE]


class ViewKind(enum.Enum):
    PA = "PA"
    AP = "AP"
    LATERAL = "LATERAL"
    LL = "LL"
    UNK = "UNK"
    SPECIAL = "SPECIAL"


@dataclass(frozen=True)
class ViewTag:
    kind: ViewKind
    raw: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ViewTag":
        """Known tags map to their kind; any other string is kept verbatim as SPECIAL."""
        key = text.strip().upper()
        if key in ("PA", "AP", "LATERAL", "LL", "UNK"):
            return cls(ViewKind(key))
        if key == "":
            return cls(ViewKind.UNK)
        return cls(ViewKind.SPECIAL, text)

    def __str__(self) -> str:
        return self.raw if self.kind is ViewKind.SPECIAL else self.kind.value


# order of the classifier probability vector
VIEW_CLASSES: tuple[str, ...] = ("PA", "AP", "LATERAL", "OTHER")


@dataclass(frozen=True)
class EmbeddingRef:
    """Rows ``[start, end)`` of an EMB1 file, path relative to the embedding directory."""

    file: str
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"empty or negative row range [{self.start}, {self.end}) in {self.file}")

    @property
    def rows(self) -> int:
        return self.end - self.start


def check_view_probs(probs: Sequence[float]) -> tuple[float, ...]:
    if len(probs) != len(VIEW_CLASSES):
        raise ShapeMismatch(f"view_probs needs {len(VIEW_CLASSES)} entries, got {len(probs)}")
    out = tuple(float(p) for p in probs)
    if any(not (0.0 <= p <= 1.0) for p in out):
        raise ValueError(f"view_probs entries must lie in [0, 1]: {out}")
    if not math.isclose(sum(out), 1.0, rel_tol=0.0, abs_tol=1e-6):
        raise ValueError(f"view_probs must sum to 1 (got {sum(out)!r})")
    return out


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    view_tag: ViewTag
    embedding_ref: EmbeddingRef
    view_probs: tuple[float, ...] | None = None
    # pooled image-text embedding used by the prior filter
    clip_ref: EmbeddingRef | None = None

    def __post_init__(self):
        if self.view_probs is not None:
            object.__setattr__(self, "view_probs", check_view_probs(self.view_probs))


@dataclass(frozen=True)
class Report:
    findings_text: str
    sentences: tuple[str, ...] = ()
    label_vectors: tuple[LabelVector, ...] | None = None
    # one text-embedding row per sentence
    embedding_ref: EmbeddingRef | None = None

    def __post_init__(self):
        if not self.sentences and self.findings_text:
            object.__setattr__(self, "sentences", tuple(split_sentences(self.findings_text)))
        if self.label_vectors is not None:
            lvs = tuple(lv if isinstance(lv, LabelVector) else parse_label_vector(lv) for lv in self.label_vectors)
            object.__setattr__(self, "label_vectors", lvs)
        if self.label_vectors is not None and len(self.label_vectors) != len(self.sentences):
            raise ShapeMismatch(
                f"{len(self.label_vectors)} label vectors for {len(self.sentences)} sentences"
            )
        if self.embedding_ref is not None and self.embedding_ref.rows != len(self.sentences):
            raise ShapeMismatch(
                f"{self.embedding_ref.rows} embedding rows for {len(self.sentences)} sentences"
            )


@dataclass(frozen=True)
class Study:
    study_id: str
    images: tuple[ImageRecord, ...]
    report: Report
    prior1: Report | None = None
    prior2: Report | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"study {self.study_id} has no images")
        if self.prior2 is not None and self.prior1 is None:
            raise ValueError(f"study {self.study_id}: prior2 given without prior1")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError(f"study {self.study_id}: duplicate image ids")
