"""View-tag repair: reconcile DICOM-style view tags with view-classifier probabilities
and split a study's images into frontal and lateral sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .core import VIEW_CLASSES, ImageRecord, Study, ViewKind, ViewTag
from .errors import NoUsableViews


class Fallback(enum.Enum):
    EXCLUDE_IMAGE = "exclude"
    TREAT_AS_FRONTAL = "frontal"


class Resolved(enum.Enum):
    PA = "PA"
    AP = "AP"
    LATERAL = "LATERAL"
    EXCLUDED = "EXCLUDED"

    @property
    def is_frontal(self) -> bool:
        return self is Resolved.PA or self is Resolved.AP


class Provenance(enum.Enum):
    KEPT_ORIGINAL = "KeptOriginal"
    RESOLVED_UNKNOWN = "ResolvedUnknown"
    OVERRIDDEN = "Overridden"
    FELL_BACK = "FellBack"


@dataclass(frozen=True)
class RepairPolicy:
    theta_assign: float = 0.70
    theta_override: float = 0.90
    fallback: Fallback = Fallback.EXCLUDE_IMAGE

    def __post_init__(self):
        if not (0.0 < self.theta_assign <= self.theta_override <= 1.0):
            raise ValueError(
                f"need 0 < theta_assign <= theta_override <= 1, got "
                f"{self.theta_assign}, {self.theta_override}"
            )

    def to_dict(self) -> dict:
        return {
            "theta_assign": self.theta_assign,
            "theta_override": self.theta_override,
            "fallback": self.fallback.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepairPolicy":
        return cls(
            theta_assign=float(d.get("theta_assign", 0.70)),
            theta_override=float(d.get("theta_override", 0.90)),
            fallback=Fallback(d.get("fallback", Fallback.EXCLUDE_IMAGE.value)),
        )


@dataclass(frozen=True)
class RepairedView:
    resolved: Resolved
    provenance: Provenance
    confidence: float


# classifier class index -> resolved view
_CLASS_TO_RESOLVED = (Resolved.PA, Resolved.AP, Resolved.LATERAL, Resolved.EXCLUDED)
_TAG_TO_RESOLVED = {
    ViewKind.PA: Resolved.PA,
    ViewKind.AP: Resolved.AP,
    ViewKind.LATERAL: Resolved.LATERAL,
    ViewKind.LL: Resolved.LATERAL,
}


def _group(r: Resolved) -> str:
    if r.is_frontal:
        return "frontal"
    return "lateral" if r is Resolved.LATERAL else "other"


def _argmax(probs: Sequence[float]) -> tuple[int, float]:
    # ties go to the lowest class index
    best = max(range(len(probs)), key=lambda i: (probs[i], -i))
    return best, float(probs[best])


def _fallback(probs: Sequence[float] | None, policy: RepairPolicy) -> RepairedView:
    if policy.fallback is Fallback.EXCLUDE_IMAGE:
        conf = _argmax(probs)[1] if probs is not None else 0.0
        return RepairedView(Resolved.EXCLUDED, Provenance.FELL_BACK, conf)
    if probs is None:
        return RepairedView(Resolved.PA, Provenance.FELL_BACK, 0.0)
    if probs[1] > probs[0]:
        return RepairedView(Resolved.AP, Provenance.FELL_BACK, float(probs[1]))
    return RepairedView(Resolved.PA, Provenance.FELL_BACK, float(probs[0]))


def repair_view(tag: ViewTag, probs: Sequence[float] | None, policy: RepairPolicy = RepairPolicy()) -> RepairedView:
    """Decide the effective view of one image.

    Explicit tags survive unless the classifier puts at least
    ``theta_override`` on a class from a different group (frontal / lateral /
    other). Unknown and special tags take the classifier's argmax when it
    reaches ``theta_assign``; otherwise the policy fallback applies.
    """
    original = _TAG_TO_RESOLVED.get(tag.kind)
    if original is not None:
        if probs is None:
            return RepairedView(original, Provenance.KEPT_ORIGINAL, 1.0)
        cls, p = _argmax(probs)
        predicted = _CLASS_TO_RESOLVED[cls]
        if _group(predicted) != _group(original) and p >= policy.theta_override:
            return RepairedView(predicted, Provenance.OVERRIDDEN, p)
        own = VIEW_CLASSES.index("LATERAL" if original is Resolved.LATERAL else original.value)
        return RepairedView(original, Provenance.KEPT_ORIGINAL, float(probs[own]))

    if probs is None:
        return _fallback(None, policy)
    cls, p = _argmax(probs)
    if p >= policy.theta_assign:
        return RepairedView(_CLASS_TO_RESOLVED[cls], Provenance.RESOLVED_UNKNOWN, p)
    return _fallback(probs, policy)


def split_views(
    study: Study, policy: RepairPolicy = RepairPolicy()
) -> tuple[list[ImageRecord], list[ImageRecord], list[RepairedView]]:
    frontal: list[ImageRecord] = []
    lateral: list[ImageRecord] = []
    audit: list[RepairedView] = []
    for image in study.images:
        rv = repair_view(image.view_tag, image.view_probs, policy)
        audit.append(rv)
        if rv.resolved.is_frontal:
            frontal.append(image)
        elif rv.resolved is Resolved.LATERAL:
            lateral.append(image)
    if not frontal and not lateral:
        raise NoUsableViews(study.study_id)
    return frontal, lateral, audit


def audit_record(study_id: str, image: ImageRecord, rv: RepairedView) -> dict:
    return {
        "study_id": study_id,
        "image_id": image.image_id,
        "original_tag": str(image.view_tag),
        "view_probs": list(image.view_probs) if image.view_probs is not None else None,
        "resolved": rv.resolved.value,
        "provenance": rv.provenance.value,
        "confidence": rv.confidence,
    }
