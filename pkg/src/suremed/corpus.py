"""JSONL corpus: one study per line. Field names are documented in docs/corpus_format.md."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable

from .core import EmbeddingRef, ImageRecord, Report, Study, ViewTag, parse_label_vector
from .errors import CorpusRejected, ParseError, SureError

log = logging.getLogger(__name__)

REJECT_FRACTION = 0.10


def _ref_from(d: dict | None) -> EmbeddingRef | None:
    if d is None:
        return None
    return EmbeddingRef(str(d["file"]), int(d["start"]), int(d["end"]))


def _ref_to(ref: EmbeddingRef | None) -> dict | None:
    if ref is None:
        return None
    return {"file": ref.file, "start": ref.start, "end": ref.end}


def report_from_dict(d: dict | None) -> Report | None:
    if d is None:
        return None
    labels = d.get("labels")
    return Report(
        findings_text=str(d.get("findings_text", "")),
        sentences=tuple(d.get("sentences") or ()),
        label_vectors=None if labels is None else tuple(parse_label_vector(row) for row in labels),
        embedding_ref=_ref_from(d.get("embedding")),
    )


def report_to_dict(r: Report | None) -> dict | None:
    if r is None:
        return None
    out: dict = {"findings_text": r.findings_text, "sentences": list(r.sentences)}
    if r.label_vectors is not None:
        out["labels"] = [lv.codes() for lv in r.label_vectors]
    if r.embedding_ref is not None:
        out["embedding"] = _ref_to(r.embedding_ref)
    return out


def study_from_dict(d: dict) -> Study:
    images = []
    for im in d["images"]:
        probs = im.get("view_probs")
        images.append(
            ImageRecord(
                image_id=str(im["image_id"]),
                view_tag=ViewTag.parse(str(im.get("view_tag", "UNK"))),
                embedding_ref=_ref_from(im["embedding"]),
                view_probs=None if probs is None else tuple(probs),
                clip_ref=_ref_from(im.get("clip_embedding")),
            )
        )
    return Study(
        study_id=str(d["study_id"]),
        images=tuple(images),
        report=report_from_dict(d["report"]),
        prior1=report_from_dict(d.get("prior1")),
        prior2=report_from_dict(d.get("prior2")),
    )


def study_to_dict(s: Study) -> dict:
    images = []
    for im in s.images:
        rec = {
            "image_id": im.image_id,
            "view_tag": str(im.view_tag),
            "view_probs": None if im.view_probs is None else list(im.view_probs),
            "embedding": _ref_to(im.embedding_ref),
        }
        if im.clip_ref is not None:
            rec["clip_embedding"] = _ref_to(im.clip_ref)
        images.append(rec)
    return {
        "study_id": s.study_id,
        "images": images,
        "report": report_to_dict(s.report),
        "prior1": report_to_dict(s.prior1),
        "prior2": report_to_dict(s.prior2),
    }


def dumps_study(s: Study) -> str:
    return json.dumps(study_to_dict(s), sort_keys=True, separators=(",", ":"))


@dataclass
class LoadResult:
    studies: list[Study]
    errors: list[ParseError] = field(default_factory=list)

    def __iter__(self):
        # allows ``studies, errors = load_corpus(path)``
        return iter((self.studies, self.errors))


def parse_lines(lines: Iterable[str], reject_fraction: float = REJECT_FRACTION) -> LoadResult:
    studies: list[Study] = []
    errors: list[ParseError] = []
    total = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        total += 1
        try:
            studies.append(study_from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError, SureError) as exc:
            err = ParseError(line_no, f"{type(exc).__name__}: {exc}", exc)
            log.warning("%s", err)
            errors.append(err)
    if total and len(errors) > reject_fraction * total:
        raise CorpusRejected(len(errors), total, errors)
    return LoadResult(studies, errors)


def load_corpus(path: str | os.PathLike, reject_fraction: float = REJECT_FRACTION) -> LoadResult:
    """Parse a JSONL corpus, isolating bad lines.

    Returns the parsed studies plus one :class:`ParseError` per bad line.
    Raises :class:`CorpusRejected` when more than ``reject_fraction`` of the
    non-blank lines fail.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh, reject_fraction)


def write_corpus(path: str | os.PathLike, studies: Iterable[Study]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in studies:
            fh.write(dumps_study(s) + "\n")
