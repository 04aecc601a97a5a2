"""End-to-end orchestration: repair views, fuse features, filter priors, plan loss weights."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cef import DropReason, FilterConfig, FilterMode, FilterOutcome, filter_prior, pooled_image_embedding, prior_records
from .core import Study
from .corpus import load_corpus
from .emb import EmbeddingStore, read_header, write_embeddings
from .errors import ConfigError, MissingFrontal, NoUsableViews, SureError
from .favr import FusedFeatures, InitScheme, ResamplerParams, favr_fuse, init_params
from .tsl import FreqTable, TierConfig, WeightPlan, build_weight_plan, label_frequencies
from .views import RepairedView, RepairPolicy, audit_record, split_views

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResamplerConfig:
    n_queries: int = 128
    dim: int | None = None  # None: taken from the embedding files
    out_dim: int = 64
    seed: int = 0
    scheme: str = InitScheme.SCALED_GAUSSIAN.value
    shared: bool = False
    params: str | None = None  # .npz written by ResamplerParams.to_npz_dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PipelineConfig:
    corpus: str
    emb_dir: str
    out_dir: str
    repair: RepairPolicy = RepairPolicy()
    filter: FilterConfig = FilterConfig()
    tsl: TierConfig = TierConfig()
    resampler: ResamplerConfig = ResamplerConfig()
    freq: str | None = None
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "emb_dir": self.emb_dir,
            "out_dir": self.out_dir,
            "repair": self.repair.to_dict(),
            "filter": self.filter.to_dict(),
            "tsl": self.tsl.to_dict(),
            "resampler": self.resampler.to_dict(),
            "freq": self.freq,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "PipelineConfig":
        base = Path(base_dir)

        def path(key, required=True):
            v = d.get(key)
            if v is None:
                if required:
                    raise ConfigError(f"config is missing {key!r}")
                return None
            return str(base / v)

        try:
            return cls(
                corpus=path("corpus"),
                emb_dir=path("emb_dir"),
                out_dir=path("out_dir"),
                repair=RepairPolicy.from_dict(d.get("repair", {})),
                filter=FilterConfig.from_dict(d.get("filter", {})),
                tsl=TierConfig.from_dict(d.get("tsl", {})),
                resampler=ResamplerConfig(**d.get("resampler", {})),
                freq=path("freq", required=False),
                workers=int(d.get("workers", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d, Path(path).parent)


@dataclass
class PromptBundle:
    study_id: str
    fused_features: FusedFeatures
    retained_prior_sentences: list[tuple[str, float | None]]
    weight_plan: WeightPlan | None
    repair_audit: list[RepairedView]
    filter_outcome: FilterOutcome


@dataclass
class StudyResult:
    study: Study
    bundle: PromptBundle | None = None
    error: str | None = None
    audit: list[RepairedView] = field(default_factory=list)


@dataclass
class PipelineResult:
    results: list[StudyResult]
    summary: dict
    config: PipelineConfig

    @property
    def bundles(self) -> list[PromptBundle]:
        return [r.bundle for r in self.results if r.bundle is not None]


def validate(cfg: PipelineConfig, studies: list[Study]) -> int:
    """Check that inputs exist and embedding widths agree; returns the token width."""
    if not Path(cfg.emb_dir).is_dir():
        raise ConfigError(f"embedding directory {cfg.emb_dir} does not exist")
    if cfg.freq is not None and not Path(cfg.freq).is_file():
        raise ConfigError(f"frequency table {cfg.freq} does not exist")
    if cfg.resampler.params is not None and not Path(cfg.resampler.params).is_file():
        raise ConfigError(f"resampler parameters {cfg.resampler.params} do not exist")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    dims = set()
    for f in sorted({im.embedding_ref.file for s in studies for im in s.images}):
        p = Path(cfg.emb_dir) / f
        if not p.is_file():
            raise ConfigError(f"embedding file {p} does not exist")
        dims.add(read_header(p)[1])
    if len(dims) > 1:
        raise ConfigError(f"image embedding files disagree on width: {sorted(dims)}")
    dim = dims.pop() if dims else (cfg.resampler.dim or 1)
    if cfg.resampler.dim is not None and cfg.resampler.dim != dim:
        raise ConfigError(f"resampler dim {cfg.resampler.dim} does not match embedding width {dim}")
    return dim


def make_resampler(cfg: ResamplerConfig, dim: int) -> ResamplerParams:
    if cfg.params is not None:
        with np.load(cfg.params) as d:
            params = ResamplerParams.from_npz_dict(d)
        if params.dim != dim:
            raise ConfigError(f"resampler parameters expect width {params.dim}, embeddings have {dim}")
        return params
    return init_params(cfg.seed, cfg.n_queries, dim, cfg.out_dim, InitScheme(cfg.scheme), cfg.shared)


def process_study(
    study: Study,
    store: EmbeddingStore,
    params: ResamplerParams,
    cfg: PipelineConfig,
    freq: FreqTable | None,
) -> StudyResult:
    result = StudyResult(study)
    try:
        frontal, lateral, audit = split_views(study, cfg.repair)
        result.audit = audit
        if not frontal:
            raise MissingFrontal(f"study {study.study_id} has no frontal view after repair")
        hf = np.vstack([store.rows(im.embedding_ref) for im in frontal])
        hl = np.vstack([store.rows(im.embedding_ref) for im in lateral]) if lateral else None
        fused = favr_fuse(hf, hl, params)

        records = prior_records(study, store)
        v = pooled_image_embedding(study, store)
        if records and v is None and cfg.filter.mode is not FilterMode.NONE:
            raise ValueError(f"study {study.study_id} has no pooled image embedding")
        outcome = filter_prior(records, v, cfg.filter)

        plan = None
        if freq is not None and study.report.label_vectors is not None:
            plan = build_weight_plan(study.report, freq, cfg.tsl)
        result.bundle = PromptBundle(
            study.study_id,
            fused,
            [(r.text, r.similarity) for r in outcome.retained],
            plan,
            audit,
            outcome,
        )
    except NoUsableViews as exc:
        result.error = f"NoUsableViews: {exc}"
    except MissingFrontal as exc:
        result.error = f"MissingFrontal: {exc}"
    except (SureError, ValueError, OSError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    if result.error:
        log.warning("skipping %s", result.error)
    return result


def summarize(results: list[StudyResult], n_parse_errors: int) -> dict:
    skipped = Counter(r.error.split(":", 1)[0] for r in results if r.error)
    dropped = Counter()
    provenance = Counter()
    retained = 0
    unlabeled = 0
    for r in results:
        provenance.update(rv.provenance.value for rv in r.audit)
        if r.bundle is None:
            continue
        retained += len(r.bundle.filter_outcome.retained)
        dropped.update(reason.value for _, reason in r.bundle.filter_outcome.dropped)
        unlabeled += r.bundle.weight_plan is None
    return {
        "studies": len(results),
        "fused": sum(r.bundle is not None for r in results),
        "skipped": dict(sorted(skipped.items())),
        "parse_errors": n_parse_errors,
        "sentences_retained": retained,
        "sentences_dropped": {reason.value: dropped.get(reason.value, 0) for reason in DropReason},
        "repair_provenance": dict(sorted(provenance.items())),
        "without_weight_plan": unlabeled,
    }


def run_pipeline(cfg: PipelineConfig, studies: list[Study] | None = None, store: EmbeddingStore | None = None) -> PipelineResult:
    n_parse_errors = 0
    if studies is None:
        if not Path(cfg.corpus).is_file():
            raise ConfigError(f"corpus {cfg.corpus} does not exist")
        studies, errors = load_corpus(cfg.corpus)
        n_parse_errors = len(errors)
    dim = validate(cfg, studies)
    params = make_resampler(cfg.resampler, dim)
    store = store or EmbeddingStore(cfg.emb_dir)
    if cfg.freq is not None:
        with open(cfg.freq, encoding="utf-8") as fh:
            freq = FreqTable.from_dict(json.load(fh))
    else:
        labeled = [s for s in studies if s.report.label_vectors is not None]
        freq = label_frequencies(labeled) if labeled else None

    def work(study):
        return process_study(study, store, params, cfg, freq)

    if cfg.workers == 1:
        results = [work(s) for s in studies]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, studies))
    return PipelineResult(results, summarize(results, n_parse_errors), cfg)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_outputs(result: PipelineResult, out_dir: str | os.PathLike | None = None) -> Path:
    """Write bundles.jsonl, features.emb, audit.jsonl, summary.json and effective_config.json."""
    out = Path(out_dir or result.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features = []
    row = 0
    with open(out / "bundles.jsonl", "w", encoding="utf-8") as fb, open(out / "audit.jsonl", "w", encoding="utf-8") as fa:
        for r in result.results:
            for im, rv in zip(r.study.images, r.audit):
                fa.write(_dumps(audit_record(r.study.study_id, im, rv)) + "\n")
            if r.bundle is None:
                continue
            b = r.bundle
            z = b.fused_features.z
            features.append(z)
            oc = b.filter_outcome
            fb.write(
                _dumps(
                    {
                        "study_id": b.study_id,
                        "fused_features": {"file": "features.emb", "start": row, "end": row + z.shape[0]},
                        "retained_prior_sentences": [{"text": t, "similarity": s} for t, s in b.retained_prior_sentences],
                        "dropped_prior_sentences": [
                            {"source": rec.source.value, "index": rec.index, "text": rec.text,
                             "similarity": rec.similarity, "reason": reason.value}
                            for rec, reason in oc.dropped
                        ],
                        "weight_plan": None if b.weight_plan is None else b.weight_plan.to_dict(),
                        "repair_audit": [
                            {"resolved": rv.resolved.value, "provenance": rv.provenance.value, "confidence": rv.confidence}
                            for rv in b.repair_audit
                        ],
                    }
                )
                + "\n"
            )
            row += z.shape[0]
    if features:
        write_embeddings(out / "features.emb", np.vstack(features))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    (out / "effective_config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return out
