"""Synthetic long-tailed corpus with controllable ground truth.

Finding prevalence follows a Zipf law over a fixed rank order that mimics
chest X-ray datasets (devices and effusions common, pleural thickening rare).
Image tokens are noisy sums of orthonormal per-finding prototypes. Prior-report
sentence embeddings are built at a chosen cosine similarity to the study's
pooled image embedding: high for findings active in the current study, a weak
residual for stale findings, near zero for filler.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..codebook import N_PATHOLOGIES
from ..core import EmbeddingRef, ImageRecord, Report, Study, ViewTag
from ..emb import EmbeddingStore
from ..tsl import FreqTable
from .labeler import KEYWORDS, keyword_label

# pathology indices from most to least common
PREVALENCE_ORDER: tuple[int, ...] = (12, 9, 2, 7, 1, 4, 6, 5, 8, 0, 3, 11, 10)

FILLERS: tuple[str, ...] = (
    "the patient is comfortable.",
    "comparison is made to the prior exam.",
    "the osseous structures are intact.",
)
NORMAL_SENTENCE = "no acute abnormality."

IMAGE_FILE = "images.emb"
CLIP_FILE = "clip.emb"
TEXT_FILE = "text.emb"


@dataclass(frozen=True)
class SynthConfig:
    n_studies: int = 2000
    zipf_s: float = 1.3
    p_max: float = 0.6
    stale_rate: float = 0.3
    seed: int = 0
    dim: int = 16
    tokens_per_image: int = 6
    clip_dim: int = 32
    signal: float = 1.0
    noise: float = 0.6
    lateral_rate: float = 0.7
    prior1_rate: float = 0.8
    prior2_rate: float = 0.7
    keywords: tuple[str, ...] = KEYWORDS
    relevant_sim: tuple[float, float] = (0.5, 0.85)
    stale_sim: tuple[float, float] = (0.05, 0.35)
    filler_sim: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if self.dim < N_PATHOLOGIES:
            raise ValueError(f"dim must be >= {N_PATHOLOGIES} to hold orthonormal prototypes")
        if self.zipf_s <= 0 or not 0 < self.p_max <= 1:
            raise ValueError("zipf_s must be > 0 and p_max in (0, 1]")

    def marginals(self) -> np.ndarray:
        """Per-pathology prevalence, indexed by codebook position."""
        p = np.zeros(N_PATHOLOGIES)
        for rank, j in enumerate(PREVALENCE_ORDER):
            p[j] = self.p_max / (rank + 1) ** self.zipf_s
        return p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["keywords"] = list(self.keywords)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("keywords", "relevant_sim", "stale_sim", "filler_sim"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SynthCorpus:
    studies: list[Study]
    truth: list[frozenset[int]]
    freq: FreqTable
    store: EmbeddingStore
    # (study index, source, sentence index) -> "relevant" | "stale" | "other"
    sentence_truth: dict[tuple[int, str, int], str] = field(default_factory=dict)
    true_views: list[list[str]] = field(default_factory=list)
    config: SynthConfig | None = None


def _finding_sentence(j: int, kw: tuple[str, ...]) -> str:
    return f"{kw[j]} is present."


def _ordered(findings) -> list[int]:
    rank = {j: r for r, j in enumerate(PREVALENCE_ORDER)}
    return sorted(findings, key=rank.__getitem__)


def _view_probs(rng: np.random.Generator, true_cls: int) -> list[float]:
    p_true = rng.uniform(0.75, 0.99)
    rest = rng.dirichlet(np.ones(3)) * (1.0 - p_true)
    probs = np.insert(rest, true_cls, p_true)
    return [float(x) for x in probs / probs.sum()]


def _text_embedding(rng: np.random.Generator, v_hat: np.ndarray, cos: float) -> np.ndarray:
    u = rng.normal(size=v_hat.shape)
    u -= u.dot(v_hat) * v_hat
    u /= np.linalg.norm(u)
    return cos * v_hat + np.sqrt(1.0 - cos * cos) * u


def _f32(a: np.ndarray) -> np.ndarray:
    # in-memory values match what an EMB1 round trip returns
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_corpus(cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    """Build a deterministic synthetic corpus from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    kw = cfg.keywords
    marg = cfg.marginals()
    # orthonormal prototypes, one per pathology
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    protos = q.T[:N_PATHOLOGIES]
    zipf_w = marg / marg.sum()

    image_rows: list[np.ndarray] = []
    clip_rows: list[np.ndarray] = []
    text_rows: list[np.ndarray] = []
    studies: list[Study] = []
    truth: list[frozenset[int]] = []
    sentence_truth: dict[tuple[int, str, int], str] = {}
    true_views: list[list[str]] = []
    counts = [0] * N_PATHOLOGIES

    n_rows = {IMAGE_FILE: 0, CLIP_FILE: 0, TEXT_FILE: 0}

    def add_rows(bucket: list[np.ndarray], rows: np.ndarray, file: str) -> EmbeddingRef:
        start = n_rows[file]
        bucket.append(_f32(rows))
        n_rows[file] = start + len(rows)
        return EmbeddingRef(file, start, start + len(rows))

    for i in range(cfg.n_studies):
        sid = f"syn{i:05d}"
        active = frozenset(int(j) for j in np.flatnonzero(rng.random(N_PATHOLOGIES) < marg))
        for j in active:
            counts[j] += 1
        truth.append(active)

        # images: one frontal, optionally one lateral
        has_lat = rng.random() < cfg.lateral_rate
        views = [("AP" if rng.random() < 0.3 else "PA")] + (["LATERAL"] if has_lat else [])
        images = []
        for k, view in enumerate(views):
            amp = cfg.signal * (1.0 if view != "LATERAL" else 0.7)
            tokens = rng.normal(0.0, cfg.noise, size=(cfg.tokens_per_image, cfg.dim))
            for j in active:
                tokens += amp * rng.uniform(0.5, 1.5, size=(cfg.tokens_per_image, 1)) * protos[j]
            true_cls = ("PA", "AP", "LATERAL").index(view)
            u = rng.random()
            if view == "LATERAL":
                tag = "LL" if u < 0.2 else "UNK" if u < 0.3 else "LATERAL"
            else:
                tag = "UNK" if u < 0.1 else "AP AXIAL" if u < 0.13 else "LATERAL" if u < 0.16 else view
            images.append(
                ImageRecord(
                    image_id=f"{sid}_img{k}",
                    view_tag=ViewTag.parse(tag),
                    embedding_ref=add_rows(image_rows, tokens, IMAGE_FILE),
                    view_probs=tuple(_view_probs(rng, true_cls)),
                    clip_ref=add_rows(clip_rows, rng.normal(size=(1, cfg.clip_dim)), CLIP_FILE),
                )
            )
        true_views.append(views)
        pooled = np.mean([clip_rows[-len(views) + k][0] for k in range(len(views))], axis=0)
        v_hat = pooled / np.linalg.norm(pooled)

        # current report
        sents = [FILLERS[int(rng.integers(len(FILLERS)))]]
        sents += [_finding_sentence(j, kw) for j in _ordered(active)] or [NORMAL_SENTENCE]
        labels = tuple(keyword_label(s, kw) for s in sents)
        report = Report(" ".join(sents), tuple(sents), labels)

        def prior(source: str, findings: list[tuple[int, str]], negative: int | None) -> Report:
            texts, kinds, embs = [], [], []
            texts.append(FILLERS[int(rng.integers(len(FILLERS)))])
            kinds.append("other")
            for j, kind in findings:
                texts.append(_finding_sentence(j, kw))
                kinds.append(kind)
            if negative is not None:
                texts.append(f"no {kw[negative]}.")
                kinds.append("other")
            for kind in kinds:
                lo, hi = {"relevant": cfg.relevant_sim, "stale": cfg.stale_sim}.get(kind, cfg.filler_sim)
                embs.append(_text_embedding(rng, v_hat, rng.uniform(lo, hi)))
            ref = add_rows(text_rows, np.array(embs), TEXT_FILE)
            for n, kind in enumerate(kinds):
                sentence_truth[(i, source, n)] = kind
            return Report(
                " ".join(texts), tuple(texts), tuple(keyword_label(t, kw) for t in texts), ref
            )

        inactive = [j for j in range(N_PATHOLOGIES) if j not in active]
        p1 = p2 = None
        if rng.random() < cfg.prior1_rate:
            f1 = [(j, "relevant") for j in _ordered(active) if rng.random() < 0.8]
            neg = int(rng.choice(inactive)) if inactive and rng.random() < 0.3 else None
            p1 = prior("prior1", f1, neg)
            if rng.random() < cfg.prior2_rate:
                used: set[int] = set()
                f2: list[tuple[int, str]] = []
                for _ in range(int(rng.integers(1, 4))):
                    pool_active = [j for j in active if j not in used]
                    pool_stale = [j for j in inactive if j not in used]
                    stale = rng.random() < cfg.stale_rate or not pool_active
                    pool = pool_stale if stale else pool_active
                    if not pool:
                        break
                    w = zipf_w[pool] / zipf_w[pool].sum()
                    j = int(rng.choice(pool, p=w))
                    used.add(j)
                    f2.append((j, "stale" if stale else "relevant"))
                f2 = sorted(f2, key=lambda t: _ordered([x for x, _ in f2]).index(t[0]))
                p2 = prior("prior2", f2, None)
        studies.append(Study(sid, tuple(images), report, p1, p2))

    store = EmbeddingStore(
        arrays={
            IMAGE_FILE: np.vstack(image_rows),
            CLIP_FILE: np.vstack(clip_rows),
            TEXT_FILE: np.vstack(text_rows) if text_rows else np.zeros((0, cfg.clip_dim)),
        }
    )
    return SynthCorpus(studies, truth, FreqTable(tuple(counts)), store, sentence_truth, true_views, cfg)


def write_synth(corpus: SynthCorpus, out_dir) -> None:
    """Write corpus.jsonl, the EMB1 files and truth.json (per-study findings, sentence kinds)."""
    import json
    from pathlib import Path

    from ..corpus import write_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "corpus.jsonl", corpus.studies)
    corpus.store.dump(out)
    truth = {
        "findings": {s.study_id: sorted(t) for s, t in zip(corpus.studies, corpus.truth)},
        "sentences": {f"{corpus.studies[i].study_id}/{src}/{n}": kind for (i, src, n), kind in corpus.sentence_truth.items()},
        "views": {s.study_id: v for s, v in zip(corpus.studies, corpus.true_views)},
        "frequencies": corpus.freq.to_dict(),
    }
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True) + "\n")
