"""Token-sensitive loss weighting for long-tailed findings.

Key sentences (a pathology marked Positive or Uncertain) get a raw weight
from the frequency tier of their rarest finding. Raw weights are rescaled
into ``[alpha, 1]`` by the batch maximum and broadcast to the sentence's
tokens. The loss adds ``gamma`` times the weighted token loss to plain
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .codebook import FINDINGS, N_PATHOLOGIES
from .core import LabelVector, Report, Study, key_findings
from .errors import AlignmentError, EmptyWeightSet, MissingLabels
from .text import sentence_spans


@dataclass(frozen=True)
class FreqTable:
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.counts) != N_PATHOLOGIES:
            raise ValueError(f"frequency table needs {N_PATHOLOGIES} counts, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            raise ValueError("frequency counts must be non-negative")

    def __getitem__(self, j: int) -> int:
        return self.counts[j]

    def to_dict(self) -> dict:
        return {"counts": {FINDINGS[j]: int(c) for j, c in enumerate(self.counts)}}

    @classmethod
    def from_dict(cls, d: dict) -> "FreqTable":
        counts = d["counts"]
        if isinstance(counts, dict):
            return cls(tuple(int(counts[FINDINGS[j]]) for j in range(N_PATHOLOGIES)))
        return cls(tuple(int(c) for c in counts))

    def merge(self, other: "FreqTable") -> "FreqTable":
        return FreqTable(tuple(a + b for a, b in zip(self.counts, other.counts)))


@dataclass(frozen=True)
class TierConfig:
    t1: int = 20000
    t2: int = 8000
    alpha: float = 0.1
    gamma: float = 2.0

    def __post_init__(self):
        if not self.t2 < self.t1:
            raise ValueError(f"need t2 < t1, got t1={self.t1}, t2={self.t2}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    def to_dict(self) -> dict:
        return {"t1": self.t1, "t2": self.t2, "alpha": self.alpha, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "TierConfig":
        base = cls()
        return cls(
            t1=int(d.get("t1", base.t1)),
            t2=int(d.get("t2", base.t2)),
            alpha=float(d.get("alpha", base.alpha)),
            gamma=float(d.get("gamma", base.gamma)),
        )


def label_frequencies(corpus: Iterable[Study], level: str = "report") -> FreqTable:
    """Count, per pathology, the reports (or sentences, with ``level="sentence"``)
    in which it is Positive or Uncertain."""
    if level not in ("report", "sentence"):
        raise ValueError(f"unknown counting level {level!r}")
    counts = [0] * N_PATHOLOGIES
    seen = 0
    for study in corpus:
        seen += 1
        lvs = study.report.label_vectors
        if lvs is None:
            raise MissingLabels(study.study_id)
        if level == "sentence":
            for lv in lvs:
                for j in key_findings(lv):
                    counts[j] += 1
        else:
            active = set()
            for lv in lvs:
                active.update(key_findings(lv))
            for j in active:
                counts[j] += 1
    if seen == 0:
        raise ValueError("cannot count label frequencies over an empty corpus")
    return FreqTable(tuple(counts))


def sentence_rarity(lv: LabelVector, freq: FreqTable) -> int | None:
    """Frequency of the rarest Positive/Uncertain pathology, or None for non-key sentences."""
    found = key_findings(lv)
    if not found:
        return None
    return min(freq[j] for j in found)


def raw_weight(f: int, cfg: TierConfig = TierConfig()) -> float:
    if f >= cfg.t1:
        return 1.0
    if f >= cfg.t2:
        return 1.5
    return 2.0


def normalized_weight(raw: float, m: float, alpha: float) -> float:
    # clamp: alpha + (1 - alpha) can round one ulp past 1.0
    return min(1.0, max(alpha, alpha + (1.0 - alpha) * raw / m))


def normalize_weights(raws: Sequence[float], cfg: TierConfig = TierConfig(), m: float | None = None) -> tuple[list[float], float]:
    """Rescale raw weights to ``alpha + (1 - alpha) * raw / M``.

    ``M`` defaults to ``max(raws)``; pass it explicitly to normalize against a
    wider scope (a whole batch or corpus).
    """
    if len(raws) == 0:
        raise EmptyWeightSet("no raw weights to normalize")
    if m is None:
        m = max(raws)
    elif m < max(raws):
        raise ValueError(f"normalizer {m} is below the largest raw weight {max(raws)}")
    return [normalized_weight(r, m, cfg.alpha) for r in raws], float(m)


@dataclass(frozen=True)
class WeightPlan:
    sentence_weights: tuple[float, ...]
    token_weights: tuple[float, ...]
    m: float | None  # None when the report has no key sentence

    def to_dict(self) -> dict:
        return {"sentence_weights": list(self.sentence_weights), "token_weights": list(self.token_weights), "M": self.m}


def _check_spans(spans: Sequence[tuple[int, int]], n_sentences: int, n_tokens: int) -> None:
    if len(spans) != n_sentences:
        raise AlignmentError(f"{len(spans)} spans for {n_sentences} sentences")
    prev_end = 0
    for start, end in spans:
        if start < prev_end or end < start or end > n_tokens:
            raise AlignmentError(f"span ({start}, {end}) overlaps, is reversed, or exceeds {n_tokens} tokens")
        prev_end = end


def key_raw_weights(report: Report, freq: FreqTable, cfg: TierConfig) -> list[float | None]:
    if report.label_vectors is None:
        raise AlignmentError("report has no label vectors")
    out: list[float | None] = []
    for lv in report.label_vectors:
        r = sentence_rarity(lv, freq)
        out.append(None if r is None else raw_weight(r, cfg))
    return out


def build_weight_plan(
    report: Report,
    freq: FreqTable,
    cfg: TierConfig = TierConfig(),
    spans: Sequence[tuple[int, int]] | None = None,
    n_tokens: int | None = None,
    m: float | None = None,
) -> WeightPlan:
    """Sentence and token weights for one report.

    ``spans`` maps each sentence to its ``[start, end)`` token range. The
    default tokenizes ``report.sentences`` with :func:`suremed.text.tokenize`.
    Tokens outside every span (e.g. an end-of-sequence marker) get weight 0.
    ``m`` overrides the normalizer, which otherwise is this report's largest
    key-sentence raw weight.
    """
    if spans is None:
        tokens, spans = sentence_spans(list(report.sentences))
        n_tokens = len(tokens)
    elif n_tokens is None:
        n_tokens = max((e for _, e in spans), default=0)
    _check_spans(spans, len(report.sentences), n_tokens)

    raws = key_raw_weights(report, freq, cfg)
    keyed = [r for r in raws if r is not None]
    sentence_w = [0.0] * len(raws)
    used_m = None
    if keyed:
        normed, used_m = normalize_weights(keyed, cfg, m)
        it = iter(normed)
        sentence_w = [0.0 if r is None else next(it) for r in raws]
    token_w = [0.0] * n_tokens
    for w, (start, end) in zip(sentence_w, spans):
        for t in range(start, end):
            token_w[t] = w
    return WeightPlan(tuple(sentence_w), tuple(token_w), used_m)


def batch_normalizer(reports: Iterable[Report], freq: FreqTable, cfg: TierConfig) -> float | None:
    """Largest key-sentence raw weight over a batch (None if the batch has no key sentence)."""
    best = None
    for rep in reports:
        for r in key_raw_weights(rep, freq, cfg):
            if r is not None and (best is None or r > best):
                best = r
    return best


def build_batch_plans(
    reports: Sequence[Report],
    freq: FreqTable,
    cfg: TierConfig = TierConfig(),
    batch_size: int = 32,
    scope: str = "batch",
) -> list[WeightPlan]:
    """Weight plans for consecutive batches sharing one normalizer per batch
    (``scope="batch"``) or one for the whole sequence (``scope="corpus"``)."""
    if scope not in ("batch", "corpus"):
        raise ValueError(f"unknown normalization scope {scope!r}")
    if scope == "corpus":
        groups = [list(reports)]
    else:
        groups = [list(reports[i:i + batch_size]) for i in range(0, len(reports), batch_size)]
    plans = []
    for group in groups:
        m = batch_normalizer(group, freq, cfg)
        plans.extend(build_weight_plan(rep, freq, cfg, m=m) for rep in group)
    return plans


@dataclass(frozen=True)
class TSLLoss:
    ce: float
    key: float
    total: float


def tsl_loss(token_losses: Sequence[float], plan: WeightPlan | Sequence[float], cfg: TierConfig = TierConfig()) -> TSLLoss:
    weights = plan.token_weights if isinstance(plan, WeightPlan) else plan
    if len(weights) != len(token_losses):
        raise AlignmentError(f"{len(token_losses)} token losses for {len(weights)} token weights")
    n = len(token_losses)
    if n == 0:
        return TSLLoss(0.0, 0.0, 0.0)
    ce = sum(token_losses) / n
    key = sum(w * l for w, l in zip(weights, token_losses)) / n
    return TSLLoss(ce, key, ce + cfg.gamma * key)
