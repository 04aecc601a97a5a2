"""Directional desk-scale experiments: loss reweighting vs. plain CE, and prior-filter ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..cef import FilterConfig, FilterMode, filter_prior, pooled_image_embedding, prior_records
from ..tsl import TierConfig
from .decoder import LossMode, TrainConfig, split_indices, train_toy
from .synth import SynthConfig, SynthCorpus, generate_corpus

log = logging.getLogger(__name__)

# size of the reference training split the default tier thresholds were set on
REFERENCE_TRAIN_REPORTS = 270_790


@dataclass
class LabConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, lr=0.5))
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    alpha: float = 0.1
    gamma: float = 2.0
    # None: scale the reference thresholds (20000 / 8000) to the training split size
    t1: int | None = None
    t2: int | None = None
    n_tail: int = 3
    taus: tuple[float, ...] = (0.22,)
    tau_high_plus: float = 0.30

    def tiers(self, n_train: int) -> TierConfig:
        t1 = self.t1 if self.t1 is not None else round(20000 * n_train / REFERENCE_TRAIN_REPORTS)
        t2 = self.t2 if self.t2 is not None else round(8000 * n_train / REFERENCE_TRAIN_REPORTS)
        return TierConfig(t1=t1, t2=t2, alpha=self.alpha, gamma=self.gamma)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "t1": self.t1,
            "t2": self.t2,
            "n_tail": self.n_tail,
            "taus": list(self.taus),
            "tau_high_plus": self.tau_high_plus,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabConfig":
        base = cls()
        return cls(
            synth=SynthConfig.from_dict(d["synth"]) if "synth" in d else base.synth,
            train=TrainConfig(**{**base.train.to_dict(), **d.get("train", {})}),
            seeds=tuple(d.get("seeds", base.seeds)),
            alpha=float(d.get("alpha", base.alpha)),
            gamma=float(d.get("gamma", base.gamma)),
            t1=d.get("t1", base.t1),
            t2=d.get("t2", base.t2),
            n_tail=int(d.get("n_tail", base.n_tail)),
            taus=tuple(d.get("taus", base.taus)),
            tau_high_plus=float(d.get("tau_high_plus", base.tau_high_plus)),
        )


def imbalance_experiment(cfg: LabConfig, corpus: SynthCorpus | None = None) -> dict:
    """Per-finding F1 under CE and TSL for every seed, plus tail/head summaries."""
    corpus = corpus or generate_corpus(cfg.synth)
    train_idx, _ = split_indices(len(corpus.studies), cfg.train.test_fraction)
    tiers = cfg.tiers(len(train_idx))
    runs = []
    freq = None
    for seed in cfg.seeds:
        row = {"seed": seed}
        for mode in (LossMode.CE, LossMode.TSL):
            res = train_toy(corpus, mode, tiers, cfg.train, seed)
            freq = res.freq
            row[mode.value] = {
                "f1": res.metrics.f1,
                "precision": res.metrics.precision,
                "recall": res.metrics.recall,
                "support": res.metrics.support,
                "micro_f1": res.metrics.micro_f1,
                "final_loss": res.losses[-1],
            }
            log.info("seed %d %s micro-F1 %.3f", seed, mode.value, res.metrics.micro_f1)
        runs.append(row)

    order = sorted(range(len(freq.counts)), key=lambda j: (freq.counts[j], j))
    rare = order[: cfg.n_tail]
    common = order[-cfg.n_tail:]
    wins = 0
    degradations = []
    for row in runs:
        ce = np.array(row["ce"]["f1"])
        tsl = np.array(row["tsl"]["f1"])
        row["rare_f1"] = {"ce": float(ce[rare].mean()), "tsl": float(tsl[rare].mean())}
        row["common_f1"] = {"ce": float(ce[common].mean()), "tsl": float(tsl[common].mean())}
        row["tsl_wins_rare"] = row["rare_f1"]["tsl"] > row["rare_f1"]["ce"]
        wins += row["tsl_wins_rare"]
        degradations.append(row["common_f1"]["ce"] - row["common_f1"]["tsl"])
    return {
        "config": cfg.to_dict(),
        "tiers": tiers.to_dict(),
        "train_frequencies": list(freq.counts),
        "rare_findings": rare,
        "common_findings": common,
        "runs": runs,
        "rare_wins": wins,
        "n_seeds": len(runs),
        "mean_common_degradation": float(np.mean(degradations)),
        "max_common_degradation": float(np.max(degradations)),
    }


@dataclass(frozen=True)
class AblationRow:
    mode: str
    tau: float
    stale_total: int
    stale_retained: int
    relevant_total: int
    relevant_retained: int

    @property
    def stale_rate(self) -> float:
        return self.stale_retained / self.stale_total if self.stale_total else 0.0

    @property
    def relevant_rate(self) -> float:
        return self.relevant_retained / self.relevant_total if self.relevant_total else 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__, stale_rate=self.stale_rate, relevant_rate=self.relevant_rate)


def filter_ablation(
    corpus: SynthCorpus,
    taus: Sequence[float] = (0.22,),
    modes: Sequence[FilterMode] = (FilterMode.NONE, FilterMode.FIXED, FilterMode.DYNAMIC),
    tau_high_plus: float = 0.30,
) -> list[AblationRow]:
    """Fraction of stale and of still-relevant prior sentences each filter mode keeps."""
    prepared = []
    for i, study in enumerate(corpus.studies):
        recs = prior_records(study, corpus.store)
        if recs:
            prepared.append((i, recs, pooled_image_embedding(study, corpus.store)))
    rows = []
    for tau in taus:
        # keep the default 0.08 margin when a sweep pushes tau past tau_high_plus
        high = tau_high_plus if tau_high_plus > tau else tau + 0.08
        for mode in modes:
            fc = FilterConfig(mode=mode, tau=tau, tau_high_plus=high)
            counts = {"stale": [0, 0], "relevant": [0, 0]}
            for i, recs, v in prepared:
                kept = {r.key for r in filter_prior(recs, v, fc).retained}
                for r in recs:
                    kind = corpus.sentence_truth[(i, r.source.value, r.index)]
                    if kind in counts:
                        counts[kind][0] += 1
                        counts[kind][1] += r.key in kept
            rows.append(AblationRow(mode.value, tau, counts["stale"][0], counts["stale"][1],
                                    counts["relevant"][0], counts["relevant"][1]))
    return rows
