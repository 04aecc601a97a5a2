import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_retained
from suremed.cef import (
    DropReason,
    FilterConfig,
    FilterMode,
    SentenceRecord,
    Source,
    cosine_sim,
    filter_prior,
    pooled_image_embedding,
    prior_records,
    split_sentences,
    vanished_findings,
)
from suremed.codebook import finding_index
from suremed.core import LabelVector, has_positive_finding
from suremed.errors import ShapeMismatch, ZeroVector

FRACTURE = finding_index("Fracture")
DEVICES = finding_index("Support Devices")
IMAGE = np.array([1.0, 0.0])


def emb_at(sim):
    """Unit vector with the given cosine to IMAGE."""
    return np.array([sim, math.sqrt(1 - sim * sim)])


def rec(source, positives=(), emb=None, index=0, uncertain=()):
    return SentenceRecord(f"{source.value}-{index}", source, LabelVector.from_indices(positives, uncertain), emb, index)


def test_split_examples():
    assert split_sentences("No effusion. Heart size normal.") == ["No effusion.", "Heart size normal."]
    assert split_sentences("") == []
    assert split_sentences("Measures 1.5 cm. Stable.") == ["Measures 1.5 cm.", "Stable."]


def test_cosine_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert abs(cosine_sim([1, 1], [1, 0]) - 0.70710678) < 1e-8
    with pytest.raises(ZeroVector):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(ShapeMismatch):
        cosine_sim([1, 0, 0], [1, 0])


def test_vanished_examples():
    p1 = [rec(Source.PRIOR1, [DEVICES])]
    p2 = [rec(Source.PRIOR2, [DEVICES, FRACTURE])]
    assert vanished_findings(p1, p2) == {FRACTURE}
    assert vanished_findings(p1, []) == set()
    # uncertain in prior2 does not count as a finding that could vanish
    assert vanished_findings([], [rec(Source.PRIOR2, uncertain=[FRACTURE])]) == set()


def test_fixed_retains_above_tau():
    out = filter_prior([rec(Source.PRIOR1, [DEVICES], emb_at(0.25))], IMAGE, FilterConfig(FilterMode.FIXED))
    assert len(out.retained) == 1
    assert out.retained[0].similarity == pytest.approx(0.25, abs=1e-12)


def test_dynamic_drops_vanished_finding_below_high_threshold():
    sents = [rec(Source.PRIOR1, [DEVICES], emb_at(0.5)), rec(Source.PRIOR2, [FRACTURE], emb_at(0.25))]
    dyn = filter_prior(sents, IMAGE, FilterConfig(FilterMode.DYNAMIC))
    assert [r.text for r in dyn.retained] == ["prior1-0"]
    assert dyn.dropped[0][1] is DropReason.BELOW_TAU_HIGH_PLUS
    fixed = filter_prior(sents, IMAGE, FilterConfig(FilterMode.FIXED))
    assert [r.text for r in fixed.retained] == ["prior1-0", "prior2-0"]


def test_dynamic_keeps_persisting_finding_at_tau():
    sents = [rec(Source.PRIOR1, [DEVICES], emb_at(0.5)), rec(Source.PRIOR2, [DEVICES], emb_at(0.25), 1)]
    out = filter_prior(sents, IMAGE, FilterConfig(FilterMode.DYNAMIC))
    assert len(out.retained) == 2


def test_strict_all_prior2_flag():
    sents = [rec(Source.PRIOR2, [DEVICES], emb_at(0.25))]
    cfg = FilterConfig(FilterMode.DYNAMIC, strict_all_prior2=True)
    assert not filter_prior(sents, IMAGE, cfg).retained


def test_positive_gate_runs_first():
    sents = [rec(Source.PRIOR1, uncertain=[FRACTURE], emb=emb_at(0.9)), rec(Source.PRIOR1, [], emb_at(0.9), 1)]
    out = filter_prior(sents, IMAGE, FilterConfig(FilterMode.NONE))
    assert not out.retained
    assert {r for _, r in out.dropped} == {DropReason.NO_POSITIVE_FINDING}
    assert all(r.similarity == pytest.approx(0.9) for r, _ in out.dropped)
    relaxed = FilterConfig(FilterMode.NONE, require_positive=False)
    assert len(filter_prior(sents, IMAGE, relaxed).retained) == 2


def test_threshold_is_inclusive():
    # 3/5 is exact in floating point on both sides
    cfg = FilterConfig(FilterMode.FIXED, tau=0.6, tau_high_plus=0.7)
    out = filter_prior([rec(Source.PRIOR1, [DEVICES], np.array([3.0, 4.0]))], IMAGE, cfg)
    assert out.retained and out.retained[0].similarity == 0.6
    cfg = FilterConfig(FilterMode.DYNAMIC, tau=0.1, tau_high_plus=0.5)
    s = [rec(Source.PRIOR2, [FRACTURE], np.array([1.0, math.sqrt(3.0)]))]
    assert filter_prior(s, IMAGE, cfg).retained


def test_order_prior1_before_prior2():
    sents = [rec(Source.PRIOR2, [DEVICES], emb_at(0.9), 0), rec(Source.PRIOR1, [DEVICES], emb_at(0.9), 1),
             rec(Source.PRIOR1, [DEVICES], emb_at(0.9), 2)]
    out = filter_prior(sents, IMAGE, FilterConfig(FilterMode.FIXED))
    assert [r.key for r in out.retained] == [("prior1", 1), ("prior1", 2), ("prior2", 0)]


def test_missing_embedding_errors():
    with pytest.raises(ValueError):
        filter_prior([rec(Source.PRIOR1, [DEVICES])], None, FilterConfig(FilterMode.FIXED))
    assert filter_prior([rec(Source.PRIOR1, [DEVICES])], None, FilterConfig(FilterMode.NONE)).retained
    with pytest.raises(ZeroVector):
        filter_prior([rec(Source.PRIOR1, [DEVICES], emb_at(0.3))], np.zeros(2), FilterConfig(FilterMode.FIXED))


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(tau=0.3, tau_high_plus=0.3)
    cfg = FilterConfig(FilterMode.FIXED, 0.1, 0.2)
    assert FilterConfig.from_dict(cfg.to_dict()) == cfg


def as_tuples(records):
    return [(r.source.value, r.index, r.labels.codes(), r.embedding) for r in records]


def test_matches_brute_force_on_synthetic_studies(small_corpus):
    store = small_corpus.store
    for study in small_corpus.studies:
        recs = prior_records(study, store)
        image = pooled_image_embedding(study, store)
        for mode in FilterMode:
            cfg = FilterConfig(mode)
            got = [r.key for r in filter_prior(recs, image, cfg).retained]
            assert got == brute_force_retained(as_tuples(recs), image, mode.value, cfg.tau, cfg.tau_high_plus)


sims = st.floats(-1.0, 1.0)
label_sets = st.sets(st.integers(0, 12), max_size=3)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.tuples(st.booleans(), label_sets, sims), max_size=8),
    st.floats(0.0, 0.5),
    st.floats(0.01, 0.4),
)
def test_containment_and_partition(draws, tau, gap):
    sents = [
        rec(Source.PRIOR2 if late else Source.PRIOR1, sorted(pos), emb_at(s), i)
        for i, (late, pos, s) in enumerate(draws)
    ]
    kept = {}
    for mode in FilterMode:
        out = filter_prior(sents, IMAGE, FilterConfig(mode, tau, tau + gap))
        keys = [r.key for r in out.retained] + [r.key for r, _ in out.dropped]
        assert sorted(keys) == sorted(r.key for r in sents)
        assert all(has_positive_finding(r.labels) for r in out.retained)
        kept[mode] = {r.key for r in out.retained}
    assert kept[FilterMode.DYNAMIC] <= kept[FilterMode.FIXED] <= kept[FilterMode.NONE]


def test_deterministic(small_corpus):
    study = next(s for s in small_corpus.studies if s.prior2 is not None)
    recs = prior_records(study, small_corpus.store)
    image = pooled_image_embedding(study, small_corpus.store)
    a = filter_prior(recs, image)
    b = filter_prior(list(recs), image.copy())
    assert [(r.key, r.similarity) for r in a.retained] == [(r.key, r.similarity) for r in b.retained]
