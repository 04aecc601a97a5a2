import numpy as np
import pytest

from suremed.cef import FilterMode
from suremed.codebook import N_PATHOLOGIES, finding_index
from suremed.core import FindingLabel
from suremed.corpus import dumps_study
from suremed.lab.decoder import (
    LossMode,
    TrainConfig,
    _make_batch,
    _prepare,
    finding_metrics,
    init_decoder,
    loss_and_grads,
    parameter_count,
    train_toy,
)
from suremed.lab.experiments import LabConfig, filter_ablation
from suremed.lab.labeler import keyword_label, label_text
from suremed.lab.synth import PREVALENCE_ORDER, SynthConfig, generate_corpus
from suremed.favr import init_params
from suremed.tsl import TierConfig, label_frequencies
from suremed.views import RepairPolicy

PNEUMOTHORAX = finding_index("Pneumothorax")


def test_keyword_labeler_examples():
    lv = keyword_label("pneumothorax is present.")
    assert lv[PNEUMOTHORAX] is FindingLabel.POSITIVE
    assert keyword_label("no pneumothorax.")[PNEUMOTHORAX] is FindingLabel.NEGATIVE
    assert all(l is FindingLabel.ABSENT for l in keyword_label("the patient is comfortable."))
    assert label_text("edema is present. no pneumothorax.") == {finding_index("Edema")}


def test_generator_is_deterministic():
    a = generate_corpus(SynthConfig(n_studies=50, seed=3))
    b = generate_corpus(SynthConfig(n_studies=50, seed=3))
    assert [dumps_study(s) for s in a.studies] == [dumps_study(s) for s in b.studies]
    for name in a.store.names():
        assert a.store.matrix(name).tobytes() == b.store.matrix(name).tobytes()
    c = generate_corpus(SynthConfig(n_studies=50, seed=4))
    assert [dumps_study(s) for s in a.studies] != [dumps_study(s) for s in c.studies]


def test_generator_bookkeeping(default_corpus):
    assert label_frequencies(default_corpus.studies) == default_corpus.freq
    counts = [0] * N_PATHOLOGIES
    for t in default_corpus.truth:
        for j in t:
            counts[j] += 1
    assert tuple(counts) == default_corpus.freq.counts
    ordered = [counts[j] for j in PREVALENCE_ORDER]
    assert ordered[-1] < ordered[0] / 10
    marg = SynthConfig().marginals()
    assert all(marg[PREVALENCE_ORDER[k]] > marg[PREVALENCE_ORDER[k + 1]] for k in range(12))


def test_labels_consistent_with_truth(small_corpus):
    for study, truth in zip(small_corpus.studies, small_corpus.truth):
        assert label_text(study.report.findings_text) == set(truth)
        for text, lv in zip(study.report.sentences, study.report.label_vectors):
            assert lv == keyword_label(text)


def test_embedding_geometry(small_corpus):
    from suremed.cef import cosine_sim, pooled_image_embedding, prior_records

    lo, hi = SynthConfig().relevant_sim
    for i, study in enumerate(small_corpus.studies):
        v = pooled_image_embedding(study, small_corpus.store)
        for r in prior_records(study, small_corpus.store):
            kind = small_corpus.sentence_truth[(i, r.source.value, r.index)]
            sim = cosine_sim(v, r.embedding)
            if kind == "relevant":
                assert sim >= lo - 1e-5
            elif kind == "stale":
                assert sim < lo


def test_parameter_budget():
    rp = init_params(0, 8, 16, 16)
    dp = init_decoder(np.random.default_rng(0), 40, 32, 16)
    assert parameter_count(rp, dp) < 100_000


def test_decoder_gradients_match_finite_differences(small_corpus):
    cfg = TierConfig(t1=40, t2=15)
    from suremed.lab.decoder import Vocab
    from suremed.text import sentence_spans

    vocab = Vocab(t for s in small_corpus.studies for t in sentence_spans(list(s.report.sentences))[0])
    ex = _prepare(small_corpus, range(6), vocab, small_corpus.freq, cfg, RepairPolicy())
    batch = _make_batch(ex, LossMode.TSL, cfg, uniform=False)
    rng = np.random.default_rng(1)
    rp = init_params(1, 3, ex[0].hf.shape[1], 4)
    dp = init_decoder(rng, len(vocab), 5, 4)
    _, _, gr, gd = loss_and_grads(rp, dp, batch)
    eps = 1e-5
    for params, grads in ((rp.arrays(), gr), (dp.arrays(), gd)):
        for name, arr in params.items():
            flat = arr.reshape(-1)
            for k in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                old = flat[k]
                flat[k] = old + eps
                up = loss_and_grads(rp, dp, batch)[0]
                flat[k] = old - eps
                down = loss_and_grads(rp, dp, batch)[0]
                flat[k] = old
                num = (up - down) / (2 * eps)
                assert abs(num - grads[name].reshape(-1)[k]) <= 1e-6 * max(1.0, abs(num)), name


def test_tsl_reduces_to_ce_with_uniform_weights(small_corpus):
    train = TrainConfig(epochs=2, lr=0.3, n_queries=4, out_dim=8, hidden=8)
    kw = dict(max_steps=5, evaluate_model=False, keep_snapshots=True)
    ce = train_toy(small_corpus, LossMode.CE, TierConfig(), train, seed=2, **kw)
    tsl = train_toy(small_corpus, LossMode.TSL, TierConfig(gamma=0.0), train, seed=2, uniform_weights=True, **kw)
    assert len(ce.snapshots) == 5
    assert ce.losses == tsl.losses
    for a, b in zip(ce.snapshots, tsl.snapshots):
        assert a.tobytes() == b.tobytes()
    weighted = train_toy(small_corpus, LossMode.TSL, TierConfig(t1=40, t2=15), train, seed=2, **kw)
    assert weighted.snapshots[-1].tobytes() != ce.snapshots[-1].tobytes()


def test_training_is_deterministic(small_corpus):
    train = TrainConfig(epochs=1, n_queries=4, out_dim=8, hidden=8)
    a = train_toy(small_corpus, LossMode.TSL, TierConfig(), train, seed=1)
    b = train_toy(small_corpus, LossMode.TSL, TierConfig(), train, seed=1)
    assert a.losses == b.losses
    assert a.metrics.to_dict() == b.metrics.to_dict()
    assert all(np.isfinite(a.losses))


def test_metric_sanity():
    truth = [frozenset({0, 1}), frozenset({2}), frozenset()]
    pred = [{0}, {2, 3}, {1}]
    m = finding_metrics(truth, pred)
    assert m.precision[0] == 1.0 and m.recall[1] == 0.0 and m.f1[4] == 0.0
    assert (m.micro_precision, m.micro_recall) == (0.5, 2 / 3)
    for vals in (m.precision, m.recall, m.f1):
        assert all(0.0 <= v <= 1.0 for v in vals)
    active = [f for f, s in zip(m.f1, m.support) if s]
    assert min(active) <= m.micro_f1 <= max(m.f1)


def test_ablation_examples(small_corpus):
    rows = {r.mode: r for r in filter_ablation(small_corpus, (0.22,))}
    assert rows["none"].stale_rate == 1.0
    assert rows["dynamic"].stale_retained <= rows["fixed"].stale_retained <= rows["none"].stale_retained
    assert rows["dynamic"].relevant_rate >= 0.95 * rows["fixed"].relevant_rate


def test_stale_rate_monotone_in_tau(small_corpus):
    taus = (0.0, 0.1, 0.2, 0.22, 0.3, 0.4)
    for mode in (FilterMode.FIXED, FilterMode.DYNAMIC):
        rates = [r.stale_rate for r in filter_ablation(small_corpus, taus, (mode,))]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lab_tiers_scale_with_training_size():
    t = LabConfig().tiers(1600)
    assert (t.t1, t.t2) == (118, 47)
    fixed = LabConfig(t1=10, t2=5).tiers(1600)
    assert (fixed.t1, fixed.t2) == (10, 5)
