"""Tiny autoregressive decoder over fused image features, trained with plain SGD.

Each step embeds the previous token, adds a running sum of history embeddings
(so the decoder knows which findings it already wrote), cross-attends to the
resampler output, and predicts the next token. Gradients are hand-derived and
flow back through the resampler.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..codebook import N_PATHOLOGIES
from ..errors import MissingFrontal, NoUsableViews, TrainingDiverged
from ..favr import (
    GradOp,
    InitScheme,
    ResamplerParams,
    attention_backward,
    attention_forward,
    favr_backward,
    favr_forward,
    grad_check,
    init_params,
    toy_grad_inputs,
)
from ..text import sentence_spans
from ..tsl import FreqTable, TierConfig, key_raw_weights, label_frequencies, normalized_weight
from ..views import RepairPolicy, split_views
from .labeler import label_text
from .synth import SynthCorpus

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class LossMode(enum.Enum):
    CE = "ce"
    TSL = "tsl"


class Vocab:
    def __init__(self, tokens):
        self.tokens = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks) -> list[int]:
        return [self.index[t] for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class DecoderParams:
    emb: np.ndarray  # [V, h] previous-token embedding
    hist: np.ndarray  # [V, h] history embedding, summed over the prefix
    wq: np.ndarray  # [h, h]
    wk: np.ndarray  # [d, h]
    wv: np.ndarray  # [d, h]
    wo: np.ndarray  # [h, V]
    bo: np.ndarray  # [V]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("emb", "hist", "wq", "wk", "wv", "wo", "bo")}

    def copy(self) -> "DecoderParams":
        return DecoderParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_decoder(rng: np.random.Generator, vocab_size: int, hidden: int, feat_dim: int) -> DecoderParams:
    def g(fan_in, *shape):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    return DecoderParams(
        emb=g(hidden, vocab_size, hidden),
        hist=g(hidden, vocab_size, hidden),
        wq=g(hidden, hidden, hidden),
        wk=g(feat_dim, feat_dim, hidden),
        wv=g(feat_dim, feat_dim, hidden),
        wo=g(hidden, hidden, vocab_size),
        bo=np.zeros(vocab_size),
    )


def parameter_count(rp: ResamplerParams, dp: DecoderParams) -> int:
    return sum(a.size for a in rp.arrays().values()) + sum(a.size for a in dp.arrays().values())


@dataclass
class _DecCache:
    tok_in: np.ndarray
    attn: object
    hd: np.ndarray
    probs: np.ndarray


def decoder_forward(dp: DecoderParams, z: np.ndarray, tok_in: np.ndarray):
    x = dp.emb[tok_in] + np.cumsum(dp.hist[tok_in], axis=1)
    ctx, attn = attention_forward(x, z, dp.wq, dp.wk, dp.wv)
    hd = np.tanh(x + ctx)
    logits = hd @ dp.wo + dp.bo
    return logits, (x, attn, hd)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


@dataclass
class Batch:
    hf: np.ndarray  # [B, Nf, D]
    hl: np.ndarray  # [B, Nl, D]
    lat_mask: np.ndarray  # [B]
    tok_in: np.ndarray  # [B, T]
    tok_out: np.ndarray  # [B, T]
    coef: np.ndarray  # [B, T] per-token loss coefficient, 0 on padding


def loss_and_grads(rp: ResamplerParams, dp: DecoderParams, batch: Batch):
    """Weighted token cross-entropy ``sum(coef * nll)`` and its gradients."""
    z, fcache = favr_forward(batch.hf, batch.hl, rp, batch.lat_mask)
    logits, (x, attn, hd) = decoder_forward(dp, z, batch.tok_in)
    logp = _log_softmax(logits)
    nll = -np.take_along_axis(logp, batch.tok_out[..., None], axis=-1)[..., 0]
    loss = float(np.sum(batch.coef * nll))

    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, batch.tok_out[..., None], np.take_along_axis(dlogits, batch.tok_out[..., None], axis=-1) - 1.0, axis=-1
    )
    dlogits *= batch.coef[..., None]
    h = hd.shape[-1]
    V = logits.shape[-1]
    gd = {}
    gd["wo"] = hd.reshape(-1, h).T @ dlogits.reshape(-1, V)
    gd["bo"] = dlogits.reshape(-1, V).sum(axis=0)
    du = (dlogits @ dp.wo.T) * (1.0 - hd * hd)
    dx_att, dz, gd["wq"], gd["wk"], gd["wv"] = attention_backward(du, attn)
    dx = du + dx_att
    gd["emb"] = np.zeros_like(dp.emb)
    np.add.at(gd["emb"], batch.tok_in, dx)
    # x_t sums hist over s <= t, so hist at position s collects dx from every t >= s
    rcum = np.flip(np.cumsum(np.flip(dx, axis=1), axis=1), axis=1)
    gd["hist"] = np.zeros_like(dp.hist)
    np.add.at(gd["hist"], batch.tok_in, rcum)
    gr = favr_backward(dz, fcache)
    gr = {k: gr[k] for k in rp.arrays()}
    return loss, nll, gr, gd


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------


@dataclass
class _Example:
    index: int
    hf: np.ndarray
    hl: np.ndarray | None
    tokens: list[int]  # targets, ending in EOS
    raw: np.ndarray  # per target token raw weight, 0 for non-key tokens
    truth: frozenset[int]


def _prepare(corpus: SynthCorpus, indices, vocab: Vocab, freq: FreqTable, cfg: TierConfig, policy: RepairPolicy):
    out = []
    store = corpus.store
    for i in indices:
        study = corpus.studies[i]
        try:
            frontal, lateral, _ = split_views(study, policy)
        except NoUsableViews:
            continue
        if not frontal:
            continue
        hf = np.vstack([store.rows(im.embedding_ref) for im in frontal])
        hl = np.vstack([store.rows(im.embedding_ref) for im in lateral]) if lateral else None
        toks, spans = sentence_spans(list(study.report.sentences))
        raw = np.zeros(len(toks) + 1)
        for r, (a, b) in zip(key_raw_weights(study.report, freq, cfg), spans):
            if r is not None:
                raw[a:b] = r
        out.append(_Example(i, hf, hl, vocab.encode(toks) + [EOS], raw, corpus.truth[i]))
    return out


def _stack(examples: list[_Example]):
    hf = np.stack([e.hf for e in examples])
    shapes = {e.hl.shape for e in examples if e.hl is not None}
    if len(shapes) > 1 or {e.hf.shape for e in examples} != {hf.shape[1:]}:
        raise ValueError("toy trainer needs uniform token counts per view")
    lat_shape = shapes.pop() if shapes else hf.shape[1:]
    hl = np.stack([e.hl if e.hl is not None else np.zeros(lat_shape) for e in examples])
    mask = np.array([e.hl is not None for e in examples], dtype=np.float64)
    return hf, hl, mask


def _make_batch(examples: list[_Example], mode: LossMode, cfg: TierConfig, uniform: bool) -> Batch:
    B = len(examples)
    T = max(len(e.tokens) for e in examples)
    tok_in = np.full((B, T), PAD, dtype=np.int64)
    tok_out = np.full((B, T), PAD, dtype=np.int64)
    coef = np.zeros((B, T))
    # batch-wide normalizer over key-sentence raw weights
    m = max((float(e.raw.max()) for e in examples), default=0.0)
    gamma = cfg.gamma if mode is LossMode.TSL else 0.0
    for b, e in enumerate(examples):
        n = len(e.tokens)
        tok_out[b, :n] = e.tokens
        tok_in[b, 0] = BOS
        tok_in[b, 1:n] = e.tokens[:-1]
        if uniform:
            w = np.ones(n)
        elif m > 0:
            w = np.array([normalized_weight(r, m, cfg.alpha) if r > 0 else 0.0 for r in e.raw])
        else:
            w = np.zeros(n)
        coef[b, :n] = (1.0 + gamma * w) / (n * B)
    hf, hl, mask = _stack(examples)
    return Batch(hf, hl, mask, tok_in, tok_out, coef)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class FindingMetrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    micro_precision: float
    micro_recall: float
    micro_f1: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def finding_metrics(truth: list[frozenset[int]], pred: list[set[int]]) -> FindingMetrics:
    P, R, F, S = [], [], [], []
    TP = FP = FN = 0
    for j in range(N_PATHOLOGIES):
        tp = sum(1 for t, p in zip(truth, pred) if j in t and j in p)
        fp = sum(1 for t, p in zip(truth, pred) if j not in t and j in p)
        fn = sum(1 for t, p in zip(truth, pred) if j in t and j not in p)
        p, r, f = _prf(tp, fp, fn)
        P.append(p)
        R.append(r)
        F.append(f)
        S.append(tp + fn)
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    mp, mr, mf = _prf(TP, FP, FN)
    return FindingMetrics(P, R, F, S, mp, mr, mf)


def greedy_decode(rp: ResamplerParams, dp: DecoderParams, batch_hf, batch_hl, lat_mask, max_len: int = 64) -> list[list[int]]:
    z, _ = favr_forward(batch_hf, batch_hl, rp, lat_mask)
    B = z.shape[0]
    cum = np.zeros((B, dp.emb.shape[1]))
    prev = np.full(B, BOS)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        cum = cum + dp.hist[prev]
        x = (dp.emb[prev] + cum)[:, None, :]
        ctx, _ = attention_forward(x, z, dp.wq, dp.wk, dp.wv)
        logits = (np.tanh(x + ctx) @ dp.wo + dp.bo)[:, 0, :]
        logits[:, PAD] = -np.inf
        logits[:, BOS] = -np.inf
        nxt = logits.argmax(axis=-1)
        for b in np.flatnonzero(~done):
            if nxt[b] == EOS:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        prev = nxt
    return out


def evaluate(rp, dp, vocab: Vocab, examples: list[_Example], batch_size: int = 256):
    texts, preds = [], []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        hf, hl, mask = _stack(chunk)
        for ids in greedy_decode(rp, dp, hf, hl, mask):
            text = " ".join(vocab.decode(ids))
            texts.append(text)
            preds.append(label_text(text))
    return finding_metrics([e.truth for e in examples], preds), texts


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


_GATE_PASSED = False


def _gradient_gate() -> None:
    global _GATE_PASSED
    if _GATE_PASSED:
        return
    params, inputs = toy_grad_inputs(0)
    for op in GradOp:
        report = grad_check(op, params, inputs, eps=1e-4, tol=1e-4)
        if not report.passed:
            raise RuntimeError(f"resampler gradient check failed for {op.value}: {report.errors}")
    _GATE_PASSED = True


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 32
    hidden: int = 32
    n_queries: int = 8
    out_dim: int = 16
    test_fraction: float = 0.2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    resampler: ResamplerParams
    decoder: DecoderParams
    vocab: Vocab
    losses: list[float]
    metrics: FindingMetrics | None
    freq: FreqTable
    samples: list[str] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)


def _flat(rp: ResamplerParams, dp: DecoderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in list(rp.arrays().values()) + list(dp.arrays().values())])


def split_indices(n: int, test_fraction: float) -> tuple[range, range]:
    cut = n - int(round(n * test_fraction))
    return range(cut), range(cut, n)


def train_toy(
    corpus: SynthCorpus,
    loss_mode: LossMode,
    cfg: TierConfig,
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
    *,
    uniform_weights: bool = False,
    policy: RepairPolicy = RepairPolicy(),
    max_steps: int | None = None,
    evaluate_model: bool = True,
    keep_snapshots: bool = False,
) -> TrainResult:
    """Train resampler + decoder on the training split and score findings on the held-out split.

    ``uniform_weights`` forces every token weight to 1, which with
    ``cfg.gamma == 0`` makes TSL training identical to CE training.
    """
    _gradient_gate()
    train_idx, test_idx = split_indices(len(corpus.studies), train.test_fraction)
    vocab = Vocab(t for s in corpus.studies for t in sentence_spans(list(s.report.sentences))[0])
    freq = label_frequencies([corpus.studies[i] for i in train_idx])
    train_ex = _prepare(corpus, train_idx, vocab, freq, cfg, policy)
    if not train_ex:
        raise MissingFrontal("no training study has a usable frontal view")
    dim = train_ex[0].hf.shape[1]

    rng = np.random.default_rng(seed)
    rp = init_params(int(rng.integers(2**31)), train.n_queries, dim, train.out_dim, InitScheme.SCALED_GAUSSIAN)
    dp = init_decoder(rng, len(vocab), train.hidden, train.out_dim)

    losses: list[float] = []
    snapshots: list[np.ndarray] = []
    steps = 0
    for epoch in range(train.epochs):
        order = rng.permutation(len(train_ex))
        for s in range(0, len(order), train.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            batch = _make_batch([train_ex[k] for k in order[s:s + train.batch_size]], loss_mode, cfg, uniform_weights)
            loss, _, gr, gd = loss_and_grads(rp, dp, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {steps}")
            for name, arr in rp.arrays().items():
                arr -= train.lr * gr[name]
            for name, arr in dp.arrays().items():
                arr -= train.lr * gd[name]
            losses.append(loss)
            steps += 1
            if keep_snapshots:
                snapshots.append(_flat(rp, dp))

    metrics = None
    samples: list[str] = []
    if evaluate_model:
        test_ex = _prepare(corpus, test_idx, vocab, freq, cfg, policy)
        metrics, samples = evaluate(rp, dp, vocab, test_ex)
    return TrainResult(rp, dp, vocab, losses, metrics, freq, samples[:5], snapshots)
