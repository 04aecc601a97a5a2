"""Frontal-guided cross-attention resampling.

Learnable query tokens attend over the frontal image tokens; the resulting
tokens then act as queries over the lateral tokens. Both token sets are
concatenated feature-wise and projected per token to the output width, so the
fused result always has ``n_queries`` rows no matter how many image tokens
came in.

Every function here works on arrays with arbitrary leading batch dimensions.
All math is float64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyContext, MissingFrontal, NumericalFailure, ShapeMismatch


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reduce broadcast leading dims
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


@dataclass
class _AttnCache:
    x: np.ndarray
    c: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray
    scale: float


def attention_forward(x, c, wq, wk, wv):
    """softmax((x wq)(c wk)^T / sqrt(p)) (c wv), p = projected width."""
    if c.shape[-2] == 0:
        raise EmptyContext("cross-attention needs at least one context row")
    q = x @ wq
    k = c @ wk
    v = c @ wv
    scale = 1.0 / math.sqrt(wq.shape[-1])
    a = softmax((q @ _t(k)) * scale)
    return a @ v, _AttnCache(x, c, wq, wk, wv, q, k, v, a, scale)


def attention_backward(dout, cache: _AttnCache):
    """Returns (dx, dc, dwq, dwk, dwv); weight grads summed over batch dims."""
    a = cache.a
    dv = _t(a) @ dout
    da = dout @ _t(cache.v)
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    ds = ds * cache.scale
    dq = ds @ cache.k
    dk = _t(ds) @ cache.q
    dwq = _sum_to(_t(cache.x) @ dq, cache.wq.shape)
    dwk = _sum_to(_t(cache.c) @ dk, cache.wk.shape)
    dwv = _sum_to(_t(cache.c) @ dv, cache.wv.shape)
    dx = dq @ _t(cache.wq)
    dc = dk @ _t(cache.wk) + dv @ _t(cache.wv)
    return dx, dc, dwq, dwk, dwv


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray


@dataclass
class ResamplerParams:
    queries: np.ndarray  # [n_queries, dim]
    frontal: AttentionParams
    lateral: AttentionParams  # same object as ``frontal`` when weights are shared
    proj: np.ndarray  # [2 * dim, out_dim]
    bias: np.ndarray  # [out_dim]

    def __post_init__(self):
        nq, dim = self.queries.shape
        if nq < 1:
            raise ShapeMismatch("need at least one query token")
        for name, attn in (("frontal", self.frontal), ("lateral", self.lateral)):
            for w in (attn.wq, attn.wk, attn.wv):
                if w.shape != (dim, dim):
                    raise ShapeMismatch(f"{name} projection has shape {w.shape}, expected {(dim, dim)}")
        if self.proj.shape != (2 * dim, self.bias.shape[0]):
            raise ShapeMismatch(f"proj shape {self.proj.shape} inconsistent with dim {dim}, bias {self.bias.shape}")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalFailure(name)

    @property
    def shared(self) -> bool:
        return self.lateral is self.frontal

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    @property
    def out_dim(self) -> int:
        return self.proj.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (lateral omitted when shared)."""
        out = {
            "queries": self.queries,
            "frontal.wq": self.frontal.wq,
            "frontal.wk": self.frontal.wk,
            "frontal.wv": self.frontal.wv,
        }
        if not self.shared:
            out.update({"lateral.wq": self.lateral.wq, "lateral.wk": self.lateral.wk, "lateral.wv": self.lateral.wv})
        out.update({"proj": self.proj, "bias": self.bias})
        return out

    def copy(self) -> "ResamplerParams":
        frontal = AttentionParams(self.frontal.wq.copy(), self.frontal.wk.copy(), self.frontal.wv.copy())
        lateral = frontal if self.shared else AttentionParams(
            self.lateral.wq.copy(), self.lateral.wk.copy(), self.lateral.wv.copy()
        )
        return ResamplerParams(self.queries.copy(), frontal, lateral, self.proj.copy(), self.bias.copy())

    def to_npz_dict(self) -> dict[str, np.ndarray]:
        d = dict(self.arrays())
        d["shared"] = np.array(self.shared)
        return d

    @classmethod
    def from_npz_dict(cls, d) -> "ResamplerParams":
        frontal = AttentionParams(np.array(d["frontal.wq"]), np.array(d["frontal.wk"]), np.array(d["frontal.wv"]))
        if bool(d["shared"]):
            lateral = frontal
        else:
            lateral = AttentionParams(np.array(d["lateral.wq"]), np.array(d["lateral.wk"]), np.array(d["lateral.wv"]))
        return cls(np.array(d["queries"]), frontal, lateral, np.array(d["proj"]), np.array(d["bias"]))


class InitScheme(enum.Enum):
    IDENTITY = "identity"
    SCALED_GAUSSIAN = "scaled_gaussian"


def init_params(
    seed: int,
    n_queries: int = 128,
    dim: int = 64,
    out_dim: int = 64,
    scheme: InitScheme = InitScheme.SCALED_GAUSSIAN,
    shared: bool = False,
) -> ResamplerParams:
    """Build resampler parameters deterministically from ``seed``.

    ``IDENTITY`` sets every attention projection to I, the queries to the
    rectangular identity ``eye(n_queries, dim)``, and the head to ``[I; I] / 2``
    so the fused output is the mean of frontal and lateral tokens. It needs
    ``dim == out_dim``.
    """
    if min(n_queries, dim, out_dim) < 1:
        raise ShapeMismatch("all dimensions must be >= 1")
    if scheme is InitScheme.IDENTITY:
        if dim != out_dim:
            raise ShapeMismatch(f"identity init needs dim == out_dim, got {dim} and {out_dim}")
        eye = np.eye(dim)
        frontal = AttentionParams(eye.copy(), eye.copy(), eye.copy())
        lateral = frontal if shared else AttentionParams(eye.copy(), eye.copy(), eye.copy())
        return ResamplerParams(
            np.eye(n_queries, dim), frontal, lateral, np.vstack([eye, eye]) / 2.0, np.zeros(out_dim)
        )
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(dim)

    def g(*shape):
        return rng.normal(0.0, std, size=shape)

    queries = g(n_queries, dim)
    frontal = AttentionParams(g(dim, dim), g(dim, dim), g(dim, dim))
    lateral = frontal if shared else AttentionParams(g(dim, dim), g(dim, dim), g(dim, dim))
    return ResamplerParams(queries, frontal, lateral, g(2 * dim, out_dim), np.zeros(out_dim))


def _check_tokens(m: np.ndarray, dim: int, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != dim:
        raise ShapeMismatch(f"{what} must be [..., rows, {dim}], got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalFailure(what)
    return m


def cross_attend(queries: np.ndarray, context: np.ndarray, attn: AttentionParams, return_weights: bool = False):
    dim = attn.wq.shape[0]
    queries = _check_tokens(queries, dim, "queries")
    context = _check_tokens(context, attn.wk.shape[0], "context")
    out, cache = attention_forward(queries, context, attn.wq, attn.wk, attn.wv)
    return (out, cache.a) if return_weights else out


@dataclass(frozen=True)
class FusedFeatures:
    z: np.ndarray  # [n_queries, out_dim]

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape


@dataclass
class FavrCache:
    frontal: _AttnCache
    lateral: _AttnCache | None
    tf: np.ndarray
    cat: np.ndarray
    mask: np.ndarray | None
    params: ResamplerParams


def favr_forward(hf: np.ndarray, hl: np.ndarray | None, params: ResamplerParams, lateral_mask: np.ndarray | None = None):
    """Fused features and backward cache.

    ``lateral_mask`` (shape = batch dims) zeroes the lateral branch per item,
    which is how a batch mixes studies with and without lateral views. A
    missing lateral branch contributes zero tokens to the concatenation.
    """
    if hf.shape[-2] == 0:
        raise MissingFrontal("no frontal tokens to resample")
    lead = hf.shape[:-2]
    q0 = np.broadcast_to(params.queries, lead + params.queries.shape)
    tf, cf = attention_forward(q0, hf, params.frontal.wq, params.frontal.wk, params.frontal.wv)
    cl = None
    mask = None
    if hl is not None and hl.shape[-2] > 0:
        tl, cl = attention_forward(tf, hl, params.lateral.wq, params.lateral.wk, params.lateral.wv)
        if lateral_mask is not None:
            mask = np.asarray(lateral_mask, dtype=np.float64)[..., None, None]
            tl = tl * mask
    else:
        tl = np.zeros_like(tf)
    cat = np.concatenate([tf, tl], axis=-1)
    z = cat @ params.proj + params.bias
    return z, FavrCache(cf, cl, tf, cat, mask, params)


def favr_backward(dz: np.ndarray, cache: FavrCache) -> dict[str, np.ndarray]:
    """Gradients for every entry of ``params.arrays()`` plus ``hf`` and ``hl``."""
    p = cache.params
    dim = p.dim
    grads: dict[str, np.ndarray] = {}
    grads["proj"] = _sum_to(_t(cache.cat) @ dz, p.proj.shape)
    grads["bias"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    dcat = dz @ p.proj.T
    dtf = dcat[..., :dim]
    dtl = dcat[..., dim:]
    if cache.lateral is not None:
        if cache.mask is not None:
            dtl = dtl * cache.mask
        dx, dhl, dwq, dwk, dwv = attention_backward(dtl, cache.lateral)
        dtf = dtf + dx
        grads["hl"] = dhl
        lat = (dwq, dwk, dwv)
    else:
        grads["hl"] = None
        lat = None
    dq0, dhf, dwq, dwk, dwv = attention_backward(dtf, cache.frontal)
    grads["queries"] = _sum_to(dq0, p.queries.shape)
    grads["hf"] = dhf
    if p.shared:
        if lat is not None:
            dwq, dwk, dwv = dwq + lat[0], dwk + lat[1], dwv + lat[2]
    else:
        zeros = np.zeros_like(p.lateral.wq)
        lq, lk, lv = lat if lat is not None else (zeros, zeros, zeros)
        grads["lateral.wq"], grads["lateral.wk"], grads["lateral.wv"] = lq, lk, lv
    grads["frontal.wq"], grads["frontal.wk"], grads["frontal.wv"] = dwq, dwk, dwv
    return grads


def favr_fuse(hf: np.ndarray, hl: np.ndarray | None, params: ResamplerParams) -> FusedFeatures:
    """Resample frontal tokens with the learned queries, let the result guide
    lateral resampling, and project the feature-wise concatenation."""
    hf = _check_tokens(hf, params.dim, "frontal tokens")
    if hf.ndim != 2:
        raise ShapeMismatch("favr_fuse takes one study; use favr_forward for batches")
    if hl is not None:
        hl = _check_tokens(hl, params.dim, "lateral tokens")
    z, _ = favr_forward(hf, hl, params)
    return FusedFeatures(z)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


class GradOp(enum.Enum):
    CROSS_ATTEND = "cross_attend"
    FAVR_FUSE = "favr_fuse"


@dataclass
class GradReport:
    op: GradOp
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-8)
    return float(np.linalg.norm(a - n)) / denom


def _probe(out: np.ndarray) -> float:
    return float(np.sum(out * out))


def grad_check(
    op: GradOp,
    params: ResamplerParams,
    inputs: dict[str, np.ndarray | None],
    eps: float = 1e-4,
    tol: float = 1e-4,
    grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradReport:
    """Compare analytic gradients of ``sum(output**2)`` with central differences.

    ``CROSS_ATTEND`` uses ``params.frontal`` with ``inputs["queries"]`` and
    ``inputs["context"]``. ``FAVR_FUSE`` uses the whole parameter set with
    ``inputs["hf"]`` and optional ``inputs["hl"]``. The reported error per
    array is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    ``grad_hook`` may edit the analytic gradients in place before comparison.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    for k, v in inputs.items():
        if v is not None and not np.all(np.isfinite(v)):
            raise NumericalFailure(f"input {k}")

    if op is GradOp.CROSS_ATTEND:
        variables = {
            "wq": params.frontal.wq.copy(),
            "wk": params.frontal.wk.copy(),
            "wv": params.frontal.wv.copy(),
            "queries": np.array(inputs["queries"], dtype=np.float64),
            "context": np.array(inputs["context"], dtype=np.float64),
        }

        def forward(v):
            out, cache = attention_forward(v["queries"], v["context"], v["wq"], v["wk"], v["wv"])
            return out, cache

        def analytic(v):
            out, cache = forward(v)
            dx, dc, dwq, dwk, dwv = attention_backward(2.0 * out, cache)
            return {"wq": dwq, "wk": dwk, "wv": dwv, "queries": dx, "context": dc}

        def loss(v):
            return _probe(forward(v)[0])

    else:
        base = params.copy()
        variables = {k: a.copy() for k, a in base.arrays().items()}
        variables["hf"] = np.array(inputs["hf"], dtype=np.float64)
        hl = inputs.get("hl")
        if hl is not None and len(hl):
            variables["hl"] = np.array(hl, dtype=np.float64)

        def rebuild(v):
            frontal = AttentionParams(v["frontal.wq"], v["frontal.wk"], v["frontal.wv"])
            lateral = frontal if base.shared else AttentionParams(v["lateral.wq"], v["lateral.wk"], v["lateral.wv"])
            return ResamplerParams(v["queries"], frontal, lateral, v["proj"], v["bias"])

        def analytic(v):
            z, cache = favr_forward(v["hf"], v.get("hl"), rebuild(v))
            g = favr_backward(2.0 * z, cache)
            return {k: g[k] for k in v}

        def loss(v):
            return _probe(favr_forward(v["hf"], v.get("hl"), rebuild(v))[0])

    grads = analytic(variables)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"analytic gradient of {name}")
    if grad_hook is not None:
        grad_hook(grads)

    report = GradReport(op, eps, tol)
    for name, arr in variables.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(variables)
            flat[i] = orig - eps
            down = loss(variables)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NumericalFailure(f"numeric gradient of {name}")
        report.errors[name] = _rel_error(grads[name], numeric)
    return report


def toy_grad_inputs(seed: int, n_queries: int = 2, dim: int = 3, out_dim: int = 2, n_frontal: int = 3, n_lateral: int = 2):
    """Random gaussian parameters and token inputs for a quick gradient check."""
    params = init_params(seed, n_queries, dim, out_dim, InitScheme.SCALED_GAUSSIAN)
    rng = np.random.default_rng(seed + 10_000)
    params.bias[:] = rng.normal(size=out_dim)
    inputs = {
        "hf": rng.normal(size=(n_frontal, dim)),
        "hl": rng.normal(size=(n_lateral, dim)) if n_lateral else None,
        "queries": rng.normal(size=(n_queries, dim)),
        "context": rng.normal(size=(n_frontal, dim)),
    }
    return params, inputs
