"""The two-stage attention block: temporal attention with an observation
bias, variable attention driven by the CLS summary, and a feed-forward tail.
Each sublayer is residual with post-layer-norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "LinearParams",
    "NormParams",
    "AttnParams",
    "FfParams",
    "MartBlockParams",
    "build_bias",
    "temporal_attention",
    "variable_attention",
    "observed_mean",
    "feed_forward",
    "mart_forward",
]


@dataclass
class LinearParams:
    weight: Parameter
    bias: Parameter


@dataclass
class NormParams:
    gain: Parameter
    bias: Parameter


@dataclass
class AttnParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    norm: NormParams


@dataclass
class FfParams:
    inner: LinearParams
    outer: LinearParams
    norm: NormParams


@dataclass
class MartBlockParams:
    temporal: AttnParams | None
    variable: AttnParams | None
    ff: FfParams


def build_bias(m_prime: np.ndarray) -> np.ndarray:
    """Additive attention bias from the observation mask.

    For each variable, entry (i, j) counts how many of positions i and j are
    observed: 2 when both, 1 when one, 0 when neither. Shape (T', T', N) for
    a (T', N) mask, with a leading batch axis when the input has one.
    """
    m_prime = np.asarray(m_prime, dtype=bool)
    if m_prime.ndim not in (2, 3):
        raise ShapeError(f"mask must be (T', N) or (B, T', N), got {m_prime.shape}")
    mf = m_prime.astype(np.float64)
    if mf.ndim == 2:
        return mf[:, None, :] + mf[None, :, :]
    return mf[:, :, None, :] + mf[:, None, :, :]


def _heads_split(x: Tensor, b: int, t: int, n: int, heads: int, d_head: int) -> Tensor:
    # (B, T, N, d) -> (B, N, H, T, d_head)
    return T.transpose(T.reshape(x, (b, t, n, heads, d_head)), (0, 2, 3, 1, 4))


def _heads_merge(x: Tensor, b: int, t: int, n: int, d: int) -> Tensor:
    # (B, N, H, T, d_head) -> (B, T, N, d)
    return T.reshape(T.transpose(x, (0, 3, 1, 2, 4)), (b, t, n, d))


def _residual_norm(x: Tensor, sub: Tensor, norm: NormParams, cfg: ModelConfig, training: bool, rng) -> Tensor:
    sub = T.dropout(sub, cfg.dropout, training, rng)
    return T.layer_norm(T.add(x, sub), norm.gain, norm.bias)


def temporal_attention(
    h: Tensor,
    bias: np.ndarray | None,
    params: AttnParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-variable attention over time with the observation bias added to
    the logits. ``bias`` is (B, N, 1, T', T'), broadcast across heads."""
    b, t, n, d = h.shape
    heads, d_head = cfg.heads, cfg.d_head
    q = _heads_split(T.linear(h, params.q.weight, params.q.bias), b, t, n, heads, d_head)
    k = _heads_split(T.linear(h, params.k.weight, params.k.bias), b, t, n, heads, d_head)
    v = _heads_split(T.linear(h, params.v.weight, params.v.bias), b, t, n, heads, d_head)
    scores = T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3)))  # (B, N, H, T', T')
    probs = T.softmax(scores, axis=-1, scale=1.0 / math.sqrt(d_head), bias=bias)
    ctx = _heads_merge(T.matmul(probs, v), b, t, n, d)
    out = T.linear(ctx, params.out.weight, params.out.bias)
    return _residual_norm(h, out, params.norm, cfg, training, rng)


def observed_mean(h: Tensor, m_prime: np.ndarray, reduce: str = "mean") -> Tensor:
    """Pool each variable's embeddings over its observed steps: (B, T', N, d)
    -> (B, N, d). Unobserved steps contribute nothing; a variable with no
    observed step pools to zero."""
    mf = m_prime.astype(np.float64)[..., None]  # (B, T', N, 1)
    pooled = T.tsum(T.mul(h, Tensor(mf)), axis=1)  # (B, N, d)
    if reduce == "sum":
        return pooled
    counts = np.maximum(mf.sum(axis=1), 1.0)  # (B, N, 1)
    return T.mul(pooled, Tensor(1.0 / counts))


def variable_attention(
    h: Tensor,
    m_prime: np.ndarray,
    params: AttnParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    query_index: np.ndarray | None = None,
) -> Tensor:
    """Attention across variables with one time-invariant N x N map.

    Queries come from the CLS position (or from ``query_index`` per record
    when the model runs without CLS); keys from each variable's pooled
    observed embedding; the same weights are applied at every time step.
    """
    b, t, n, d = h.shape
    heads, d_head = cfg.heads, cfg.d_head
    if cfg.use_cls:
        h_query = h[:, 0]  # (B, N, d)
    else:
        if query_index is None:
            raise ValueError("variable attention without CLS needs a per-record query index")
        h_query = T.select_time(h, query_index)
    if cfg.kvar_observed_only:
        h_key = observed_mean(h, m_prime, reduce=cfg.kvar_reduce)
    elif cfg.kvar_reduce == "sum":
        h_key = T.tsum(h, axis=1)
    else:
        h_key = T.tmean(h, axis=1)

    def to_heads(x2d: Tensor) -> Tensor:
        # (B, N, d) -> (B, H, N, d_head)
        return T.transpose(T.reshape(x2d, (b, n, heads, d_head)), (0, 2, 1, 3))

    q = to_heads(T.linear(h_query, params.q.weight, params.q.bias))
    k = to_heads(T.linear(h_key, params.k.weight, params.k.bias))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))  # (B, H, N, N)
    probs = T.softmax(scores, axis=-1, scale=1.0 / math.sqrt(d_head))

    v = T.linear(h, params.v.weight, params.v.bias)  # (B, T', N, d)
    # Fold time into the value columns: one (N, N) @ (N, T'*d_head) product
    # per record and head, rather than T' tiny ones broadcast over time.
    v = T.reshape(
        T.transpose(T.reshape(v, (b, t, n, heads, d_head)), (0, 3, 2, 1, 4)),
        (b, heads, n, t * d_head),
    )
    ctx = T.matmul(probs, v)  # (B, H, N, T'*d_head)
    ctx = T.transpose(T.reshape(ctx, (b, heads, n, t, d_head)), (0, 3, 2, 1, 4))
    ctx = T.reshape(ctx, (b, t, n, d))
    out = T.linear(ctx, params.out.weight, params.out.bias)
    return _residual_norm(h, out, params.norm, cfg, training, rng)


def feed_forward(
    h: Tensor,
    params: FfParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    inner = T.gelu(T.linear(h, params.inner.weight, params.inner.bias))
    inner = T.dropout(inner, cfg.dropout, training, rng)
    out = T.linear(inner, params.outer.weight, params.outer.bias)
    return _residual_norm(h, out, params.norm, cfg, training, rng)


def mart_forward(
    h: Tensor,
    m_prime: np.ndarray,
    blocks: list[MartBlockParams],
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    query_index: np.ndarray | None = None,
) -> Tensor:
    """Run the block stack. The observation bias is built once and shared by
    every layer (it depends only on the mask)."""
    bias = None
    if cfg.use_temporal_attention and cfg.use_temporal_bias:
        mf = m_prime.astype(np.float64).transpose(0, 2, 1)  # (B, N, T')
        bias = mf[:, :, None, :, None] + mf[:, :, None, None, :]  # (B, N, 1, T', T')
    for block in blocks:
        if block.temporal is not None:
            h = temporal_attention(h, bias, block.temporal, cfg, training, rng)
        if block.variable is not None:
            h = variable_attention(h, m_prime, block.variable, cfg, training, rng, query_index)
        h = feed_forward(h, block.ff, cfg, training, rng)
    return h
