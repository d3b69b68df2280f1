"""Input encoding: per-variable projection, CLS slot, positional encoding.

Each variable owns an independent affine map from its (value, observed)
pair to a d-vector, so series with different units never share encoder
weights. A learnable per-variable CLS vector is prepended at time position 0
and counts as observed everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Parameter, ShapeError, Tensor

__all__ = ["EncoderParams", "positional_encoding", "encode"]


@dataclass
class EncoderParams:
    weight: Parameter  # (N, C, d) with C = 2 (value, mask) or 1 (value only)
    bias: Parameter  # (N, d)
    cls: Parameter | None  # (N, d)


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table of shape (length, d); d must be even.

    Column 2i holds sin(pos / 10000^(2i/d)) and column 2i+1 the matching cos.
    """
    if d < 2 or d % 2 != 0:
        raise ShapeError(f"positional encoding needs an even width, got d={d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, even / d)
    table = np.empty((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def encode(x: np.ndarray, m: np.ndarray, params: EncoderParams, config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Embed a batch: (B, T, N) values and mask -> ((B, T', N, d), (B, T', N)).

    T' is T+1 when a CLS row is prepended, else T. The returned mask m' marks
    the CLS row fully observed. Positional encoding is added to every row,
    the CLS slot included (it sits at position 0).
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    if x.ndim != 3 or x.shape != m.shape:
        raise ShapeError(f"expected matching (B, T, N) arrays, got {x.shape} and {m.shape}")
    b, t, n = x.shape
    if n != config.n_variables:
        raise ShapeError(f"batch has {n} variables but the model expects {config.n_variables}")
    d = config.d

    if config.use_mask_encoder:
        channels = np.stack((x, m.astype(np.float64)), axis=-1)  # (B, T, N, 2)
    else:
        channels = x[..., None]
    xin = Tensor(channels)

    # one affine map per variable, batched over N
    per_var = T.reshape(T.transpose(xin, (2, 0, 1, 3)), (n, b * t, channels.shape[-1]))
    proj = T.matmul(per_var, params.weight)  # (N, B*T, d)
    h = T.transpose(T.reshape(proj, (n, b, t, d)), (1, 2, 0, 3))  # (B, T, N, d)
    h = T.add(h, params.bias)

    if config.use_cls:
        cls_row = T.broadcast_to(T.reshape(params.cls, (1, 1, n, d)), (b, 1, n, d))
        h = T.concat([cls_row, h], axis=1)
        m_prime = np.concatenate((np.ones((b, 1, n), dtype=bool), m), axis=1)
    else:
        m_prime = m

    pe = positional_encoding(h.shape[1], d)
    h = T.add(h, Tensor(pe[None, :, None, :]))
    return h, m_prime
