"""Model assembly: parameter initialization, decoders, and forward paths.

A model owns named float64 parameter arrays. The backbone (encoder + blocks)
is shared by pretraining and fine-tuning; pretraining adds a small
reconstruction decoder, fine-tuning a label decoder on the summary
representation. The EMA teacher is a plain name -> array dict mirroring the
backbone; it is wrapped in frozen parameters on demand for its forward pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (
    AttnParams,
    FfParams,
    LinearParams,
    MartBlockParams,
    NormParams,
    mart_forward,
)
from .config import ModelConfig, TaskSpec
from .data import Batch, NormStats, stream_rng
from .encoder import EncoderParams, encode
from .tensor import Parameter, Tensor

__all__ = ["MartModel", "MlpDecoderParams", "LabelDecoderParams", "sigmoid", "softmax_rows"]

_STREAM_INIT = 0
_STREAM_LABEL_INIT = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class MlpDecoderParams:
    """Two-layer position-wise decoder (reconstruction head)."""

    def __init__(self, inner: LinearParams, outer: LinearParams):
        self.inner = inner
        self.outer = outer


class LabelDecoderParams:
    def __init__(self, norm_in: NormParams, hidden: LinearParams, norm_hidden: NormParams, out: LinearParams):
        self.norm_in = norm_in
        self.hidden = hidden
        self.norm_hidden = norm_hidden
        self.out = out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def _init_linear(arrays: dict, rng, prefix: str, d_in: int, d_out: int) -> None:
    arrays[f"{prefix}.weight"] = _glorot(rng, d_in, d_out, (d_in, d_out))
    arrays[f"{prefix}.bias"] = np.zeros(d_out)


def _init_norm(arrays: dict, prefix: str, d: int) -> None:
    arrays[f"{prefix}.gain"] = np.ones(d)
    arrays[f"{prefix}.bias"] = np.zeros(d)


def _init_attn(arrays: dict, rng, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "out"):
        _init_linear(arrays, rng, f"{prefix}.{name}", d, d)
    _init_norm(arrays, f"{prefix}.norm", d)


def init_backbone_arrays(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    channels = 2 if cfg.use_mask_encoder else 1
    arrays["encoder.weight"] = _glorot(rng, channels, cfg.d, (cfg.n_variables, channels, cfg.d))
    arrays["encoder.bias"] = np.zeros((cfg.n_variables, cfg.d))
    if cfg.use_cls:
        arrays["encoder.cls"] = rng.normal(0.0, 0.02, (cfg.n_variables, cfg.d))
    for i in range(cfg.layers):
        prefix = f"blocks.{i}"
        if cfg.use_temporal_attention:
            _init_attn(arrays, rng, f"{prefix}.temporal", cfg.d)
        if cfg.use_variable_attention:
            _init_attn(arrays, rng, f"{prefix}.variable", cfg.d)
        _init_linear(arrays, rng, f"{prefix}.ff.inner", cfg.d, 4 * cfg.d)
        _init_linear(arrays, rng, f"{prefix}.ff.outer", 4 * cfg.d, cfg.d)
        _init_norm(arrays, f"{prefix}.ff.norm", cfg.d)
    return arrays


def init_pretrain_decoder_arrays(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    if cfg.pretrain_target == "latent":
        _init_linear(arrays, rng, "embed_decoder.inner", cfg.d, cfg.d)
        _init_linear(arrays, rng, "embed_decoder.outer", cfg.d, cfg.d)
    else:
        _init_linear(arrays, rng, "value_decoder.inner", cfg.d, cfg.d)
        _init_linear(arrays, rng, "value_decoder.outer", cfg.d, 1)
    return arrays


def init_label_decoder_arrays(cfg: ModelConfig, task: TaskSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    flat = cfg.n_variables * cfg.d
    _init_norm(arrays, "label_decoder.norm_in", flat)
    _init_linear(arrays, rng, "label_decoder.hidden", flat, cfg.d)
    _init_norm(arrays, "label_decoder.norm_hidden", cfg.d)
    _init_linear(arrays, rng, "label_decoder.out", cfg.d, task.n_outputs)
    return arrays


class MartModel:
    def __init__(
        self,
        config: ModelConfig,
        arrays: dict[str, np.ndarray],
        task: TaskSpec | None = None,
        norm_stats: NormStats | None = None,
    ):
        self.config = config
        self.task = task
        self.norm_stats = norm_stats
        self.teacher: dict[str, np.ndarray] | None = None
        self.params: dict[str, Parameter] = {}
        remaining = dict(arrays)

        def take(name: str) -> Parameter:
            if name not in remaining:
                raise ValueError(f"model arrays are missing parameter {name!r}")
            p = Parameter(name, remaining.pop(name))
            self.params[name] = p
            return p

        self.encoder, self.blocks = _backbone_structs(config, take)
        self.embed_decoder: MlpDecoderParams | None = None
        self.value_decoder: MlpDecoderParams | None = None
        if config.pretrain_target == "latent":
            self.embed_decoder = MlpDecoderParams(
                inner=_take_linear(take, "embed_decoder.inner"),
                outer=_take_linear(take, "embed_decoder.outer"),
            )
        else:
            self.value_decoder = MlpDecoderParams(
                inner=_take_linear(take, "value_decoder.inner"),
                outer=_take_linear(take, "value_decoder.outer"),
            )
        self.label_decoder: LabelDecoderParams | None = None
        if any(name.startswith("label_decoder.") for name in remaining):
            if task is None:
                raise ValueError("label decoder arrays present but no task given")
            self.label_decoder = _take_label_decoder(take)
        if remaining:
            raise ValueError(f"unexpected parameter arrays: {sorted(remaining)}")

    # construction

    @classmethod
    def build(cls, config: ModelConfig, seed: int, task: TaskSpec | None = None) -> "MartModel":
        rng = stream_rng(seed, _STREAM_INIT)
        arrays = init_backbone_arrays(config, rng)
        arrays.update(init_pretrain_decoder_arrays(config, rng))
        return cls(config, arrays, task=task)

    def ensure_label_decoder(self, seed: int) -> None:
        """Build the task head if absent, from its own seed stream (so the
        result does not depend on when pretraining parameters were drawn)."""
        if self.label_decoder is not None:
            return
        if self.task is None:
            raise ValueError("cannot build a label decoder without a task")
        rng = stream_rng(seed, _STREAM_LABEL_INIT)
        arrays = init_label_decoder_arrays(self.config, self.task, rng)

        def take(name: str) -> Parameter:
            p = Parameter(name, arrays[name])
            self.params[name] = p
            return p

        self.label_decoder = _take_label_decoder(take)

    # parameter access

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("encoder.", "blocks."))]

    def backbone_params(self) -> dict[str, Parameter]:
        return {n: self.params[n] for n in self.backbone_names()}

    def pretrain_decoder_params(self) -> list[Parameter]:
        dec = self.embed_decoder if self.embed_decoder is not None else self.value_decoder
        out = []
        for lin in (dec.inner, dec.outer):
            out.extend([lin.weight, lin.bias])
        return out

    def label_decoder_params(self) -> list[Parameter]:
        if self.label_decoder is None:
            raise ValueError("label decoder not built")
        ld = self.label_decoder
        return [
            ld.norm_in.gain,
            ld.norm_in.bias,
            ld.hidden.weight,
            ld.hidden.bias,
            ld.norm_hidden.gain,
            ld.norm_hidden.bias,
            ld.out.weight,
            ld.out.bias,
        ]

    def set_backbone_trainable(self, flag: bool) -> None:
        for p in self.backbone_params().values():
            p.trainable = flag

    def init_teacher(self) -> None:
        self.teacher = {name: p.data.copy() for name, p in self.backbone_params().items()}

    # forward paths

    def representation(
        self,
        x: np.ndarray,
        m: np.ndarray,
        valid_len: np.ndarray | None = None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        arrays: dict[str, np.ndarray] | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Encode a batch and run the block stack; returns (s, m').

        ``arrays`` substitutes a frozen parameter set (the EMA teacher) for
        the student's weights.
        """
        if arrays is None:
            enc, blocks = self.encoder, self.blocks
        else:
            enc, blocks = _backbone_structs(self.config, lambda name: Parameter(name, arrays[name], trainable=False))
        h, m_prime = encode(x, m, enc, self.config)
        query_index = None
        if not self.config.use_cls:
            if valid_len is None:
                raise ValueError("models without CLS need valid lengths to locate the query step")
            query_index = np.asarray(valid_len, dtype=np.intp) - 1
        s = mart_forward(h, m_prime, blocks, self.config, training, rng, query_index)
        return s, m_prime

    def pooled(self, s: Tensor, valid_len: np.ndarray | None) -> Tensor:
        """Summary representation per record: the CLS row, or the last valid
        step when the model runs without CLS."""
        if self.config.use_cls:
            return s[:, 0]
        return T.select_time(s, np.asarray(valid_len, dtype=np.intp) - 1)

    def decode_embedding(self, s_sel: Tensor) -> Tensor:
        dec = self.embed_decoder
        return T.linear(T.gelu(T.linear(s_sel, dec.inner.weight, dec.inner.bias)), dec.outer.weight, dec.outer.bias)

    def decode_values(self, s_sel: Tensor) -> Tensor:
        dec = self.value_decoder
        return T.linear(T.gelu(T.linear(s_sel, dec.inner.weight, dec.inner.bias)), dec.outer.weight, dec.outer.bias)

    def decode_label(self, pooled: Tensor) -> Tensor:
        ld = self.label_decoder
        if ld is None:
            raise ValueError("label decoder not built")
        b = pooled.shape[0]
        flat = T.reshape(pooled, (b, self.config.n_variables * self.config.d))
        z = T.layer_norm(flat, ld.norm_in.gain, ld.norm_in.bias)
        z = T.gelu(T.linear(z, ld.hidden.weight, ld.hidden.bias))
        z = T.layer_norm(z, ld.norm_hidden.gain, ld.norm_hidden.bias)
        return T.linear(z, ld.out.weight, ld.out.bias)

    def predict_logits(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            s, _ = self.representation(batch.x, batch.m, batch.valid_len, training=False)
            logits = self.decode_label(self.pooled(s, batch.valid_len))
        return logits.data

    def predict_proba(self, batch: Batch) -> np.ndarray:
        """Probabilities: (B,) for binary, (B, K) rows for the rest."""
        return self.proba_from_logits(self.predict_logits(batch))

    def proba_from_logits(self, logits: np.ndarray) -> np.ndarray:
        if self.task is None:
            raise ValueError("model has no task")
        if self.task.kind == "binary":
            return sigmoid(logits[:, 0])
        if self.task.kind == "multilabel":
            return sigmoid(logits)
        return softmax_rows(logits)


def _take_linear(take, prefix: str) -> LinearParams:
    return LinearParams(weight=take(f"{prefix}.weight"), bias=take(f"{prefix}.bias"))


def _take_norm(take, prefix: str) -> NormParams:
    return NormParams(gain=take(f"{prefix}.gain"), bias=take(f"{prefix}.bias"))


def _take_attn(take, prefix: str) -> AttnParams:
    return AttnParams(
        q=_take_linear(take, f"{prefix}.q"),
        k=_take_linear(take, f"{prefix}.k"),
        v=_take_linear(take, f"{prefix}.v"),
        out=_take_linear(take, f"{prefix}.out"),
        norm=_take_norm(take, f"{prefix}.norm"),
    )


def _backbone_structs(cfg: ModelConfig, take) -> tuple[EncoderParams, list[MartBlockParams]]:
    encoder = EncoderParams(
        weight=take("encoder.weight"),
        bias=take("encoder.bias"),
        cls=take("encoder.cls") if cfg.use_cls else None,
    )
    blocks = []
    for i in range(cfg.layers):
        prefix = f"blocks.{i}"
        blocks.append(
            MartBlockParams(
                temporal=_take_attn(take, f"{prefix}.temporal") if cfg.use_temporal_attention else None,
                variable=_take_attn(take, f"{prefix}.variable") if cfg.use_variable_attention else None,
                ff=FfParams(
                    inner=_take_linear(take, f"{prefix}.ff.inner"),
                    outer=_take_linear(take, f"{prefix}.ff.outer"),
                    norm=_take_norm(take, f"{prefix}.ff.norm"),
                ),
            )
        )
    return encoder, blocks


def _take_label_decoder(take) -> LabelDecoderParams:
    return LabelDecoderParams(
        norm_in=_take_norm(take, "label_decoder.norm_in"),
        hidden=_take_linear(take, "label_decoder.hidden"),
        norm_hidden=_take_norm(take, "label_decoder.norm_hidden"),
        out=_take_linear(take, "label_decoder.out"),
    )
