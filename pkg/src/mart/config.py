"""Experiment configuration: typed dataclasses with a flat INI file format.

Files round-trip losslessly (floats written with repr) and unknown sections
or keys are rejected, so a typo fails loudly instead of silently using a
default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "TaskSpec",
    "AblationFlags",
    "ExperimentConfig",
]


class ConfigError(ValueError):
    """Invalid, inconsistent, or unknown configuration."""


@dataclass
class ModelConfig:
    """Architecture settings.

    The use_* switches and pretrain_target are derived from ablation flags
    rather than written to config files directly.
    """

    n_variables: int
    d: int = 32
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    kvar_reduce: str = "mean"
    use_cls: bool = True
    use_mask_encoder: bool = True
    use_temporal_bias: bool = True
    kvar_observed_only: bool = True
    use_temporal_attention: bool = True
    use_variable_attention: bool = True
    pretrain_target: str = "latent"

    def __post_init__(self):
        if self.n_variables < 1:
            raise ConfigError(f"n_variables must be positive, got {self.n_variables}")
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"embedding width d must be a positive even number, got {self.d}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigError(f"layers must be positive, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kvar_reduce not in ("mean", "sum"):
            raise ConfigError(f"kvar_reduce must be mean or sum, got {self.kvar_reduce!r}")
        if self.pretrain_target not in ("latent", "values"):
            raise ConfigError(f"pretrain_target must be latent or values, got {self.pretrain_target!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


@dataclass
class TrainConfig:
    pretrain_epochs: int = 25
    finetune_epochs: int = 25
    unfreeze_epoch: int = 5
    removal_lo: float = 0.0
    removal_hi: float = 0.75
    ema_decay: float = 0.996
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 1
    normalize_pretrain_loss: bool = True

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.unfreeze_epoch < 0:
            raise ConfigError(f"unfreeze_epoch must be non-negative, got {self.unfreeze_epoch}")
        if not 0.0 <= self.removal_lo <= self.removal_hi < 1.0:
            raise ConfigError(
                f"removal interval must satisfy 0 <= lo <= hi < 1, got ({self.removal_lo}, {self.removal_hi})"
            )
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


_DEFAULT_OUTPUTS = {"binary": 1, "multilabel": 25, "multiclass": 10}


@dataclass
class TaskSpec:
    kind: str = "binary"
    n_outputs: int | None = None
    f1_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in _DEFAULT_OUTPUTS:
            raise ConfigError(f"task kind must be one of {sorted(_DEFAULT_OUTPUTS)}, got {self.kind!r}")
        if self.n_outputs is None:
            self.n_outputs = _DEFAULT_OUTPUTS[self.kind]
        if self.n_outputs < 1:
            raise ConfigError(f"n_outputs must be positive, got {self.n_outputs}")
        if self.kind == "binary" and self.n_outputs != 1:
            raise ConfigError("binary tasks have exactly one output")
        if self.kind == "multiclass" and self.n_outputs < 2:
            raise ConfigError("multiclass tasks need at least two classes")
        if not 0.0 <= self.f1_threshold <= 1.0:
            raise ConfigError(f"f1_threshold must be in [0, 1], got {self.f1_threshold}")


@dataclass
class AblationFlags:
    no_mask: bool = False
    no_mask_encoder: bool = False
    no_mask_temporal: bool = False
    no_mask_variable: bool = False
    no_temporal_attention: bool = False
    no_variable_attention: bool = False
    no_cls: bool = False
    no_pretrain: bool = False
    impute_input_space: bool = False

    def __post_init__(self):
        if self.no_temporal_attention and self.no_mask_temporal:
            raise ConfigError("no_mask_temporal is meaningless without temporal attention")
        if self.no_variable_attention and self.no_mask_variable:
            raise ConfigError("no_mask_variable is meaningless without variable attention")
        if self.no_pretrain and self.impute_input_space:
            raise ConfigError("impute_input_space changes the pretraining target, but no_pretrain skips it")

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def apply(self, model: ModelConfig) -> ModelConfig:
        return replace(
            model,
            use_mask_encoder=not (self.no_mask or self.no_mask_encoder),
            use_temporal_bias=not (self.no_mask or self.no_mask_temporal),
            kvar_observed_only=not (self.no_mask or self.no_mask_variable),
            use_temporal_attention=not self.no_temporal_attention,
            use_variable_attention=not self.no_variable_attention,
            use_cls=not self.no_cls,
            pretrain_target="values" if self.impute_input_space else "latent",
        )


_SECTIONS = {
    "model": (ModelConfig, {"n_variables": int, "d": int, "heads": int, "layers": int, "dropout": float, "kvar_reduce": str}),
    "train": (
        TrainConfig,
        {
            "pretrain_epochs": int,
            "finetune_epochs": int,
            "unfreeze_epoch": int,
            "removal_lo": float,
            "removal_hi": float,
            "ema_decay": float,
            "lr": float,
            "batch_size": int,
            "seed": int,
            "normalize_pretrain_loss": bool,
        },
    ),
    "task": (TaskSpec, {"kind": str, "n_outputs": int, "f1_threshold": float}),
    "ablation": (AblationFlags, {name: bool for name in (
        "no_mask",
        "no_mask_encoder",
        "no_mask_temporal",
        "no_mask_variable",
        "no_temporal_attention",
        "no_variable_attention",
        "no_cls",
        "no_pretrain",
        "impute_input_space",
    )}),
    "data": (None, {"data_dir": str}),
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, kind, where: str):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    """Everything one run needs: architecture, training, task, data, ablations."""

    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    data_dir: str = "."

    def model_with_ablations(self) -> ModelConfig:
        return self.ablation.apply(self.model)

    def to_file(self, path) -> None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for section, (_, spec) in _SECTIONS.items():
            if section == "data":
                values = {"data_dir": self.data_dir}
            else:
                obj = getattr(self, section)
                values = {name: getattr(obj, name) for name in spec}
            parser[section] = {name: _format_value(v) for name, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
        kwargs = {}
        for section, (factory, spec) in _SECTIONS.items():
            if not parser.has_section(section):
                if section == "model":
                    raise ConfigError(f"{path}: missing required section [model]")
                continue
            raw = dict(parser.items(section))
            unknown = set(raw) - set(spec)
            if unknown:
                raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
            parsed = {name: _parse_value(value, spec[name], f"{path} [{section}] {name}") for name, value in raw.items()}
            if section == "data":
                kwargs["data_dir"] = parsed.get("data_dir", ".")
            else:
                try:
                    kwargs[section] = factory(**parsed)
                except TypeError as exc:
                    raise ConfigError(f"{path} [{section}]: {exc}") from None
        return cls(**kwargs)
