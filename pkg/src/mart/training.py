"""Training loops, the EMA teacher, evaluation, and checkpoint I/O.

Pretraining: per record and epoch a removal plan blanks a random fraction of
observed cells; the student reconstructs, at those cells, the embeddings the
EMA teacher computes from the intact record (or the raw values, in
input-space mode). Fine-tuning trains a label decoder on the summary
representation, with the backbone frozen for the first epochs.

All randomness is drawn from seed streams keyed by (seed, purpose, ...), so
runs are bitwise reproducible and resuming from a checkpoint matches an
unbroken run exactly.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, TaskSpec, TrainConfig
from .data import Batch, EhrRecord, NormStats, apply_mask_plan, sample_mask_plan, stream_rng
from .metrics import MetricsReport, compute_report
from .model import MartModel
from .optim import Adam
from .tensor import Parameter, Tensor

__all__ = [
    "NumericError",
    "ema_update",
    "pretrain_loss",
    "pretrain",
    "finetune",
    "predict",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

_STREAM_MASKPLAN = 2
_STREAM_ORDER = 3
_STREAM_DROPOUT = 4
_STAGE_PRETRAIN = 0
_STAGE_FINETUNE = 1


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, Parameter], decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, in place."""
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter trees differ")
    for name, arr in teacher.items():
        arr *= decay
        arr += (1.0 - decay) * student[name].data


def _pretrain_batch(records, indices, use_cls: bool, p_interval, seed: int, epoch: int):
    """Assemble one padded batch plus its removal masks.

    Removal plans are keyed by (seed, absolute record index, epoch), so they
    are independent of batching and re-drawn every epoch.
    """
    recs = [records[int(i)] for i in indices]
    b = len(recs)
    n = recs[0].n_variables
    t_max = max(r.length for r in recs)
    offset = 1 if use_cls else 0
    x = np.zeros((b, t_max, n))
    m = np.zeros((b, t_max, n), dtype=bool)
    x_star = np.zeros((b, t_max, n))
    m_star = np.zeros((b, t_max, n), dtype=bool)
    m_hat = np.zeros((b, t_max + offset, n), dtype=bool)
    valid = np.empty(b, dtype=np.intp)
    for j, (i, r) in enumerate(zip(indices, recs)):
        rng = stream_rng(seed, _STREAM_MASKPLAN, int(i), epoch)
        if use_cls:
            m_prime = np.concatenate((np.ones((1, n), dtype=bool), r.m), axis=0)
        else:
            m_prime = r.m
        plan = sample_mask_plan(m_prime, p_interval, rng, protected_rows=offset)
        xs, ms = apply_mask_plan(r.x, r.m, plan)
        t = r.length
        x[j, :t] = r.x
        m[j, :t] = r.m
        x_star[j, :t] = xs
        m_star[j, :t] = ms
        m_hat[j, : t + offset] = plan.m_hat
        valid[j] = t
    return x, m, x_star, m_star, m_hat, valid


def pretrain_loss(
    model: MartModel,
    x: np.ndarray,
    m: np.ndarray,
    x_star: np.ndarray,
    m_star: np.ndarray,
    m_hat: np.ndarray,
    valid_len: np.ndarray,
    *,
    training: bool = True,
    rng: np.random.Generator | None = None,
    normalize: bool = True,
) -> tuple[Tensor, int]:
    """Masked L1 reconstruction loss; returns (loss, removed cell count).

    An empty removal mask yields exactly zero loss and builds no graph.
    Values at unobserved cells are forced to zero before either forward pass,
    so stray payloads there cannot influence the loss.
    """
    removed = int(m_hat.sum())
    if removed == 0:
        return Tensor(0.0), 0
    x_in = np.where(m, x, 0.0)
    xs_in = np.where(m_star, x_star, 0.0)
    offset = 1 if model.config.use_cls else 0
    if np.any(m_hat[:, offset:] & ~m):
        raise ValueError("removal mask selects cells that were never observed")
    s, _ = model.representation(xs_in, m_star, valid_len, training=training, rng=rng)
    s_sel = s[m_hat]  # (removed, d)
    if model.config.pretrain_target == "latent":
        with T.no_grad():
            s_hat, _ = model.representation(x_in, m, valid_len, training=False, arrays=model.teacher)
        target = s_hat.data[m_hat]
        pred = model.decode_embedding(s_sel)
        width = model.config.d
    else:
        target = x_in[m_hat[:, offset:]][:, None]
        pred = model.decode_values(s_sel)
        width = 1
    loss = T.tsum(T.tabs(pred - Tensor(target)))
    if normalize:
        loss = T.mul(loss, 1.0 / (removed * width))
    return loss, removed


def pretrain(
    model: MartModel,
    records: list[EhrRecord],
    cfg: TrainConfig,
    *,
    start_epoch: int = 0,
    optimizer: Adam | None = None,
    log_cb=None,
) -> tuple[list[dict], Adam]:
    """Run the self-supervised stage; returns (history, optimizer).

    The EMA teacher advances once per optimizer step. Batches whose removal
    plans came up empty are skipped outright: no step, no teacher update.
    """
    if not records:
        raise ValueError("no training records")
    if model.config.pretrain_target == "latent" and model.teacher is None:
        model.init_teacher()
    params = list(model.backbone_params().values()) + model.pretrain_decoder_params()
    if optimizer is None:
        optimizer = Adam(params, lr=cfg.lr)
    n = len(records)
    history = []
    for epoch in range(start_epoch, cfg.pretrain_epochs):
        t0 = time.perf_counter()
        order = stream_rng(cfg.seed, _STREAM_ORDER, _STAGE_PRETRAIN, epoch).permutation(n)
        drop_rng = stream_rng(cfg.seed, _STREAM_DROPOUT, _STAGE_PRETRAIN, epoch)
        num = 0.0
        den = 0
        for lo in range(0, n, cfg.batch_size):
            idxs = order[lo : lo + cfg.batch_size]
            x, m, x_star, m_star, m_hat, valid = _pretrain_batch(
                records, idxs, model.config.use_cls, (cfg.removal_lo, cfg.removal_hi), cfg.seed, epoch
            )
            if not m_hat.any():
                continue
            loss, removed = pretrain_loss(
                model, x, m, x_star, m_star, m_hat, valid,
                training=True, rng=drop_rng, normalize=cfg.normalize_pretrain_loss,
            )
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"pretrain loss became non-finite at epoch {epoch}")
            T.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            if model.teacher is not None:
                ema_update(model.teacher, model.backbone_params(), cfg.ema_decay)
            width = model.config.d if model.config.pretrain_target == "latent" else 1
            if cfg.normalize_pretrain_loss:
                num += value * removed * width
                den += removed * width
            else:
                num += value
                den = 1
        epoch_loss = num / den if den else 0.0
        row = {
            "stage": "pretrain",
            "epoch": epoch,
            "loss": epoch_loss,
            "val_metric": None,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(row)
        if log_cb is not None:
            log_cb(row)
    return history, optimizer


def _loss_from_logits(model: MartModel, logits: Tensor, y: np.ndarray) -> Tensor:
    kind = model.task.kind
    if kind == "binary":
        return T.bce_with_logits(logits, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    if kind == "multilabel":
        return T.bce_with_logits(logits, np.asarray(y, dtype=np.float64))
    return T.softmax_cross_entropy(logits, np.asarray(y, dtype=np.intp))


def _supervised_loss(model: MartModel, batch: Batch, *, training: bool, rng) -> Tensor:
    if batch.y is None:
        raise ValueError("fine-tuning requires labeled records")
    s, _ = model.representation(batch.x, batch.m, batch.valid_len, training=training, rng=rng)
    logits = model.decode_label(model.pooled(s, batch.valid_len))
    return _loss_from_logits(model, logits, batch.y)


def _labels_for(model: MartModel, records: list[EhrRecord]) -> np.ndarray:
    if model.task.kind == "multilabel":
        return np.stack([np.asarray(r.y) for r in records])
    return np.array([int(r.y) for r in records])


def _pooled_features(model: MartModel, records: list[EhrRecord], batch_size: int) -> np.ndarray:
    """Summary representations for every record, backbone in eval mode."""
    out = []
    with T.no_grad():
        for lo in range(0, len(records), batch_size):
            batch = Batch.from_records(records[lo : lo + batch_size])
            s, _ = model.representation(batch.x, batch.m, batch.valid_len, training=False)
            out.append(model.pooled(s, batch.valid_len).data)
    return np.concatenate(out, axis=0)


def _snapshot(params: list[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def _restore(params: list[Parameter], snap: dict[str, np.ndarray]) -> None:
    for p in params:
        p.data = snap[p.name].copy()


def finetune(
    model: MartModel,
    train_records: list[EhrRecord],
    val_records: list[EhrRecord],
    cfg: TrainConfig,
    *,
    log_cb=None,
) -> list[dict]:
    """Supervised stage. Until ``unfreeze_epoch`` the backbone is frozen and
    runs in eval mode, so its summary features are computed once and the head
    trains against that cache; at the switch the optimizer restarts with the
    full parameter set and training continues through the whole network.
    Keeps the epoch with the best validation metric (AUPRC for binary tasks,
    ma-ROC otherwise). When no epoch produces a usable metric (no validation
    records, or a degenerate split) the final epoch stands; with zero epochs
    the initialization is returned untouched.
    """
    if model.task is None:
        raise ValueError("model has no task to fine-tune on")
    if not train_records:
        raise ValueError("no training records")
    model.ensure_label_decoder(cfg.seed)
    decoder_params = model.label_decoder_params()
    backbone_params = list(model.backbone_params().values())
    tracked = backbone_params + decoder_params

    frozen = cfg.unfreeze_epoch > 0
    model.set_backbone_trainable(not frozen)
    optimizer = Adam(decoder_params if frozen else tracked, lr=cfg.lr)

    n = len(train_records)
    train_pooled = None
    val_pooled = None
    if frozen and cfg.finetune_epochs > 0:
        train_pooled = _pooled_features(model, train_records, cfg.batch_size)
        if val_records:
            val_pooled = _pooled_features(model, val_records, cfg.batch_size)
    if any(r.y is None for r in train_records):
        raise ValueError("fine-tuning requires labeled records")
    labels = _labels_for(model, train_records)

    best_metric = -math.inf
    best_state = None
    history = []
    for epoch in range(cfg.finetune_epochs):
        if frozen and epoch >= cfg.unfreeze_epoch:
            frozen = False
            train_pooled = None
            val_pooled = None
            model.set_backbone_trainable(True)
            optimizer = Adam(tracked, lr=cfg.lr)
        t0 = time.perf_counter()
        order = stream_rng(cfg.seed, _STREAM_ORDER, _STAGE_FINETUNE, epoch).permutation(n)
        drop_rng = stream_rng(cfg.seed, _STREAM_DROPOUT, _STAGE_FINETUNE, epoch)
        total = 0.0
        seen = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if frozen:
                logits = model.decode_label(Tensor(train_pooled[idx]))
                loss = _loss_from_logits(model, logits, labels[idx])
            else:
                batch = Batch.from_records([train_records[int(i)] for i in idx])
                loss = _supervised_loss(model, batch, training=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"finetune loss became non-finite at epoch {epoch}")
            T.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            total += value * len(idx)
            seen += len(idx)
        val_metric = _validation_metric(model, val_records, cfg.batch_size, pooled=val_pooled)
        improved = math.isfinite(val_metric) and val_metric > best_metric
        if improved:
            best_metric = val_metric
            best_state = _snapshot(tracked)
        row = {
            "stage": "finetune",
            "epoch": epoch,
            "loss": total / seen,
            "val_metric": val_metric if math.isfinite(val_metric) else None,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(row)
        if log_cb is not None:
            log_cb(row)
    if best_state is not None:
        # without a usable validation metric there is nothing to select, so
        # the parameters stay at the final epoch
        _restore(tracked, best_state)
    model.set_backbone_trainable(True)
    return history


def _validation_metric(model: MartModel, val_records: list[EhrRecord], batch_size: int,
                       pooled: np.ndarray | None = None) -> float:
    if not val_records:
        return math.nan
    try:
        if pooled is not None:
            with T.no_grad():
                logits = model.decode_label(Tensor(pooled)).data
            scores = model.proba_from_logits(logits)
            report = compute_report(scores, _labels_for(model, val_records), model.task.kind,
                                    f1_threshold=model.task.f1_threshold)
        else:
            report = evaluate(model, val_records, batch_size=batch_size)
    except ValueError:
        return math.nan  # degenerate split: no epoch can claim an improvement
    return report.auprc if model.task.kind == "binary" else report.ma_roc


def predict(model: MartModel, records: list[EhrRecord], batch_size: int = 256) -> np.ndarray:
    """Scores for each record: (n,) for binary, (n, K) otherwise."""
    chunks = []
    for lo in range(0, len(records), batch_size):
        chunks.append(model.predict_proba(Batch.from_records(records[lo : lo + batch_size])))
    return np.concatenate(chunks, axis=0)


def evaluate(model: MartModel, records: list[EhrRecord], *, batch_size: int = 256) -> MetricsReport:
    if model.task is None:
        raise ValueError("model has no task to evaluate")
    if any(r.y is None for r in records):
        raise ValueError("evaluation requires labeled records")
    scores = predict(model, records, batch_size=batch_size)
    return compute_report(scores, _labels_for(model, records), model.task.kind,
                          f1_threshold=model.task.f1_threshold)


# checkpoints

_MAGIC = b"MARTCKPT"
_VERSION = 1


@dataclass
class Checkpoint:
    model: MartModel
    stage: str
    epoch: int | None
    train: TrainConfig | None
    optimizer_state: dict | None


def save_checkpoint(
    path,
    model: MartModel,
    *,
    stage: str,
    train_cfg: TrainConfig | None = None,
    epoch: int | None = None,
    optimizer: Adam | None = None,
) -> None:
    """One self-describing file: JSON header plus raw little-endian float64
    payloads for parameters, teacher, and optimizer moments. The write goes
    through a temp file and an atomic rename."""
    path = str(path)
    header: dict = {
        "format": "mart-checkpoint",
        "version": _VERSION,
        "stage": stage,
        "epoch": epoch,
        "model": asdict(model.config),
        "task": asdict(model.task) if model.task is not None else None,
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()],
        "teacher": [{"name": n, "shape": list(a.shape)} for n, a in model.teacher.items()]
        if model.teacher is not None
        else None,
    }
    buffers = [p.data for p in model.params.values()]
    if model.teacher is not None:
        buffers.extend(model.teacher.values())
    if optimizer is not None:
        state = optimizer.state_dict()
        entries = []
        for name in sorted(state["state"]):
            s = state["state"][name]
            entries.append({"name": name, "t": s["t"], "shape": list(s["m"].shape)})
            buffers.extend([s["m"], s["v"]])
        header["optimizer"] = {"lr": state["lr"], "betas": state["betas"], "eps": state["eps"], "entries": entries}
    else:
        header["optimizer"] = None

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in buffers:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != _VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        payload = fh.read()

    def cut(shapes: list[tuple], start: int) -> tuple[list[np.ndarray], int]:
        arrays = []
        pos = start
        for shape in shapes:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            chunk = payload[pos : pos + nbytes]
            if len(chunk) != nbytes:
                raise ValueError("checkpoint payload is truncated")
            arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
            pos += nbytes
        return arrays, pos

    cfg = ModelConfig(**header["model"])
    task = TaskSpec(**header["task"]) if header["task"] is not None else None
    train_cfg = TrainConfig(**header["train"]) if header["train"] is not None else None
    norm_stats = NormStats.from_dict(header["norm_stats"]) if header["norm_stats"] is not None else None

    param_shapes = [tuple(e["shape"]) for e in header["params"]]
    arrays, pos = cut(param_shapes, 0)
    named = {e["name"]: a for e, a in zip(header["params"], arrays)}
    model = MartModel(cfg, named, task=task, norm_stats=norm_stats)
    if header["teacher"] is not None:
        teacher_shapes = [tuple(e["shape"]) for e in header["teacher"]]
        teacher_arrays, pos = cut(teacher_shapes, pos)
        model.teacher = {e["name"]: a for e, a in zip(header["teacher"], teacher_arrays)}
    optimizer_state = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        state = {}
        for entry in opt["entries"]:
            (mv, pos_next) = cut([tuple(entry["shape"]), tuple(entry["shape"])], pos)
            pos = pos_next
            state[entry["name"]] = {"m": mv[0], "v": mv[1], "t": entry["t"]}
        optimizer_state = {"lr": opt["lr"], "betas": opt["betas"], "eps": opt["eps"], "state": state}
    if pos != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    return Checkpoint(
        model=model,
        stage=header["stage"],
        epoch=header["epoch"],
        train=train_cfg,
        optimizer_state=optimizer_state,
    )
