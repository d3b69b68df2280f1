"""Data model, CSV I/O, normalization, synthetic cohorts, and removal masks.

A record is an hourly grid: x[t, n] holds the observed value of variable n at
hour t and is exactly 0 wherever the mask m[t, n] is false. Batches pad
records to a common length with unobserved rows, which downstream code treats
identically to missing data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError

__all__ = [
    "EhrRecord",
    "Batch",
    "CsvSchema",
    "load_csv",
    "load_labels",
    "attach_labels",
    "NormStats",
    "zscore_fit",
    "zscore_apply",
    "zscore_fit_apply",
    "SyntheticSpec",
    "SyntheticDataset",
    "generate_synthetic",
    "write_dataset",
    "load_dataset",
    "MaskPlan",
    "sample_mask_plan",
    "apply_mask_plan",
    "subsample_observed",
    "native_observed_rate",
]

log = logging.getLogger(__name__)

# seed-stream tags; every stochastic consumer derives its generator from
# SeedSequence([seed, tag, ...]) so streams never collide
_STREAM_COHORT = 10
_STREAM_PATIENT = 11
_STREAM_MASK = 12
_STREAM_SPLIT = 13
_STREAM_SUBSAMPLE = 14


def stream_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of non-negative integer keys."""
    for k in keys:
        if k < 0:
            raise ValueError(f"seed-stream keys must be non-negative, got {keys}")
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


@dataclass
class EhrRecord:
    """One stay: values x (T, N), observation mask m (T, N), optional label."""

    patient_id: str
    x: np.ndarray
    m: np.ndarray
    y: int | np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=bool)
        if self.x.ndim != 2 or self.x.shape != self.m.shape:
            raise ShapeError(f"x {self.x.shape} and m {self.m.shape} must be matching (T, N) arrays")
        if self.x.shape[0] < 1:
            raise ValueError(f"record {self.patient_id}: T must be at least 1")
        if np.any(self.x[~self.m] != 0.0):
            raise ValueError(f"record {self.patient_id}: x must be 0 at unobserved cells")

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def n_variables(self) -> int:
        return self.x.shape[1]


@dataclass
class Batch:
    """Records padded to a common length; padded rows are unobserved."""

    x: np.ndarray  # (B, T, N)
    m: np.ndarray  # (B, T, N) bool
    valid_len: np.ndarray  # (B,)
    patient_ids: list[str]
    y: np.ndarray | None = None

    @classmethod
    def from_records(cls, records: list[EhrRecord]) -> "Batch":
        if not records:
            raise ValueError("cannot batch zero records")
        n_vars = records[0].n_variables
        if any(r.n_variables != n_vars for r in records):
            raise ShapeError("records disagree on the number of variables")
        t_max = max(r.length for r in records)
        b = len(records)
        x = np.zeros((b, t_max, n_vars))
        m = np.zeros((b, t_max, n_vars), dtype=bool)
        for i, r in enumerate(records):
            x[i, : r.length] = r.x
            m[i, : r.length] = r.m
        valid_len = np.array([r.length for r in records], dtype=np.intp)
        y = None
        if all(r.y is not None for r in records):
            y = np.stack([np.asarray(r.y) for r in records])
        return cls(x=x, m=m, valid_len=valid_len, patient_ids=[r.patient_id for r in records], y=y)

    def __len__(self) -> int:
        return self.x.shape[0]


# CSV I/O


@dataclass(frozen=True)
class CsvSchema:
    variables: tuple[str, ...]
    has_label: bool


def _parse_header(header: list[str], path) -> CsvSchema:
    if len(header) < 3 or header[0] != "patient_id" or header[1] != "hour":
        raise ValueError(f"{path}: header must start with patient_id,hour followed by variable columns")
    has_label = header[-1] == "label"
    variables = tuple(header[2:-1] if has_label else header[2:])
    if not variables:
        raise ValueError(f"{path}: no variable columns")
    if len(set(variables)) != len(variables) or "label" in variables:
        raise ValueError(f"{path}: duplicate or reserved column names in {variables}")
    return CsvSchema(variables=variables, has_label=has_label)


def load_csv(path, schema: CsvSchema | None = None) -> list[EhrRecord]:
    """Read one split. Rows may arrive in any order and hours may have gaps;
    a patient's length is max(hour) + 1 and unlisted hours are unobserved.
    Duplicate writes to one cell keep the last value (warned once per file).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        file_schema = _parse_header(header, path)
        if schema is not None and file_schema != schema:
            raise ValueError(f"{path}: header {header} does not match expected schema {schema}")
        n_vars = len(file_schema.variables)
        n_fields = 2 + n_vars + (1 if file_schema.has_label else 0)

        # per patient: hour -> (values dict, label)
        rows: dict[str, dict[int, list[float | None]]] = {}
        labels: dict[str, float] = {}
        order: list[str] = []
        duplicates = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_fields:
                raise ValueError(f"{path} line {line_no}: expected {n_fields} fields, got {len(row)}")
            pid = row[0]
            if not pid:
                raise ValueError(f"{path} line {line_no}: empty patient_id")
            try:
                hour = int(row[1])
            except ValueError:
                raise ValueError(f"{path} line {line_no}: hour {row[1]!r} is not an integer") from None
            if hour < 0:
                raise ValueError(f"{path} line {line_no}: negative hour {hour}")
            if pid not in rows:
                rows[pid] = {}
                order.append(pid)
            cells = rows[pid].setdefault(hour, [None] * n_vars)
            for j, raw in enumerate(row[2 : 2 + n_vars]):
                if raw == "":
                    continue
                try:
                    value = float(raw)
                except ValueError:
                    raise ValueError(
                        f"{path} line {line_no}: value {raw!r} for {file_schema.variables[j]} is not a number"
                    ) from None
                if not math.isfinite(value):
                    raise ValueError(f"{path} line {line_no}: non-finite value {raw!r}")
                if cells[j] is not None:
                    duplicates += 1
                cells[j] = value
            if file_schema.has_label and row[-1] != "":
                try:
                    labels[pid] = float(row[-1])
                except ValueError:
                    raise ValueError(f"{path} line {line_no}: label {row[-1]!r} is not a number") from None

        if duplicates:
            log.warning("%s: %d duplicate cell writes, kept the last value", path, duplicates)

    records = []
    for pid in order:
        hours = rows[pid]
        t_len = max(hours) + 1
        x = np.zeros((t_len, n_vars))
        m = np.zeros((t_len, n_vars), dtype=bool)
        for hour, cells in hours.items():
            for j, value in enumerate(cells):
                if value is not None:
                    x[hour, j] = value
                    m[hour, j] = True
        y = None
        if pid in labels:
            raw = labels[pid]
            y = int(raw) if float(raw).is_integer() else raw
        records.append(EhrRecord(patient_id=pid, x=x, m=m, y=y))
    return records


def load_labels(path) -> dict[str, int | np.ndarray]:
    """Read a separate label file: patient_id,label or patient_id,label_0..label_K."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty label file") from None
        if header[0] != "patient_id" or len(header) < 2:
            raise ValueError(f"{path}: label header must be patient_id followed by label column(s)")
        multi = len(header) > 2
        out: dict[str, int | np.ndarray] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path} line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                if multi:
                    out[row[0]] = np.array([int(v) for v in row[1:]], dtype=np.intp)
                else:
                    out[row[0]] = int(row[1])
            except ValueError:
                raise ValueError(f"{path} line {line_no}: labels must be integers") from None
    return out


def attach_labels(records: list[EhrRecord], labels: dict[str, int | np.ndarray]) -> list[EhrRecord]:
    out = []
    for r in records:
        if r.patient_id not in labels:
            raise ValueError(f"no label for patient {r.patient_id}")
        out.append(EhrRecord(patient_id=r.patient_id, x=r.x, m=r.m, y=labels[r.patient_id]))
    return out


# normalization


@dataclass
class NormStats:
    """Per-variable mean/std over observed training cells (population form)."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # variables with zero variance (or never observed): passed through

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "NormStats":
        return cls(
            mean=np.array(payload["mean"], dtype=np.float64),
            std=np.array(payload["std"], dtype=np.float64),
            constant=np.array(payload["constant"], dtype=bool),
        )


def zscore_fit(train: list[EhrRecord]) -> NormStats:
    if not train:
        raise ValueError("cannot fit normalization on an empty split")
    n_vars = train[0].n_variables
    mean = np.zeros(n_vars)
    std = np.ones(n_vars)
    constant = np.zeros(n_vars, dtype=bool)
    for j in range(n_vars):
        values = np.concatenate([r.x[r.m[:, j], j] for r in train]) if train else np.array([])
        if values.size == 0:
            constant[j] = True
            continue
        mu = values.mean()
        sigma = values.std()
        if sigma == 0.0:
            constant[j] = True
            mean[j] = mu
        else:
            mean[j] = mu
            std[j] = sigma
    return NormStats(mean=mean, std=std, constant=constant)


def zscore_apply(records: list[EhrRecord], stats: NormStats) -> list[EhrRecord]:
    """Standardize observed cells; masks and unobserved zeros are untouched.
    Constant variables pass through unchanged."""
    out = []
    scale = np.where(stats.constant, 1.0, stats.std)
    shift = np.where(stats.constant, 0.0, stats.mean)
    for r in records:
        x = np.where(r.m, (r.x - shift) / scale, 0.0)
        out.append(EhrRecord(patient_id=r.patient_id, x=x, m=r.m, y=r.y))
    return out


def zscore_fit_apply(train: list[EhrRecord], *others: list[EhrRecord]):
    stats = zscore_fit(train)
    normalized = [zscore_apply(split, stats) for split in (train, *others)]
    return normalized, stats


# synthetic cohorts


@dataclass
class SyntheticSpec:
    """Generator settings for a synthetic cohort.

    Each patient follows a smooth latent severity curve; variables are noisy
    affine reads of it on different scales, the label marks the top quantile
    of terminal severity, and observation can be completely random (mcar) or
    severity-driven (mnar).
    """

    n_patients: int
    n_variables: int
    t_max: int
    observed_rate: float
    positive_rate: float
    missingness: str = "mcar"
    seed: int = 0
    t_min: int | None = None

    def __post_init__(self):
        if self.n_patients < 10:
            raise ValueError("need at least 10 patients for an 8:1:1 split")
        if self.n_variables < 1 or self.t_max < 1:
            raise ValueError("n_variables and t_max must be positive")
        if not 0.0 < self.observed_rate <= 1.0:
            raise ValueError(f"observed_rate must be in (0, 1], got {self.observed_rate}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        if self.positive_rate * self.n_patients < 1 or (1 - self.positive_rate) * self.n_patients < 1:
            raise ValueError("positive_rate leaves one class empty at this cohort size")
        if self.missingness not in ("mcar", "mnar"):
            raise ValueError(f"missingness must be mcar or mnar, got {self.missingness!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.t_min is not None and not 1 <= self.t_min <= self.t_max:
            raise ValueError("t_min must be in [1, t_max]")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    train: list[EhrRecord]
    val: list[EhrRecord]
    test: list[EhrRecord]
    realized_observed_rate: float
    realized_positive_rate: float

    @property
    def splits(self) -> dict[str, list[EhrRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}


_MNAR_ALPHA = 1.0
_PROB_FLOOR, _PROB_CEIL = 0.02, 0.98


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Build a cohort deterministically from the spec (same spec, same bytes)."""
    n = spec.n_patients
    t_lo = spec.t_min if spec.t_min is not None else max(1, spec.t_max // 2)

    cohort_rng = stream_rng(spec.seed, _STREAM_COHORT)
    signs = cohort_rng.choice((-1.0, 1.0), size=spec.n_variables)
    unit_scale = 10.0 ** cohort_rng.uniform(-1.0, 1.0, size=spec.n_variables)
    loading = signs * cohort_rng.uniform(0.6, 1.4, size=spec.n_variables) * unit_scale
    offset = cohort_rng.uniform(-1.0, 1.0, size=spec.n_variables) * unit_scale
    noise = 0.3 * np.abs(loading)

    curves = []
    lengths = np.empty(n, dtype=np.intp)
    terminal = np.empty(n)
    for i in range(n):
        rng = stream_rng(spec.seed, _STREAM_PATIENT, i)
        lengths[i] = rng.integers(t_lo, spec.t_max + 1)
        a0 = rng.normal(0.0, 0.8)
        a1 = rng.normal(0.0, 1.2)
        amp = rng.uniform(0.3, 1.0, size=2)
        freq = rng.uniform(1.0, 3.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        ts = np.arange(lengths[i]) / spec.t_max
        z = a0 + a1 * ts
        for k in range(2):
            z = z + amp[k] * np.sin(2.0 * np.pi * freq[k] * ts + phase[k])
        curves.append(z)
        terminal[i] = z[-1]

    threshold = np.quantile(terminal, 1.0 - spec.positive_rate)
    labels = (terminal > threshold).astype(np.intp)

    if spec.missingness == "mnar":
        z_all = np.concatenate(curves)
        z_mu, z_sigma = z_all.mean(), max(z_all.std(), 1e-12)
        weights = [np.exp(_MNAR_ALPHA * (z - z_mu) / z_sigma) for z in curves]
        flat = np.concatenate(weights)

        def realized(kappa: float) -> float:
            return float(np.clip(kappa * flat, _PROB_FLOOR, _PROB_CEIL).mean())

        lo, hi = 1e-9, 1e9
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if realized(mid) < spec.observed_rate:
                lo = mid
            else:
                hi = mid
        kappa = math.sqrt(lo * hi)
        probs = [np.clip(kappa * w, _PROB_FLOOR, _PROB_CEIL) for w in weights]
    else:
        probs = [np.full(len(z), spec.observed_rate) for z in curves]

    records = []
    observed_cells = 0
    total_cells = 0
    for i in range(n):
        rng = stream_rng(spec.seed, _STREAM_MASK, i)
        t_len = int(lengths[i])
        m = rng.random((t_len, spec.n_variables)) < probs[i][:, None]
        eps = rng.standard_normal((t_len, spec.n_variables))
        values = curves[i][:, None] * loading + offset + eps * noise
        x = np.where(m, values, 0.0)
        observed_cells += int(m.sum())
        total_cells += m.size
        records.append(EhrRecord(patient_id=f"p{i:05d}", x=x, m=m, y=int(labels[i])))

    perm = stream_rng(spec.seed, _STREAM_SPLIT).permutation(n)
    n_hold = n // 10
    test_idx = np.sort(perm[:n_hold])
    val_idx = np.sort(perm[n_hold : 2 * n_hold])
    train_idx = np.sort(perm[2 * n_hold :])
    return SyntheticDataset(
        spec=spec,
        train=[records[i] for i in train_idx],
        val=[records[i] for i in val_idx],
        test=[records[i] for i in test_idx],
        realized_observed_rate=observed_cells / total_cells,
        realized_positive_rate=float(labels.mean()),
    )


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """Write train/val/test CSVs plus a spec.json echo of the generator settings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_vars = dataset.spec.n_variables
    header = ["patient_id", "hour"] + [f"v{j}" for j in range(n_vars)] + ["label"]
    for name, split in dataset.splits.items():
        with (out_dir / f"{name}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in split:
                for t in range(r.length):
                    cells = [repr(float(r.x[t, j])) if r.m[t, j] else "" for j in range(n_vars)]
                    writer.writerow([r.patient_id, t, *cells, int(r.y)])
    (out_dir / "spec.json").write_text(json.dumps(asdict(dataset.spec), indent=2) + "\n")


def load_dataset(data_dir) -> dict[str, list[EhrRecord]]:
    """Load train/val/test CSVs from a directory, enforcing one schema.

    If the CSVs carry no label column, a labels.csv in the same directory is
    required and joined on patient_id.
    """
    data_dir = Path(data_dir)
    train_path = data_dir / "train.csv"
    if not train_path.exists():
        raise FileNotFoundError(f"{train_path} not found")
    splits = {}
    schema = None
    for name in ("train", "val", "test"):
        path = data_dir / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        records = load_csv(path, schema=schema)
        if schema is None:
            with path.open(newline="") as fh:
                schema = _parse_header(next(csv.reader(fh)), path)
        splits[name] = records
    if schema is not None and not schema.has_label:
        labels_path = data_dir / "labels.csv"
        if not labels_path.exists():
            raise FileNotFoundError(f"{labels_path} not found and CSVs carry no label column")
        labels = load_labels(labels_path)
        splits = {name: attach_labels(records, labels) for name, records in splits.items()}
    return splits


# removal masks for pretraining


@dataclass
class MaskPlan:
    """Cells to remove from one record for the reconstruction objective."""

    m_hat: np.ndarray  # bool, model coordinates: (T+1, N) with a CLS row, or (T, N) without
    rate: float

    @property
    def removed(self) -> int:
        return int(self.m_hat.sum())


def sample_mask_plan(
    m_prime: np.ndarray,
    p_interval: tuple[float, float],
    rng: np.random.Generator,
    protected_rows: int = 1,
) -> MaskPlan:
    """Draw a removal rate r ~ U(p_interval), then remove each eligible
    observed cell independently with probability r.

    The first ``protected_rows`` rows (the CLS position) are never removed.
    A degenerate interval (lo == hi) forces r = lo.
    """
    lo, hi = float(p_interval[0]), float(p_interval[1])
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError(f"removal interval must satisfy 0 <= lo <= hi < 1, got ({lo}, {hi})")
    m_prime = np.asarray(m_prime, dtype=bool)
    if m_prime.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m_prime.shape}")
    rate = lo if lo == hi else float(rng.uniform(lo, hi))
    m_hat = (rng.random(m_prime.shape) < rate) & m_prime
    if protected_rows:
        m_hat[:protected_rows] = False
    return MaskPlan(m_hat=m_hat, rate=rate)


def apply_mask_plan(x: np.ndarray, m: np.ndarray, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Blank the planned cells: removed cells become unobserved zeros.

    The plan may carry one extra leading row (the CLS position); data rows
    align to its tail.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    offset = plan.m_hat.shape[0] - x.shape[0]
    if offset not in (0, 1) or plan.m_hat.shape[1] != x.shape[1]:
        raise ShapeError(f"plan shape {plan.m_hat.shape} does not align with record shape {x.shape}")
    m_hat = plan.m_hat[offset:]
    if np.any(m_hat & ~m):
        raise ValueError("mask plan removes cells that were never observed")
    m_star = m & ~m_hat
    x_star = np.where(m_hat, 0.0, x)
    return x_star, m_star


# observed-rate sweeps


def native_observed_rate(records: list[EhrRecord]) -> float:
    total = sum(r.m.size for r in records)
    observed = sum(int(r.m.sum()) for r in records)
    return observed / total if total else 0.0


def subsample_observed(records: list[EhrRecord], keep_fraction: float, seed: int) -> list[EhrRecord]:
    """Keep each observed cell with the given probability, deterministically
    per (seed, keep_fraction, record position). keep_fraction 1.0 returns the
    input list object untouched."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return records
    rate_key = int(round(keep_fraction * 10**9))
    out = []
    for i, r in enumerate(records):
        rng = stream_rng(seed, _STREAM_SUBSAMPLE, rate_key, i)
        keep = rng.random(r.m.shape) < keep_fraction
        m = r.m & keep
        out.append(EhrRecord(patient_id=r.patient_id, x=np.where(m, r.x, 0.0), m=m, y=r.y))
    return out
