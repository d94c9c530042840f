"""Schema, cohort storage, normalization, masking, and serialization.

A cohort is a list of patient-admission rows over a fixed registry of lab
features.  Each feature owns four token slots in the model-facing layout:
its value, the measurement time offset, an optional follow-up value, and the
follow-up time offset, giving a sequence length of ``4 * n_features``.
Missingness is explicit: absent measurements are NaN in row arrays and carry
the MISSING state in slot-level views.

Cohorts are immutable after construction; every operation returns new values,
so concurrent reads are safe.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .kernels import derive_seed, make_rng

__all__ = [
    "MISSING",
    "OBSERVED",
    "MASKED",
    "SLOT_VALUE",
    "SLOT_TIME",
    "SLOT_FU_VALUE",
    "SLOT_FU_TIME",
    "SLOTS_PER_FEATURE",
    "TIME_STATS_KEY",
    "ParseError",
    "NormalizerStateError",
    "InsufficientDataError",
    "FeatureStats",
    "LabSchema",
    "PatientRow",
    "Cohort",
    "MaskPlan",
    "fit_normalizer",
    "apply_normalizer",
    "invert_normalizer",
    "normalize_slot_matrix",
    "denormalize_feature",
    "temporal_split",
    "filter_min_observed",
    "draw_mask_plan",
    "draw_mask_states",
    "save_cohort",
    "load_cohort",
    "save_schema_stats",
    "load_schema_stats",
]

# cell states in slot-level views and mask plans
MISSING = 0   # absent in the data; never supervised
OBSERVED = 1  # present and visible to the model
MASKED = 2    # present but hidden from the model; a reconstruction target

# slot kinds within a feature's 4-slot block
SLOT_VALUE = 0
SLOT_TIME = 1
SLOT_FU_VALUE = 2
SLOT_FU_TIME = 3
SLOTS_PER_FEATURE = 4

# reserved stats key for the pooled time-offset normalizer
TIME_STATS_KEY = "__time__"


class ParseError(ValueError):
    """A cohort file is malformed; the message names the row and column."""


class NormalizerStateError(RuntimeError):
    """Normalization was requested before stats were fitted."""


class InsufficientDataError(ValueError):
    """Not enough observed values to fit a statistic."""


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    """Raw-scale range and clip bounds for one feature (or the pooled times).

    ``vmin``/``vmax`` are the raw sample extremes; ``clip_lo``/``clip_hi``
    are the fitted quantile clip bounds.  The normalizing transform is
    clip-to-[clip_lo, clip_hi] followed by min-max onto [0, 1].
    """

    vmin: float
    vmax: float
    clip_lo: float
    clip_hi: float

    def __post_init__(self):
        if not (self.vmin <= self.clip_lo <= self.clip_hi <= self.vmax):
            raise ValueError(
                f"need vmin <= clip_lo <= clip_hi <= vmax, got "
                f"{self.vmin}, {self.clip_lo}, {self.clip_hi}, {self.vmax}"
            )

    @property
    def degenerate(self) -> bool:
        return self.clip_hi <= self.clip_lo


@dataclass(frozen=True)
class LabSchema:
    """Ordered registry of lab features, slot layout, and fitted stats.

    ``stats`` maps feature ids (plus the reserved ``__time__`` key for the
    pooled time-offset scale) to :class:`FeatureStats`; it is empty until
    :func:`fit_normalizer` runs.
    """

    features: tuple
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [fid for fid, _ in self.features]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate feature ids in schema")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def seq_len(self) -> int:
        return SLOTS_PER_FEATURE * len(self.features)

    @property
    def feature_ids(self):
        return [fid for fid, _ in self.features]

    def feature_index(self, feature_id: str) -> int:
        for i, (fid, _) in enumerate(self.features):
            if fid == feature_id:
                return i
        raise KeyError(f"unknown feature id {feature_id!r}")

    def value_slot(self, fi: int) -> int:
        return SLOTS_PER_FEATURE * fi + SLOT_VALUE

    def time_slot(self, fi: int) -> int:
        return SLOTS_PER_FEATURE * fi + SLOT_TIME

    def fu_value_slot(self, fi: int) -> int:
        return SLOTS_PER_FEATURE * fi + SLOT_FU_VALUE

    def fu_time_slot(self, fi: int) -> int:
        return SLOTS_PER_FEATURE * fi + SLOT_FU_TIME

    def slot_kinds(self) -> np.ndarray:
        """Slot-kind code for every position in the layout, shape (seq_len,)."""
        return np.tile(
            np.array([SLOT_VALUE, SLOT_TIME, SLOT_FU_VALUE, SLOT_FU_TIME], dtype=np.int8),
            self.n_features,
        )

    def slot_feature_index(self) -> np.ndarray:
        """Owning feature index for every slot, shape (seq_len,)."""
        return np.repeat(np.arange(self.n_features), SLOTS_PER_FEATURE)


# ---------------------------------------------------------------------------
# rows and cohorts
# ---------------------------------------------------------------------------

def _as_feature_array(x, n):
    arr = np.asarray(x, dtype=np.float64).copy()
    if arr.shape != (n,):
        raise ValueError(f"expected shape ({n},), got {arr.shape}")
    return arr


@dataclass
class PatientRow:
    """One patient admission: values, time offsets, follow-ups, group label.

    Arrays are indexed by feature position in the schema; NaN marks a missing
    cell.  Time offsets are hours since the earliest lab in the admission.
    """

    subject_id: int
    admission_id: int
    group: str
    admit_time: datetime
    values: np.ndarray
    times: np.ndarray
    fu_values: np.ndarray
    fu_times: np.ndarray

    def validate(self, n_features: int) -> None:
        for name in ("values", "times", "fu_values", "fu_times"):
            arr = getattr(self, name)
            if arr.shape != (n_features,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n_features},)")
        t = self.times
        if np.any(t[~np.isnan(t)] < 0):
            raise ValueError(f"admission {self.admission_id}: negative time offset")
        both = ~np.isnan(self.fu_times) & ~np.isnan(t)
        if np.any(self.fu_times[both] < t[both]):
            raise ValueError(f"admission {self.admission_id}: follow-up precedes base time")
        # a recorded time without a value would be unattributable
        if np.any(np.isnan(self.values) & ~np.isnan(t)):
            raise ValueError(f"admission {self.admission_id}: time offset without a value")

    def n_observed_cells(self) -> int:
        """Count of non-missing cells across all four slot kinds."""
        return int(
            np.sum(~np.isnan(self.values))
            + np.sum(~np.isnan(self.times))
            + np.sum(~np.isnan(self.fu_values))
            + np.sum(~np.isnan(self.fu_times))
        )


@dataclass
class Cohort:
    """A schema plus patient rows, with an optional ground-truth value matrix.

    ``truth`` is only present for synthetic cohorts (or ones loaded with a
    truth companion file); it holds the complete pre-masking value matrix,
    aligned (row, feature).
    """

    schema: LabSchema
    rows: list
    truth: np.ndarray | None = None

    def __len__(self):
        return len(self.rows)

    def validate(self) -> None:
        for row in self.rows:
            row.validate(self.schema.n_features)
        if self.truth is not None and self.truth.shape != (len(self.rows), self.schema.n_features):
            raise ValueError(f"truth matrix shape {self.truth.shape} does not match cohort")

    def subset(self, indices) -> "Cohort":
        indices = list(indices)
        truth = self.truth[indices] if self.truth is not None else None
        return Cohort(schema=self.schema, rows=[self.rows[i] for i in indices], truth=truth)

    def with_schema(self, schema: LabSchema) -> "Cohort":
        if schema.feature_ids != self.schema.feature_ids:
            raise ValueError("schema feature ids do not match cohort")
        return Cohort(schema=schema, rows=self.rows, truth=self.truth)

    def value_matrix(self) -> np.ndarray:
        """Raw observed values, shape (n_rows, n_features), NaN = missing."""
        return np.stack([r.values for r in self.rows]) if self.rows else np.empty((0, self.schema.n_features))

    def fu_value_matrix(self) -> np.ndarray:
        return np.stack([r.fu_values for r in self.rows]) if self.rows else np.empty((0, self.schema.n_features))

    def slot_values(self) -> np.ndarray:
        """Raw stored values in slot layout, shape (n_rows, seq_len)."""
        n, f = len(self.rows), self.schema.n_features
        out = np.full((n, SLOTS_PER_FEATURE * f), np.nan)
        for i, r in enumerate(self.rows):
            out[i, SLOT_VALUE::SLOTS_PER_FEATURE] = r.values
            out[i, SLOT_TIME::SLOTS_PER_FEATURE] = r.times
            out[i, SLOT_FU_VALUE::SLOTS_PER_FEATURE] = r.fu_values
            out[i, SLOT_FU_TIME::SLOTS_PER_FEATURE] = r.fu_times
        return out

    def slot_states(self) -> np.ndarray:
        """MISSING/OBSERVED per slot, shape (n_rows, seq_len), int8."""
        vals = self.slot_values()
        return np.where(np.isnan(vals), MISSING, OBSERVED).astype(np.int8)


# ---------------------------------------------------------------------------
# normalization: quantile clip then min-max onto [0, 1]
# ---------------------------------------------------------------------------

def _fit_stats(sample: np.ndarray, clip_quantiles) -> FeatureStats:
    lo_q, hi_q = clip_quantiles
    clip_lo = float(np.quantile(sample, lo_q))
    clip_hi = float(np.quantile(sample, hi_q))
    return FeatureStats(
        vmin=float(sample.min()),
        vmax=float(sample.max()),
        clip_lo=clip_lo,
        clip_hi=clip_hi,
    )


def fit_normalizer(cohort: Cohort, clip_quantiles=(0.005, 0.995)) -> LabSchema:
    """Fit per-feature clip bounds and min-max ranges; returns a new schema.

    Value stats for a feature pool its base and follow-up measurements (same
    assay, same scale).  Time offsets share one pooled entry under the
    reserved ``__time__`` key.  A constant feature gets a degenerate range
    and normalizes to 0.5.
    """
    lo_q, hi_q = clip_quantiles
    if not (0.0 <= lo_q <= hi_q <= 1.0):
        raise ValueError(f"bad clip quantiles {clip_quantiles}")
    values = cohort.value_matrix()
    fu_values = cohort.fu_value_matrix()
    stats: dict[str, FeatureStats] = {}
    for fi, (fid, _) in enumerate(cohort.schema.features):
        sample = np.concatenate([values[:, fi], fu_values[:, fi]])
        sample = sample[~np.isnan(sample)]
        if sample.size < 2:
            raise InsufficientDataError(
                f"feature {fid!r} has {sample.size} observed values; need at least 2"
            )
        stats[fid] = _fit_stats(sample, clip_quantiles)
    times = np.concatenate(
        [np.stack([r.times for r in cohort.rows]).ravel(),
         np.stack([r.fu_times for r in cohort.rows]).ravel()]
    ) if cohort.rows else np.array([])
    times = times[~np.isnan(times)]
    if times.size < 2:
        raise InsufficientDataError("fewer than 2 observed time offsets in cohort")
    stats[TIME_STATS_KEY] = _fit_stats(times, clip_quantiles)
    return replace(cohort.schema, stats=stats)


def apply_normalizer(x, stats: FeatureStats):
    """Clip to the fitted bounds, then scale onto [0, 1]."""
    clipped = np.clip(x, stats.clip_lo, stats.clip_hi)
    if stats.degenerate:
        return np.full_like(np.asarray(clipped, dtype=np.float64), 0.5)
    return (clipped - stats.clip_lo) / (stats.clip_hi - stats.clip_lo)


def invert_normalizer(y, stats: FeatureStats):
    """Map a normalized value back to the (clipped) raw scale."""
    if stats.degenerate:
        return np.full_like(np.asarray(y, dtype=np.float64), stats.clip_lo)
    return stats.clip_lo + np.asarray(y, dtype=np.float64) * (stats.clip_hi - stats.clip_lo)


def _stats_for(schema: LabSchema, key: str) -> FeatureStats:
    try:
        return schema.stats[key]
    except KeyError:
        raise NormalizerStateError(f"no fitted stats for {key!r}; run fit_normalizer first") from None


def normalize_slot_matrix(slot_values: np.ndarray, schema: LabSchema) -> np.ndarray:
    """Normalize a (n, seq_len) slot matrix; NaN cells pass through as NaN."""
    if not schema.stats:
        raise NormalizerStateError("schema has no fitted stats; run fit_normalizer first")
    if slot_values.shape[1] != schema.seq_len:
        raise ValueError(f"slot matrix width {slot_values.shape[1]} != seq_len {schema.seq_len}")
    out = np.full_like(slot_values, np.nan)
    time_stats = _stats_for(schema, TIME_STATS_KEY)
    for fi, (fid, _) in enumerate(schema.features):
        fstats = _stats_for(schema, fid)
        base = SLOTS_PER_FEATURE * fi
        for kind, stats in (
            (SLOT_VALUE, fstats),
            (SLOT_TIME, time_stats),
            (SLOT_FU_VALUE, fstats),
            (SLOT_FU_TIME, time_stats),
        ):
            col = slot_values[:, base + kind]
            ok = ~np.isnan(col)
            res = np.full_like(col, np.nan)
            res[ok] = apply_normalizer(col[ok], stats)
            out[:, base + kind] = res
    return out


def denormalize_feature(y, schema: LabSchema, feature_id: str):
    return invert_normalizer(y, _stats_for(schema, feature_id))


# ---------------------------------------------------------------------------
# split and row filter
# ---------------------------------------------------------------------------

def temporal_split(cohort: Cohort, cutoff: datetime):
    """Partition rows by admission time: (< cutoff, >= cutoff)."""
    train_idx = [i for i, r in enumerate(cohort.rows) if r.admit_time < cutoff]
    test_idx = [i for i, r in enumerate(cohort.rows) if r.admit_time >= cutoff]
    return cohort.subset(train_idx), cohort.subset(test_idx)


def filter_min_observed(cohort: Cohort, k: int = 17) -> Cohort:
    """Keep rows with at least ``k`` non-missing lab and time cells (inclusive)."""
    keep = [i for i, r in enumerate(cohort.rows) if r.n_observed_cells() >= k]
    return cohort.subset(keep)


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Per-slot cell states for one row, plus the draw parameters."""

    states: np.ndarray  # (seq_len,) int8 in {MISSING, OBSERVED, MASKED}
    mask_ratio: float
    seed: int


def draw_mask_states(
    base_states: np.ndarray,
    schema: LabSchema,
    mask_ratio: float,
    seed: int,
    mask_times: bool = False,
) -> np.ndarray:
    """Vectorized mask draw over a (n, seq_len) or (seq_len,) state array.

    Each observed value-kind cell (base or follow-up value) is independently
    promoted to MASKED with probability ``mask_ratio``.  The paired time cell
    stays OBSERVED unless ``mask_times`` is set: times are context for the
    reconstruction, not targets, under the default layout.
    """
    if not (0.0 <= mask_ratio <= 1.0):
        raise ValueError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    states = np.array(base_states, dtype=np.int8, copy=True)
    squeeze = states.ndim == 1
    if squeeze:
        states = states[None, :]
    kinds = schema.slot_kinds()
    value_kind = (kinds == SLOT_VALUE) | (kinds == SLOT_FU_VALUE)
    rng = make_rng(seed)
    draw = rng.random(states.shape)
    hit = (states == OBSERVED) & value_kind[None, :] & (draw < mask_ratio)
    states[hit] = MASKED
    if mask_times:
        # shift the hit pattern from value slots onto their paired time slots
        time_hit = np.zeros_like(hit)
        time_hit[:, 1::SLOTS_PER_FEATURE] = hit[:, 0::SLOTS_PER_FEATURE]
        time_hit[:, 3::SLOTS_PER_FEATURE] = hit[:, 2::SLOTS_PER_FEATURE]
        states[time_hit & (states == OBSERVED)] = MASKED
    return states[0] if squeeze else states


def draw_mask_plan(
    row: PatientRow,
    schema: LabSchema,
    mask_ratio: float,
    seed: int,
    mask_times: bool = False,
) -> MaskPlan:
    """Draw a seeded mask plan for one row (see :func:`draw_mask_states`)."""
    single = Cohort(schema=schema, rows=[row])
    base = single.slot_states()[0]
    states = draw_mask_states(base, schema, mask_ratio, seed, mask_times=mask_times)
    return MaskPlan(states=states, mask_ratio=mask_ratio, seed=seed)


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

_ID_COLUMNS = ["subject_id", "hadm_id", "group", "admit_time"]


def _fmt(x: float) -> str:
    """Shortest round-trip decimal rendering; empty string for missing."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _feature_columns(schema: LabSchema):
    cols = []
    for fid, _ in schema.features:
        cols.extend([f"npval_{fid}", f"nptime_{fid}", f"npval_last_{fid}", f"nptime_last_{fid}"])
    return cols


def save_cohort(path, cohort: Cohort) -> None:
    """Write the cohort CSV (and a ``*.truth.csv`` companion if truth exists)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_ID_COLUMNS + _feature_columns(cohort.schema))
        for r in cohort.rows:
            cells = [str(r.subject_id), str(r.admission_id), r.group, r.admit_time.isoformat()]
            for fi in range(cohort.schema.n_features):
                cells.extend(
                    [_fmt(r.values[fi]), _fmt(r.times[fi]), _fmt(r.fu_values[fi]), _fmt(r.fu_times[fi])]
                )
            writer.writerow(cells)
    if cohort.truth is not None:
        truth_path = _truth_companion(path)
        with open(truth_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subject_id", "hadm_id"] + [f"npval_{fid}" for fid in cohort.schema.feature_ids])
            for r, row_truth in zip(cohort.rows, cohort.truth):
                writer.writerow([str(r.subject_id), str(r.admission_id)] + [repr(float(v)) for v in row_truth])


def _truth_companion(path: Path) -> Path:
    return path.with_name(path.stem + ".truth.csv")


def _parse_float(text: str, rownum: int, col: str) -> float:
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {rownum}, column {col}: non-numeric field {text!r}") from None


def load_cohort(path, schema: LabSchema | None = None) -> Cohort:
    """Read a cohort CSV; values round-trip at full 64-bit precision.

    Raw lab values and time offsets must be non-negative ("invalid" raw
    measurements are rejected at the boundary).  A truth companion file, if
    present, is loaded into ``cohort.truth``.
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("row 0: empty file, expected header") from None
        if header[: len(_ID_COLUMNS)] != _ID_COLUMNS:
            raise ParseError(f"row 0: header must start with {_ID_COLUMNS}, got {header[:4]}")
        feat_cols = header[len(_ID_COLUMNS):]
        if len(feat_cols) % SLOTS_PER_FEATURE != 0:
            raise ParseError(f"row 0: {len(feat_cols)} feature columns not a multiple of 4")
        ids = []
        for i in range(0, len(feat_cols), SLOTS_PER_FEATURE):
            quad = feat_cols[i : i + SLOTS_PER_FEATURE]
            if not quad[0].startswith("npval_"):
                raise ParseError(f"row 0, column {quad[0]}: expected npval_<id>")
            fid = quad[0][len("npval_"):]
            expected = [f"npval_{fid}", f"nptime_{fid}", f"npval_last_{fid}", f"nptime_last_{fid}"]
            if quad != expected:
                raise ParseError(f"row 0: feature {fid!r} columns {quad} != {expected}")
            ids.append(fid)
        if schema is None:
            schema = LabSchema(features=tuple((fid, fid) for fid in ids))
        elif schema.feature_ids != ids:
            raise ParseError("row 0: header feature ids do not match provided schema")

        nf = len(ids)
        rows = []
        for rownum, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise ParseError(f"row {rownum}: expected {len(header)} fields, got {len(cells)}")
            try:
                subject_id = int(cells[0])
                admission_id = int(cells[1])
            except ValueError:
                raise ParseError(f"row {rownum}, column subject_id/hadm_id: non-integer id") from None
            group = cells[2]
            try:
                admit_time = datetime.fromisoformat(cells[3])
            except ValueError:
                raise ParseError(f"row {rownum}, column admit_time: bad timestamp {cells[3]!r}") from None
            values = np.full(nf, np.nan)
            times = np.full(nf, np.nan)
            fu_values = np.full(nf, np.nan)
            fu_times = np.full(nf, np.nan)
            for fi, fid in enumerate(ids):
                base = len(_ID_COLUMNS) + SLOTS_PER_FEATURE * fi
                for offset, (arr, col) in enumerate(
                    [
                        (values, f"npval_{fid}"),
                        (times, f"nptime_{fid}"),
                        (fu_values, f"npval_last_{fid}"),
                        (fu_times, f"nptime_last_{fid}"),
                    ]
                ):
                    x = _parse_float(cells[base + offset], rownum, col)
                    if not math.isnan(x) and x < 0:
                        raise ParseError(f"row {rownum}, column {col}: negative value {x}")
                    arr[fi] = x
            row = PatientRow(
                subject_id=subject_id,
                admission_id=admission_id,
                group=group,
                admit_time=admit_time,
                values=values,
                times=times,
                fu_values=fu_values,
                fu_times=fu_times,
            )
            try:
                row.validate(nf)
            except ValueError as exc:
                raise ParseError(f"row {rownum}: {exc}") from None
            rows.append(row)

    truth = None
    truth_path = _truth_companion(path)
    if truth_path.exists():
        truth = _load_truth(truth_path, schema, rows)
    return Cohort(schema=schema, rows=rows, truth=truth)


def _load_truth(path: Path, schema: LabSchema, rows) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        expected = ["subject_id", "hadm_id"] + [f"npval_{fid}" for fid in schema.feature_ids]
        if header != expected:
            raise ParseError(f"truth row 0: header {header[:4]}... does not match cohort schema")
        truth = np.full((len(rows), schema.n_features), np.nan)
        for rownum, cells in enumerate(reader, start=1):
            if rownum > len(rows):
                raise ParseError(f"truth row {rownum}: more truth rows than cohort rows")
            if int(cells[1]) != rows[rownum - 1].admission_id:
                raise ParseError(f"truth row {rownum}: admission id mismatch")
            truth[rownum - 1] = [
                _parse_float(c, rownum, f"npval_{fid}")
                for c, fid in zip(cells[2:], schema.feature_ids)
            ]
    if rownum != len(rows):
        raise ParseError(f"truth file has {rownum} rows, cohort has {len(rows)}")
    return truth


# ---------------------------------------------------------------------------
# schema stats sidecar
# ---------------------------------------------------------------------------

def save_schema_stats(path, schema: LabSchema) -> None:
    """JSON sidecar: feature id -> {min, max, clip_lo, clip_hi}."""
    payload = {
        key: {"min": s.vmin, "max": s.vmax, "clip_lo": s.clip_lo, "clip_hi": s.clip_hi}
        for key, s in schema.stats.items()
    }
    payload["__features__"] = [[fid, name] for fid, name in schema.features]
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_schema_stats(path) -> LabSchema:
    with open(path) as f:
        payload = json.load(f)
    features = tuple((fid, name) for fid, name in payload.pop("__features__"))
    stats = {
        key: FeatureStats(vmin=d["min"], vmax=d["max"], clip_lo=d["clip_lo"], clip_hi=d["clip_hi"])
        for key, d in payload.items()
    }
    return LabSchema(features=features, stats=stats)


def mask_seed_for(seed: int, epoch: int) -> int:
    """Stable per-epoch seed for fresh training mask draws."""
    return derive_seed(seed, "mask", epoch)
