"""Synthetic EHR-like cohort generator.

Produces desk-scale panel cohorts with controllable cross-feature
correlation (low-rank latent structure with optional nonlinear expansion),
temporal structure, follow-up dynamics, demographic subgroup shifts, and an
explicit missingness mechanism.  The complete pre-masking value matrix is
retained on the cohort so imputation quality can be scored against ground
truth even at truly-missing cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np
from scipy.stats import norm

from .data import Cohort, LabSchema, PatientRow
from .kernels import derive_seed, make_rng

__all__ = ["SynthConfig", "GroundTruthUnavailable", "generate", "ground_truth"]

NONLINEARITIES = ("none", "quadratic", "interaction")
MECHANISMS = ("MCAR", "MAR")

# raw-scale placement of feature values; generous headroom above zero keeps
# raw labs positive, which the cohort CSV loader requires
_BASE_LOC = 50.0
_LOC_STEP = 10.0
_SCALE = 4.0


class GroundTruthUnavailable(RuntimeError):
    """The cohort has no retained complete value matrix."""


@dataclass(frozen=True)
class SynthConfig:
    n_rows: int = 1000
    n_features: int = 10
    latent_rank: int = 3
    noise_sd: float = 0.1
    nonlinearity: str = "none"
    missing_mechanism: str = "MCAR"
    missing_rate: float = 0.25
    followup_prob: float = 0.5
    followup_drift_sd: float = 0.5
    n_groups: int = 1
    group_shift_sd: float = 0.0
    seed: int = 0
    admit_year_start: int = 2170
    admit_year_end: int = 2190

    def __post_init__(self):
        if self.latent_rank > self.n_features:
            raise ValueError("latent_rank must not exceed n_features")
        for name in ("missing_rate", "followup_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.noise_sd < 0 or self.followup_drift_sd < 0 or self.group_shift_sd < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")
        if self.missing_mechanism not in MECHANISMS:
            raise ValueError(f"missing_mechanism must be one of {MECHANISMS}")
        if self.n_groups < 1 or self.n_rows < 1 or self.n_features < 1:
            raise ValueError("counts must be positive")
        if self.admit_year_end <= self.admit_year_start:
            raise ValueError("admit window must be non-empty")


def _expand_latents(z: np.ndarray, nonlinearity: str) -> np.ndarray:
    """Map latents to the generative coordinate system, unit variance per column."""
    if nonlinearity == "none":
        return z
    if nonlinearity == "quadratic":
        return np.hstack([z, (z * z - 1.0) / math.sqrt(2.0)])
    # interaction: raw latents plus all pairwise products (already unit variance)
    r = z.shape[1]
    pairs = [z[:, i] * z[:, j] for i in range(r) for j in range(i + 1, r)]
    if not pairs:
        return z
    return np.hstack([z, np.column_stack(pairs)])


def _mar_intercept(rate: float, slope: float) -> float:
    """Intercept so that E[sigmoid(a + slope*Z)] is approximately ``rate``."""
    if rate <= 0.0:
        return -np.inf
    if rate >= 1.0:
        return np.inf
    # logistic ~ probit with scale 1.702
    return float(norm.ppf(rate) * math.sqrt(1.702**2 + slope**2))


def generate(config: SynthConfig) -> Cohort:
    """Generate a cohort; same config (same seed) gives a bit-identical result."""
    n, f, r = config.n_rows, config.n_features, config.latent_rank
    rng_struct = make_rng(derive_seed(config.seed, "structure"))
    rng_latent = make_rng(derive_seed(config.seed, "latent"))
    rng_noise = make_rng(derive_seed(config.seed, "noise"))
    rng_times = make_rng(derive_seed(config.seed, "times"))
    rng_miss = make_rng(derive_seed(config.seed, "missing"))
    rng_fu = make_rng(derive_seed(config.seed, "followup"))
    rng_admit = make_rng(derive_seed(config.seed, "admit"))

    z = rng_latent.normal(size=(n, r))
    g = _expand_latents(z, config.nonlinearity)
    w = rng_struct.normal(size=(g.shape[1], f))
    w /= np.linalg.norm(w, axis=0, keepdims=True)  # unit columns: Var(g @ w_j) = 1

    group_ids = rng_struct.integers(config.n_groups, size=n)
    group_offsets = rng_struct.normal(scale=config.group_shift_sd, size=(config.n_groups, f)) \
        if config.group_shift_sd > 0 else np.zeros((config.n_groups, f))

    u = g @ w + group_offsets[group_ids] + rng_noise.normal(scale=config.noise_sd, size=(n, f)) \
        if config.noise_sd > 0 else g @ w + group_offsets[group_ids]
    locs = _BASE_LOC + _LOC_STEP * np.arange(f)
    truth = np.maximum(locs[None, :] + _SCALE * u, 0.0)

    # value missingness: MCAR is uniform; MAR raises the drop probability
    # with the row's first latent coordinate
    if config.missing_mechanism == "MCAR":
        drop = rng_miss.random(size=(n, f)) < config.missing_rate
    else:
        slope = 1.5
        a = _mar_intercept(config.missing_rate, slope)
        p_row = 1.0 / (1.0 + np.exp(-(a + slope * z[:, 0])))
        drop = rng_miss.random(size=(n, f)) < p_row[:, None]

    values = np.where(drop, np.nan, truth)

    # per-row time offsets, increasing across the feature order; the earliest
    # observed lab anchors the admission at offset zero
    raw_times = np.sort(rng_times.uniform(0.0, 72.0, size=(n, f)), axis=1)
    times = np.where(drop, np.nan, raw_times)
    with np.errstate(invalid="ignore"):
        t_min = np.nanmin(np.where(drop, np.inf, raw_times), axis=1)
    t_min = np.where(np.isfinite(t_min), t_min, 0.0)
    times = times - t_min[:, None]

    fu_present = (~drop) & (rng_fu.random(size=(n, f)) < config.followup_prob)
    fu_noise = rng_fu.normal(scale=config.followup_drift_sd, size=(n, f)) \
        if config.followup_drift_sd > 0 else np.zeros((n, f))
    fu_values = np.where(fu_present, np.maximum(truth + fu_noise, 0.0), np.nan)
    fu_gap = rng_fu.uniform(1.0, 24.0, size=(n, f))
    fu_times = np.where(fu_present, times + fu_gap, np.nan)

    t0 = datetime(config.admit_year_start, 1, 1)
    span_s = (datetime(config.admit_year_end, 1, 1) - t0).total_seconds()
    admit_offsets = rng_admit.uniform(0.0, span_s, size=n)

    schema = LabSchema(features=tuple((f"lab{i:02d}", f"lab{i:02d}") for i in range(f)))
    rows = []
    for i in range(n):
        rows.append(
            PatientRow(
                subject_id=100_000 + i,
                admission_id=200_000 + i,
                group=f"group_{group_ids[i]}",
                admit_time=t0 + timedelta(seconds=float(round(admit_offsets[i]))),
                values=values[i].copy(),
                times=times[i].copy(),
                fu_values=fu_values[i].copy(),
                fu_times=fu_times[i].copy(),
            )
        )
    cohort = Cohort(schema=schema, rows=rows, truth=truth)
    cohort.validate()
    return cohort


def ground_truth(cohort: Cohort) -> np.ndarray:
    """The complete pre-masking value matrix, aligned (row, feature)."""
    if cohort.truth is None:
        raise GroundTruthUnavailable(
            "cohort has no ground-truth companion; only synthetic cohorts "
            "(or ones loaded alongside a *.truth.csv) support this"
        )
    return cohort.truth
