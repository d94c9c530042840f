import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labmae import data as D


def make_row(fi_values, n=4, subject=1, admission=10, group="group_0", admit="2178-01-01"):
    """Row helper: fi_values maps feature index -> (value, time, fu_value, fu_time)."""
    values = np.full(n, np.nan)
    times = np.full(n, np.nan)
    fu_values = np.full(n, np.nan)
    fu_times = np.full(n, np.nan)
    for fi, (v, t, fv, ft) in fi_values.items():
        values[fi], times[fi], fu_values[fi], fu_times[fi] = v, t, fv, ft
    return D.PatientRow(
        subject_id=subject,
        admission_id=admission,
        group=group,
        admit_time=datetime.fromisoformat(admit),
        values=values,
        times=times,
        fu_values=fu_values,
        fu_times=fu_times,
    )


def simple_schema(n=4):
    return D.LabSchema(features=tuple((f"lab{i:02d}", f"lab{i:02d}") for i in range(n)))


def small_cohort():
    schema = simple_schema(2)
    rows = [
        make_row({0: (1.0, 0.0, 1.5, 5.0), 1: (10.0, 2.0, np.nan, np.nan)}, n=2, admission=1),
        make_row({0: (2.0, 0.0, np.nan, np.nan)}, n=2, admission=2, admit="2180-01-01"),
        make_row({0: (3.0, 1.0, 3.5, 2.0), 1: (30.0, 0.0, 31.0, 4.0)}, n=2, admission=3),
    ]
    return D.Cohort(schema=schema, rows=rows)


# ---------------------------------------------------------------------------
# schema and layout
# ---------------------------------------------------------------------------

def test_schema_layout_constants():
    s = simple_schema(3)
    assert s.seq_len == 12
    assert s.value_slot(1) == 4
    assert s.time_slot(1) == 5
    assert s.fu_value_slot(2) == 10
    assert list(s.slot_feature_index()) == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]


def test_schema_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        D.LabSchema(features=(("a", "a"), ("a", "b")))


def test_row_invariant_checks():
    with pytest.raises(ValueError):
        make_row({0: (1.0, -1.0, np.nan, np.nan)}).validate(4)
    with pytest.raises(ValueError):
        make_row({0: (1.0, 5.0, 2.0, 3.0)}).validate(4)  # follow-up before base
    with pytest.raises(ValueError):
        make_row({0: (np.nan, 3.0, np.nan, np.nan)}).validate(4)  # time without value


# ---------------------------------------------------------------------------
# normalizer
# ---------------------------------------------------------------------------

def test_fit_clip_bounds_match_empirical_quantiles():
    schema = simple_schema(1)
    rows = [
        make_row({0: (float(v), 0.0, np.nan, np.nan)}, n=1, admission=i)
        for i, v in enumerate(range(101))
    ]
    cohort = D.Cohort(schema=schema, rows=rows)
    fitted = D.fit_normalizer(cohort, clip_quantiles=(0.01, 0.99))
    st_ = fitted.stats["lab00"]
    assert st_.clip_lo == pytest.approx(1.0, abs=1e-12)
    assert st_.clip_hi == pytest.approx(99.0, abs=1e-12)
    assert st_.vmin == 0.0 and st_.vmax == 100.0


def test_constant_feature_normalizes_to_half():
    stats = D.FeatureStats(vmin=7.0, vmax=7.0, clip_lo=7.0, clip_hi=7.0)
    assert float(D.apply_normalizer(7.0, stats)) == 0.5
    assert float(D.invert_normalizer(0.5, stats)) == 7.0


def test_minmax_boundaries():
    stats = D.FeatureStats(vmin=0.0, vmax=10.0, clip_lo=1.0, clip_hi=9.0)
    assert float(D.apply_normalizer(1.0, stats)) == 0.0
    assert float(D.apply_normalizer(9.0, stats)) == 1.0
    assert float(D.apply_normalizer(5.0, stats)) == 0.5
    # out-of-range input is clipped first
    assert float(D.apply_normalizer(12.0, stats)) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.0, max_value=1e6, allow_nan=False))
def test_normalizer_round_trip_is_clip(x):
    stats = D.FeatureStats(vmin=0.0, vmax=1e6, clip_lo=10.0, clip_hi=1e5)
    clipped = min(max(x, stats.clip_lo), stats.clip_hi)
    back = float(D.invert_normalizer(D.apply_normalizer(x, stats), stats))
    assert abs(back - clipped) <= 1e-9 * max(1.0, abs(clipped))


def test_round_trip_random_batch():
    rng = np.random.default_rng(0)
    stats = D.FeatureStats(vmin=-3.0, vmax=400.0, clip_lo=0.5, clip_hi=250.0)
    xs = rng.uniform(-3, 400, size=1000)
    back = D.invert_normalizer(D.apply_normalizer(xs, stats), stats)
    assert np.max(np.abs(back - np.clip(xs, 0.5, 250.0))) < 1e-9


def test_unfitted_feature_errors():
    cohort = small_cohort()
    with pytest.raises(D.NormalizerStateError):
        D.normalize_slot_matrix(cohort.slot_values(), cohort.schema)


def test_normalize_slot_matrix_uses_per_slot_stats():
    cohort = small_cohort()
    schema = D.fit_normalizer(cohort, clip_quantiles=(0.0, 1.0))
    norm = D.normalize_slot_matrix(cohort.slot_values(), schema)
    # values and follow-up values share the pooled [1, 3.5] range of lab00
    assert norm[0, 0] == pytest.approx((1.0 - 1.0) / 2.5)
    assert norm[2, 2] == pytest.approx((3.5 - 1.0) / 2.5)
    # NaN cells stay NaN
    assert math.isnan(norm[1, 4])


# ---------------------------------------------------------------------------
# split / filter
# ---------------------------------------------------------------------------

def test_temporal_split_edges_and_partition():
    cohort = small_cohort()
    early = datetime.fromisoformat("2170-01-01")
    late = datetime.fromisoformat("2190-01-01")
    tr, te = D.temporal_split(cohort, early)
    assert len(tr) == 0 and len(te) == 3
    tr, te = D.temporal_split(cohort, late)
    assert len(tr) == 3 and len(te) == 0
    mid = datetime.fromisoformat("2179-01-01")
    tr, te = D.temporal_split(cohort, mid)
    assert len(tr) + len(te) == len(cohort)
    ids_tr = {r.admission_id for r in tr.rows}
    ids_te = {r.admission_id for r in te.rows}
    assert ids_tr.isdisjoint(ids_te)


def test_temporal_split_ten_row_fixture():
    schema = simple_schema(1)
    rows = [
        make_row({0: (1.0, 0.0, np.nan, np.nan)}, n=1, admission=i, admit=f"21{70 + i}-06-01")
        for i in range(10)
    ]
    cohort = D.Cohort(schema=schema, rows=rows)
    tr, te = D.temporal_split(cohort, datetime.fromisoformat("2175-01-01"))
    assert (len(tr), len(te)) == (5, 5)


def test_filter_min_observed_boundary_inclusive():
    schema = simple_schema(5)
    # exactly 17 non-missing cells: 4 full quads (16) plus one lone value
    fi_values = {i: (1.0, 0.0, 2.0, 1.0) for i in range(4)}
    fi_values[4] = (1.0, np.nan, np.nan, np.nan)
    row17 = make_row(fi_values, n=5, admission=1)
    assert row17.n_observed_cells() == 17
    row0 = make_row({}, n=5, admission=2)
    cohort = D.Cohort(schema=schema, rows=[row17, row0])
    kept = D.filter_min_observed(cohort, k=17)
    assert [r.admission_id for r in kept.rows] == [1]
    assert len(D.filter_min_observed(cohort, k=0)) == 2


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

def test_mask_ratio_zero_and_one():
    cohort = small_cohort()
    schema = cohort.schema
    row = cohort.rows[0]
    plan0 = D.draw_mask_plan(row, schema, 0.0, seed=1)
    assert not np.any(plan0.states == D.MASKED)
    plan1 = D.draw_mask_plan(row, schema, 1.0, seed=1)
    kinds = schema.slot_kinds()
    value_kind = (kinds == D.SLOT_VALUE) | (kinds == D.SLOT_FU_VALUE)
    base = cohort.slot_states()[0]
    assert np.all(plan1.states[(base == D.OBSERVED) & value_kind] == D.MASKED)
    # times untouched by default
    assert np.all(plan1.states[(base == D.OBSERVED) & ~value_kind] == D.OBSERVED)


def test_mask_times_flag_masks_paired_time():
    cohort = small_cohort()
    row = cohort.rows[0]
    plan = D.draw_mask_plan(row, cohort.schema, 1.0, seed=3, mask_times=True)
    # feature 0 value and its time slot both masked
    assert plan.states[0] == D.MASKED and plan.states[1] == D.MASKED


def test_mask_fraction_concentrates():
    n_feat = 50
    schema = D.LabSchema(features=tuple((f"f{i}", f"f{i}") for i in range(n_feat)))
    base = np.full((200, schema.seq_len), D.MISSING, dtype=np.int8)
    kinds = schema.slot_kinds()
    value_cols = np.where(kinds == D.SLOT_VALUE)[0]
    base[:, value_cols] = D.OBSERVED  # 10_000 observed value cells
    states = D.draw_mask_states(base, schema, 0.25, seed=9)
    frac = np.mean(states[:, value_cols] == D.MASKED)
    assert abs(frac - 0.25) < 0.02


def test_mask_plan_deterministic_and_subset_of_observed():
    cohort = small_cohort()
    row = cohort.rows[2]
    p1 = D.draw_mask_plan(row, cohort.schema, 0.5, seed=11)
    p2 = D.draw_mask_plan(row, cohort.schema, 0.5, seed=11)
    assert np.array_equal(p1.states, p2.states)
    base = cohort.slot_states()[2]
    assert np.all(base[p1.states == D.MASKED] == D.OBSERVED)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32), st.floats(min_value=0, max_value=1))
def test_masked_cells_always_observed_underneath(seed, ratio):
    cohort = small_cohort()
    base = cohort.slot_states()
    states = D.draw_mask_states(base, cohort.schema, ratio, seed=seed)
    assert np.all(base[states == D.MASKED] == D.OBSERVED)
    assert np.all(states[base == D.MISSING] == D.MISSING)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_cohort_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    schema = simple_schema(3)
    rows = []
    for i in range(20):
        fi_values = {}
        for fi in range(3):
            if rng.random() < 0.7:
                v = float(rng.uniform(0, 100))
                t = float(rng.uniform(0, 48))
                if rng.random() < 0.5:
                    fi_values[fi] = (v, t, v + float(rng.uniform(0, 1)), t + float(rng.uniform(1, 24)))
                else:
                    fi_values[fi] = (v, t, np.nan, np.nan)
        rows.append(make_row(fi_values, n=3, admission=i, admit="2178-03-04T05:06:07"))
    cohort = D.Cohort(schema=schema, rows=rows)
    path = tmp_path / "cohort.csv"
    D.save_cohort(path, cohort)
    loaded = D.load_cohort(path)
    assert loaded.schema.feature_ids == schema.feature_ids
    assert len(loaded) == len(cohort)
    for a, b in zip(cohort.rows, loaded.rows):
        assert a.subject_id == b.subject_id and a.admission_id == b.admission_id
        assert a.group == b.group and a.admit_time == b.admit_time
        for name in ("values", "times", "fu_values", "fu_times"):
            x, y = getattr(a, name), getattr(b, name)
            assert np.array_equal(np.isnan(x), np.isnan(y))
            assert np.array_equal(x[~np.isnan(x)], y[~np.isnan(y)])


def test_negative_value_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    header = "subject_id,hadm_id,group,admit_time,npval_a,nptime_a,npval_last_a,nptime_last_a"
    path.write_text(header + "\n1,2,g,2178-01-01T00:00:00,-1,0.0,,\n")
    with pytest.raises(D.ParseError, match="npval_a"):
        D.load_cohort(path)


def test_non_numeric_field_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    header = "subject_id,hadm_id,group,admit_time,npval_a,nptime_a,npval_last_a,nptime_last_a"
    path.write_text(header + "\n1,2,g,2178-01-01T00:00:00,oops,0.0,,\n")
    with pytest.raises(D.ParseError, match="row 1"):
        D.load_cohort(path)


def test_malformed_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,hadm_id,group,admit_time,npval_a\n")
    with pytest.raises(D.ParseError, match="row 0"):
        D.load_cohort(path)


def test_header_only_file_is_empty_cohort(tmp_path):
    path = tmp_path / "empty.csv"
    header = "subject_id,hadm_id,group,admit_time,npval_a,nptime_a,npval_last_a,nptime_last_a"
    path.write_text(header + "\n")
    cohort = D.load_cohort(path)
    assert len(cohort) == 0
    assert cohort.schema.feature_ids == ["a"]


def test_truth_companion_round_trip(tmp_path):
    cohort = small_cohort()
    cohort.truth = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    path = tmp_path / "c.csv"
    D.save_cohort(path, cohort)
    assert (tmp_path / "c.truth.csv").exists()
    loaded = D.load_cohort(path)
    assert np.array_equal(loaded.truth, cohort.truth)


def test_missingness_pattern_preserved(tmp_path):
    cohort = small_cohort()
    path = tmp_path / "c.csv"
    D.save_cohort(path, cohort)
    loaded = D.load_cohort(path)
    assert np.array_equal(cohort.slot_states(), loaded.slot_states())


def test_schema_stats_sidecar_round_trip(tmp_path):
    cohort = small_cohort()
    schema = D.fit_normalizer(cohort, clip_quantiles=(0.0, 1.0))
    path = tmp_path / "schema.json"
    D.save_schema_stats(path, schema)
    loaded = D.load_schema_stats(path)
    assert loaded.features == schema.features
    assert set(loaded.stats) == set(schema.stats)
    for key in schema.stats:
        for attr in ("vmin", "vmax", "clip_lo", "clip_hi"):
            assert getattr(loaded.stats[key], attr) == getattr(schema.stats[key], attr)
