import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfact import dataset as ds
from selfact.errors import ConfigError, DataError


def _write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --------------------------------------------------------------------- CSV


def test_load_without_label_column(tmp_path):
    p = _write(tmp_path, "user,timestamp,x,y,z\na,0.0,1,2,3\na,0.02,1,2,3\na,0.04,4,5,6\n")
    (rec,) = ds.load_csv(p)
    assert rec.user_id == "a" and len(rec) == 3 and rec.labels is None
    np.testing.assert_array_equal(rec.values[2], (4, 5, 6))


def test_label_merge_map(tmp_path):
    p = _write(tmp_path, "user,timestamp,x,y,z,label\n"
                         "a,0,0,0,9.8,stairs up\na,1,0,0,9.8,stairs down\na,2,0,0,9.8,walk\n")
    spec = ds.DatasetSpec(label_merge_map={"stairs up": "stairs", "stairs down": "stairs"})
    (rec,) = ds.load_csv(p, spec)
    assert rec.labels == ("stairs", "stairs", "walk")


def test_label_merge_map_must_be_idempotent():
    with pytest.raises(ConfigError):
        ds.DatasetSpec(label_merge_map={"a": "b", "b": "c"})
    spec = ds.DatasetSpec(label_merge_map={"up": "stairs", "down": "stairs"})
    for label in ("up", "down", "stairs", "walk"):
        assert spec.merge_label(spec.merge_label(label)) == spec.merge_label(label)


def test_user_groups_concatenate_by_timestamp(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for user in ("p1", "p2"):
        ts = np.sort(rng.uniform(0, 10, 15))
        for t in ts:
            rows.append((user, float(t), *map(float, rng.standard_normal(3))))
    text = "user,timestamp,x,y,z\n" + "".join(f"{u},{t!r},{x!r},{y!r},{z!r}\n" for u, t, x, y, z in rows)
    spec = ds.DatasetSpec(user_groups={"p1": "g", "p2": "g"})
    (rec,) = ds.load_csv(_write(tmp_path, text), spec)
    oracle = sorted(rows, key=lambda r: r[1])
    assert rec.user_id == "g"
    np.testing.assert_array_equal(rec.timestamps, [r[1] for r in oracle])
    np.testing.assert_array_equal(rec.values, [r[2:] for r in oracle])


@pytest.mark.parametrize("text,line", [
    ("user,timestamp,x,y,z\na,0,1,2\n", 2),
    ("user,timestamp,x,y,z\na,0,1,2,3\na,1,1,two,3\n", 3),
    ("user,timestamp,x,y,z\na,0,1,2,3\na,1,1,nan,3\n", 3),
    ("user,time,x,y,z\na,0,1,2,3\n", 1),
])
def test_malformed_rows_name_the_line(tmp_path, text, line):
    p = _write(tmp_path, text)
    with pytest.raises(DataError, match=f"{p.name}:{line}"):
        ds.load_csv(p)


def test_non_monotone_timestamps(tmp_path):
    p = _write(tmp_path, "user,timestamp,x,y,z\na,1,0,0,0\nb,0,0,0,0\na,0.5,0,0,0\n")
    with pytest.raises(DataError, match="precedes"):
        ds.load_csv(p)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        ds.load_csv(tmp_path / "nope.csv")


def test_write_then_load_round_trip(tmp_path):
    recs = ds.synth_generate(2, ds.DEFAULT_ACTIVITIES[:2], 3, 0.1, seed=1, window_len=16)
    ds.write_csv(recs, tmp_path / "rt.csv")
    back = ds.load_csv(tmp_path / "rt.csv")
    assert [r.user_id for r in back] == [r.user_id for r in recs]
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)
        assert a.labels == b.labels


def test_recording_invariants():
    with pytest.raises(DataError):
        ds.Recording("u", [1.0, 0.0], np.zeros((2, 3)))
    with pytest.raises(DataError):
        ds.Recording("u", [0.0], np.array([[np.inf, 0, 0]]))
    with pytest.raises(DataError):
        ds.Recording("u", [0.0, 1.0], np.zeros((2, 3)), labels=("a",))


# -------------------------------------------------------------- windowing


def _rec(n, labels=None):
    return ds.Recording("u", np.arange(n, dtype=float), np.arange(3 * n, dtype=float).reshape(n, 3), labels)


def test_segment_examples():
    assert [w.start_index for w in ds.segment(_rec(1000), 400, 0.5)] == [0, 200, 400, 600]
    assert len(ds.segment(_rec(400), 400, 0.5)) == 1
    assert ds.segment(_rec(399), 400, 0.5) == []


@given(st.integers(1, 300), st.integers(1, 64), st.floats(0, 0.95))
@settings(max_examples=150, deadline=None)
def test_segment_matches_enumeration(n, window_len, overlap):
    step = math.floor(window_len * (1 - overlap) + 1e-9)
    if step < 1:
        with pytest.raises(ConfigError):
            ds.segment(_rec(n), window_len, overlap)
        return
    rec = _rec(n)
    wins = ds.segment(rec, window_len, overlap)
    starts = [s for s in range(n) if s % step == 0 and s + window_len <= n]
    assert [w.start_index for w in wins] == starts
    for w in wins:
        np.testing.assert_array_equal(w.values, rec.values[w.start_index:w.start_index + window_len])


@given(st.integers(1, 200), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_non_overlapping_windows_rebuild_a_prefix(n, window_len):
    rec = _rec(n)
    wins = ds.segment(rec, window_len, 0.0)
    if wins:
        joined = np.concatenate([w.values for w in wins])
        np.testing.assert_array_equal(joined, rec.values[:len(joined)])


def test_majority_label_with_earliest_tie_break():
    labels = ["b", "a", "a", "b", "c", "c"]
    (w,) = ds.segment(_rec(6, labels), 6, 0.0)
    assert w.oracle_label == "b"
    (w,) = ds.segment(_rec(5, ["c", "a", "a", "b", "b"]), 5, 0.0)
    assert w.oracle_label == "a"


@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=20))
@settings(max_examples=80, deadline=None)
def test_majority_label_oracle(labels):
    (w,) = ds.segment(_rec(len(labels), labels), len(labels), 0.0)
    counts = Counter(labels)
    top = max(counts.values())
    assert w.oracle_label == next(l for l in labels if counts[l] == top)


# ------------------------------------------------------------- synthetic


def test_synth_window_counts():
    (rec,) = ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:2], 10, 0.0, seed=0)
    wins = ds.segment(rec, 128, 0.0)
    assert len(wins) == 20
    assert Counter(w.oracle_label for w in wins) == {"sitting": 10, "standing": 10}


def test_synth_is_deterministic_and_seed_dependent():
    a = ds.synth_generate(2, ds.DEFAULT_ACTIVITIES[:3], 8, 0.2, seed=4)
    b = ds.synth_generate(2, ds.DEFAULT_ACTIVITIES[:3], 8, 0.2, seed=4)
    c = ds.synth_generate(2, ds.DEFAULT_ACTIVITIES[:3], 8, 0.2, seed=5)
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes() and x.labels == y.labels
    assert a[0].values.tobytes() != c[0].values.tobytes()


def test_synth_bouts_are_contiguous_and_interleaved():
    (rec,) = ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:3], 16, 0.1, seed=2, rounds=4)
    runs = [rec.labels[0]]
    for l in rec.labels[1:]:
        if l != runs[-1]:
            runs.append(l)
    # four rounds of three bouts; adjacent rounds may repeat a label at the seam
    assert 4 * 3 - 3 <= len(runs) <= 4 * 3
    assert Counter(rec.labels) == {a.name: 16 * 128 for a in ds.DEFAULT_ACTIVITIES[:3]}


def test_synth_argument_errors():
    with pytest.raises(ConfigError):
        ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:2], 5, -0.1, seed=0)
    with pytest.raises(ConfigError):
        ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:1], 5, 0.1, seed=0)


def test_synth_disjoint_bands_are_separable_by_the_head():
    from selfact.encoder import StatisticalBackend
    from selfact.finetune import FineTuneConfig, fine_tune
    slow = ds.ActivityPattern("slow", 0.5, (1.0, 1.0, 1.0), (0.0, 0.0, 9.8))
    fast = ds.ActivityPattern("fast", 4.0, (1.0, 1.0, 1.0), (0.0, 0.0, 9.8))
    (rec,) = ds.synth_generate(1, [slow, fast], 20, 0.05, seed=3, wobble_std=0.0, posture_std=0.0)
    samples = [(w, w.oracle_label) for w in ds.segment(rec, 128, 0.0)]
    clf = fine_tune(StatisticalBackend(), samples,
                    FineTuneConfig(epochs=30, hidden=64, validation_fraction=0.0, seed=0))
    preds = [lab for lab, _ in clf.predict_batch([w for w, _ in samples])]
    assert preds == [l for _, l in samples]
