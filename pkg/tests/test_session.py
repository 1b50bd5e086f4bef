import numpy as np
import pytest

from oracles import pairwise_avg, replay_trace
from selfact import clusterstore as cs
from selfact import dataset as ds
from selfact.encoder import StatisticalBackend
from selfact.errors import ConfigError, PipelineError
from selfact.session import (Phase, Session, SessionConfig, active_learning_needed, replay_decisions)


class PointBackend:
    """Embeds a window as its first row, so tests can place points directly."""

    name = "point"

    def embed(self, window):
        return window.values[0]


def _w(x, y, label="a", i=0):
    return ds.SensorWindow(np.array([[x, y, 0.0]]), "u", i, label)


def _store(points):
    return cs.build_store(np.array(points, dtype=float), [0] * len(points))


# ---------------------------------------------------- the density decision


def test_interior_point_triggers_query():
    assert active_learning_needed(_store([(0, 0), (2, 0)]), 0, (1, 0))
    assert pairwise_avg([(0, 0), (2, 0), (1, 0)]) == pytest.approx(4 / 3)


def test_far_point_is_silent():
    assert not active_learning_needed(_store([(0, 0), (2, 0)]), 0, (10, 0))
    assert pairwise_avg([(0, 0), (2, 0), (10, 0)]) == pytest.approx(20 / 3)


def test_duplicate_member_lowers_average():
    assert active_learning_needed(_store([(0, 0), (2, 0)]), 0, (0, 0))


def test_singleton_cluster_never_queries_for_distinct_point():
    store = _store([(1, 1)])
    assert not active_learning_needed(store, 0, (1.0001, 1))
    # a coincident point leaves the average at 0, and 0 < 0 is false
    assert not active_learning_needed(store, 0, (1, 1))


def test_equal_average_is_not_a_query():
    # coincident members: the average stays 0 when another copy joins
    store = _store([(0, 0), (0, 0)])
    assert not active_learning_needed(store, 0, (0, 0))


@pytest.mark.parametrize("seed", range(30))
def test_decision_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((int(rng.integers(1, 15)), 2))
    p = rng.standard_normal(2) * rng.uniform(0.1, 4)
    expected = pairwise_avg(list(pts) + [p]) < pairwise_avg(pts)
    assert active_learning_needed(_store(pts), 0, p) == expected


def test_interior_points_never_raise_density_threshold():
    rng = np.random.default_rng(0)
    ring = [(np.cos(t) * 5, np.sin(t) * 5) for t in np.linspace(0, 2 * np.pi, 12, endpoint=False)]
    store = _store(ring)
    last = store.get(0).t_c
    for p in rng.uniform(-0.5, 0.5, size=(40, 2)):
        cs.insert(store, 0, p)
        assert store.get(0).t_c <= last + 1e-12
        last = store.get(0).t_c


# --------------------------------------------------------- state machine


def _config(acc_th, **kw):
    return SessionConfig(acc_th=acc_th, eps=kw.pop("eps", 1.5), min_pts=kw.pop("min_pts", 2), **kw)


def test_counter_semantics():
    s = Session(_config(5), PointBackend())
    pts = [(0, 0), (1, 0), (0, 1), (10, 10), (11, 10)]
    kinds = [s.process_sample(_w(*p, i=i)).kind for i, p in enumerate(pts)]
    assert kinds == ["accumulated"] * 4 + ["clusters_built"]
    assert s.phase is Phase.ACTIVE_LEARNING
    assert s.events[-1].cluster_count == s.cluster_count == 2


def test_query_and_silent_after_threshold():
    s = Session(_config(4, out_dim=1, eps=2.5), PointBackend())
    for i, p in enumerate([(0, 0), (2, 0), (50, 0), (52, 0)]):
        s.process_sample(_w(*p, i=i))
    assert s.cluster_count == 2
    ev = s.process_sample(_w(1, 0, "walk"))
    assert ev.kind == "query" and ev.label == "walk"
    assert len(s.labeled_samples) == 1
    size_before = s.store.get(ev.cluster_id).size
    ev = s.process_sample(_w(-20, 0, "walk"))
    assert ev.kind == "silent" and len(s.labeled_samples) == 1
    assert s.store.get(ev.cluster_id).size == size_before + 1


def test_every_post_threshold_sample_grows_exactly_one_cluster():
    rng = np.random.default_rng(1)
    s = Session(_config(20, eps=1.0, min_pts=3), PointBackend())
    for i, p in enumerate(rng.standard_normal((20, 2))):
        s.process_sample(_w(*p, i=i))
    for i, p in enumerate(rng.standard_normal((60, 2)) * 2):
        sizes = {c: s.store.get(c).size for c in s.store.clusters}
        ev = s.process_sample(_w(*p, i=20 + i))
        after = {c: s.store.get(c).size for c in s.store.clusters}
        assert sum(after.values()) == sum(sizes.values()) + 1
        assert after[ev.cluster_id] == sizes[ev.cluster_id] + 1
    assert len(s.labeled_samples) == s.queries_issued


def test_all_noise_accumulation_fails():
    s = Session(_config(3, eps=0.1, min_pts=3), PointBackend())
    s.process_sample(_w(0, 0))
    s.process_sample(_w(5, 0))
    with pytest.raises(PipelineError, match="accumulation insufficient"):
        s.process_sample(_w(0, 5))


def test_finish_rules():
    s = Session(_config(3), PointBackend())
    s.process_sample(_w(0, 0))
    with pytest.raises(PipelineError, match="accumulation never completed"):
        s.finish()
    s.process_sample(_w(0.5, 0))
    s.process_sample(_w(1, 0))
    res = s.finish()
    assert (res.queries_issued, res.stream_samples_in_al_phase, res.labeled_samples) == (0, 0, [])
    with pytest.raises(PipelineError):
        s.finish()
    with pytest.raises(PipelineError):
        s.process_sample(_w(0, 0))


def test_config_validation():
    with pytest.raises(ConfigError):
        SessionConfig(acc_th=2, out_dim=2)
    with pytest.raises(ConfigError):
        SessionConfig(eps=-1.0)
    with pytest.raises(ConfigError):
        SessionConfig(backend="umap")


def test_query_without_oracle_label_is_an_error():
    s = Session(_config(4, out_dim=1, eps=2.5), PointBackend())
    for i, p in enumerate([(0, 0), (2, 0), (50, 0), (52, 0)]):
        s.process_sample(_w(*p, i=i))
    with pytest.raises(PipelineError, match="carries no label"):
        s.process_sample(_w(1, 0, label=None))


# ------------------------------------------------ traces on synthetic data


@pytest.fixture(scope="module")
def synth_windows():
    rec = ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:4], 40, 0.3, seed=11)[0]
    return ds.segment(rec, 128, 0.5)


def _run(windows, acc_th):
    s = Session(SessionConfig(acc_th=acc_th), StatisticalBackend())
    for w in windows:
        s.process_sample(w)
    return s


def _parse_trace(lines):
    assert lines[0] == "seq,phase,event,cluster_id,queried,label"
    return [row.split(",") for row in lines[1:]]


def test_trace_replays_against_brute_force_oracle(synth_windows):
    s = _run(synth_windows, 200)
    rows = _parse_trace(s.trace_lines())
    assert len(rows) == len(synth_windows)
    points = [r.split(",") for r in s.point_lines()[1:]]
    acc = [(np.array(p[2:], float), int(p[1])) for p in points[:200]]
    stream = [(np.array(p[2:], float), int(p[1])) for p in points[200:]]
    replay = replay_decisions([a for a, _ in acc], [l for _, l in acc], [a for a, _ in stream],
                              [c for _, c in stream])
    recorded = [r[4] == "1" for r in rows[200:]]
    assert replay == recorded
    assert replay_trace(s.trace_lines(), s.point_lines()) == [(int(r[0]), r[4] == "1") for r in rows[200:]]
    assert sum(recorded) == s.queries_issued > 0
    # queried rows carry the oracle label, silent rows none
    for r, w in zip(rows[200:], synth_windows[200:]):
        assert (r[5] == w.oracle_label) if r[4] == "1" else r[5] == ""


def test_sessions_are_deterministic(synth_windows):
    assert _run(synth_windows, 150).trace_lines() == _run(synth_windows, 150).trace_lines()


def test_phase_column_and_single_cluster_event(synth_windows):
    rows = _parse_trace(_run(synth_windows, 120).trace_lines())
    assert [r[2] for r in rows].count("clusters_built") == 1
    assert rows[119][2] == "clusters_built"
    assert all(r[1] == "accumulating" for r in rows[:120])
    assert all(r[1] == "active_learning" for r in rows[120:])
