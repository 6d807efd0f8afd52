import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcembed.errors import ParseError, ValidationError, VersionRangeError
from bcembed.graph import (VersionSchedule, delta_edges, generate_synthetic, ingest, load_graph,
                           save_graph, snapshot_at)

from conftest import toy_graph


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_ingest_single_row(tmp_path):
    g = ingest(write(tmp_path / "e.csv", "u0,i0,42,5\n"))
    assert (g.num_users, g.num_items, g.num_interactions) == (1, 1, 1)
    assert g.times.tolist() == [1.0]


def test_ingest_rank_rescaling(tmp_path):
    g = ingest(write(tmp_path / "e.csv", "a,x,30,1\nb,y,10,2\nc,x,40,3\na,z,20,4\n"))
    assert g.times.tolist() == [0.25, 0.5, 0.75, 1.0]
    # stable sort by raw time: b(10), a(20), a(30), c(40)
    assert g.ratings.tolist() == [2, 4, 1, 3]
    assert g.user_tokens == ("a", "b", "c")
    assert g.item_tokens == ("x", "y", "z")


def test_ingest_ties_keep_file_order(tmp_path):
    g = ingest(write(tmp_path / "e.csv", "a,x,5,1\nb,x,5,2\nc,x,5,3\n"))
    assert g.ratings.tolist() == [1, 2, 3]
    assert np.all(np.diff(g.times) > 0)


def test_ingest_features(tmp_path):
    e = write(tmp_path / "e.csv", "u,i1,1,5\nu,i2,2,4\nv,i3,3,3\n")
    f = write(tmp_path / "f.csv", "i2,acme,guitar|strings\ni1,zen,guitar\nunused,foo,bar\n")
    g = ingest(e, f)
    assert g.num_brands == 2 and g.num_subcategories == 2
    # brands acme, zen; subcategories guitar, strings
    assert g.item_features.tolist() == [[0, 1, 1, 0], [1, 0, 1, 1], [0, 0, 0, 0]]


@pytest.mark.parametrize("text, exc", [
    ("u,i,1\n", ParseError),
    ("u,i,abc,5\n", ParseError),
    ("u,i,1,6\n", ValidationError),
    ("u,i,1,0\n", ValidationError),
    ("", ValidationError),
])
def test_ingest_errors(tmp_path, text, exc):
    with pytest.raises(exc):
        ingest(write(tmp_path / "e.csv", text))


def test_parse_error_names_line(tmp_path):
    with pytest.raises(ParseError, match=":2:"):
        ingest(write(tmp_path / "e.csv", "u,i,1,5\nbad row\n"))


def test_synthetic_determinism():
    a = generate_synthetic(7, 200, 100, 5000, 32, 8)
    b = generate_synthetic(7, 200, 100, 5000, 32, 8)
    c = generate_synthetic(8, 200, 100, 5000, 32, 8)
    assert a == b
    assert not np.array_equal(a.items, c.items)


def test_synthetic_persisted_bytes_identical(tmp_path):
    save_graph(generate_synthetic(7, 200, 100, 5000, 32, 8), tmp_path / "a.bcg")
    save_graph(generate_synthetic(7, 200, 100, 5000, 32, 8), tmp_path / "b.bcg")
    assert (tmp_path / "a.bcg").read_bytes() == (tmp_path / "b.bcg").read_bytes()


def test_synthetic_invariants(small_graph):
    g = small_graph
    assert g.times.max() == 1.0 and g.times.min() > 0
    assert set(np.unique(g.ratings)) <= {1, 2, 3, 4, 5}
    assert (g.item_features.sum(axis=1) >= 1).all()
    assert g.feature_dim == 32


@pytest.mark.parametrize("args", [(1, 0, 10, 10, 4, 2), (1, 10, 0, 10, 4, 2),
                                  (1, 10, 10, 0, 4, 2), (1, 10, 10, 10, 1, 2)])
def test_synthetic_validation(args):
    with pytest.raises(ValidationError):
        generate_synthetic(*args)


def test_graph_roundtrip(tmp_path, small_graph):
    save_graph(small_graph, tmp_path / "g.bcg")
    assert load_graph(tmp_path / "g.bcg") == small_graph


def test_snapshot_threshold():
    g = toy_graph([[0, 0, 5], [0, 1, 4]], np.eye(2))
    g = type(g)(**{**g.__dict__, "times": np.array([0.1, 0.7])})
    s = VersionSchedule((0.5, 0.6, 0.8))
    snap = snapshot_at(g, s, 0)
    assert snap.edge_indices.tolist() == [0]
    assert snap.item_set.tolist() == [0]
    assert delta_edges(g, s, 1).tolist() == [1]


def test_snapshot_counts(small_graph, schedule):
    n = small_graph.num_interactions
    assert len(snapshot_at(small_graph, schedule, 0).edge_indices) == n // 2
    assert abs(len(snapshot_at(small_graph, schedule, 4).edge_indices) - 0.9 * n) <= 1
    assert abs(len(delta_edges(small_graph, schedule, 0)) - 0.1 * n) <= 1
    assert delta_edges(small_graph, schedule, 4)[-1] == n - 1


def test_musical_instruments_counts():
    # counting oracle on the published interaction count, independent of the store
    n = 231_312
    times = np.arange(1, n + 1) / n
    assert int(np.sum(times <= 0.5)) == 115_656
    assert abs(int(np.sum((times > 0.5) & (times <= 0.6))) - 23_131) <= 1


def test_schedule_validation():
    for ts in [(0.5,), (0.5, 0.5), (0.6, 0.5), (0.0, 0.5), (0.5, 1.0)]:
        with pytest.raises(ValidationError):
            VersionSchedule(ts)
    s = VersionSchedule()
    assert s.K == 4 and s.t(5) == 1.0


def test_version_range(small_graph, schedule):
    with pytest.raises(VersionRangeError):
        snapshot_at(small_graph, schedule, 5)
    with pytest.raises(VersionRangeError):
        delta_edges(small_graph, schedule, -1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=6, unique=True))
def test_snapshot_partition_and_monotonicity(small_graph, ts):
    s = VersionSchedule(tuple(sorted(ts)))
    g = small_graph
    snaps = [snapshot_at(g, s, k) for k in range(s.K + 1)]
    deltas = [delta_edges(g, s, k) for k in range(s.K + 1)]
    for a, b in zip(snaps, snaps[1:]):
        assert set(a.edge_indices) <= set(b.edge_indices)
    covered = np.concatenate([snaps[0].edge_indices] + deltas)
    assert sorted(covered.tolist()) == list(range(g.num_interactions))
    for k, snap in enumerate(snaps):
        assert np.array_equal(snap.edge_indices, np.flatnonzero(g.times <= s.t(k)))
        assert set(snap.user_set) == set(g.users[snap.edge_indices])
        assert not set(deltas[k]) & set(snap.edge_indices)
