from collections import deque

import numpy as np
import pytest

from bcembed import encoder as enc
from bcembed.errors import ShapeError
from bcembed.graph import snapshot_at, snapshot_from_edges

from conftest import toy_graph


def test_schedule_default():
    base = enc.EncoderConfig(0, 2, 256, 740)
    cfgs = [enc.schedule_config(base, k) for k in range(5)]
    assert [c.output_dim for c in cfgs] == [256, 320, 384, 448, 512]
    assert [c.num_layers for c in cfgs] == [2, 2, 3, 3, 3]
    assert enc.schedule_config(base, 0) == base


def test_schedule_capped_growth():
    base = enc.EncoderConfig(0, 1, 256, 2580)
    cfgs = [enc.schedule_config(base, k, grow_until=2) for k in range(5)]
    assert [c.output_dim for c in cfgs] == [256, 320, 384, 384, 384]
    assert [c.num_layers for c in cfgs] == [1, 1, 2, 2, 2]


def test_init_deterministic_and_zero_bias():
    cfg = enc.EncoderConfig(0, 2, 16, 8)
    a, b = enc.init_params(cfg, 3), enc.init_params(cfg, 3)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert not np.array_equal(a.tensors["W0"], enc.init_params(cfg, 4).tensors["W0"])
    assert all(not a.tensors[f"b{l}"].any() for l in range(2))


def test_init_variance():
    p = enc.init_params(enc.EncoderConfig(0, 1, 256, 256), 0)
    w = p.tensors["proj"]
    assert w.shape == (256, 256)
    assert w.var() == pytest.approx(2.0 / 512, rel=0.2)


def _perturbed(cfg, seed=0):
    p = enc.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name in p.tensors:
        if name.startswith("b"):
            p.tensors[name] = rng.normal(size=p.tensors[name].shape)
    return p


def test_isolated_user_gets_zero_input():
    g = toy_graph([[0, 0, 5], [0, 1, 4]], np.eye(2), num_users=2)
    snap = snapshot_from_edges(g, np.arange(2))
    p = _perturbed(enc.EncoderConfig(0, 2, 3, 2))
    t = p.tensors
    h = np.zeros(3)
    h = np.maximum(t["W0"] @ np.concatenate([h, h]) + t["b0"], 0)
    h = t["W1"] @ np.concatenate([h, np.zeros(3)]) + t["b1"]
    assert np.allclose(enc.encode(p, snap, "user", 1), h)


def test_identical_items_identical_embeddings():
    feats = np.array([[1, 0], [1, 0], [0, 1]])
    g = toy_graph([[0, 0, 5], [0, 1, 4], [1, 0, 3], [1, 1, 2], [1, 2, 1]], feats)
    snap = snapshot_from_edges(g, np.arange(5))
    p = _perturbed(enc.EncoderConfig(0, 2, 4, 2))
    assert np.allclose(enc.encode(p, snap, "item", 0), enc.encode(p, snap, "item", 1))


def test_one_layer_hand_evaluation():
    # users u0: {i0, i1}, u1: {i1}
    feats = np.array([[1, 0, 1], [0, 1, 0]])
    g = toy_graph([[0, 0, 5], [0, 1, 4], [1, 1, 3]], feats)
    snap = snapshot_from_edges(g, np.arange(3))
    p = _perturbed(enc.EncoderConfig(0, 1, 2, 3))
    P, W, b = p.tensors["proj"], p.tensors["W0"], p.tensors["b0"]
    x = feats @ P
    h_u = np.array([(x[0] + x[1]) / 2, x[1]])
    h_i = x
    expect_u0 = W @ np.concatenate([h_u[0], (h_i[0] + h_i[1]) / 2]) + b
    expect_i1 = W @ np.concatenate([h_i[1], (h_u[0] + h_u[1]) / 2]) + b
    expect_i0 = W @ np.concatenate([h_i[0], h_u[0]]) + b
    assert np.allclose(enc.encode(p, snap, "user", 0), expect_u0)
    assert np.allclose(enc.encode(p, snap, "item", 1), expect_i1)
    assert np.allclose(enc.encode(p, snap, "item", 0), expect_i0)


def test_unknown_node(small_graph, schedule):
    snap = snapshot_at(small_graph, schedule, 0)
    p = enc.init_params(enc.EncoderConfig(0, 1, 4, small_graph.feature_dim), 0)
    with pytest.raises(KeyError):
        enc.encode(p, snap, "user", small_graph.num_users)
    with pytest.raises(KeyError):
        enc.encode(p, snap, "item", -1)


def test_encode_all_consistency(small_graph, schedule):
    snap = snapshot_at(small_graph, schedule, 1)
    p = enc.init_params(enc.EncoderConfig(1, 2, 8, small_graph.feature_dim), 0)
    table = enc.encode_all(p, snap)
    assert len(table.user_ids) == len(snap.user_set)
    assert len(table.item_ids) == len(snap.item_set)
    assert table.dim == 8
    rng = np.random.default_rng(0)
    for u in rng.choice(snap.user_set, 5):
        assert np.allclose(table.user(u), enc.encode(p, snap, "user", u))
    for i in rng.choice(snap.item_set, 5):
        assert np.allclose(table.item(i), enc.encode(p, snap, "item", i))


def _hop_distances(snapshot, source):
    adj = {}
    for u, i in zip(snapshot.edge_users.tolist(), snapshot.edge_items.tolist()):
        adj.setdefault(("user", u), set()).add(("item", i))
        adj.setdefault(("item", i), set()).add(("user", u))
    dist = {source: 0}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for w in adj.get(v, ()):
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def test_receptive_field(small_graph, schedule):
    g = small_graph
    before = snapshot_at(g, schedule, 0)
    n = len(before.edge_indices)
    pairs = set(zip(before.edge_users.tolist(), before.edge_items.tolist()))
    m = next(e for e in range(n, g.num_interactions)
             if (int(g.users[e]), int(g.items[e])) not in pairs)
    after = snapshot_from_edges(g, np.append(before.edge_indices, m))
    new_u, new_i = int(g.users[m]), int(g.items[m])
    layers = 2
    p = enc.init_params(enc.EncoderConfig(0, layers, 8, g.feature_dim), 1)
    op_a, op_b = enc.build_operator(before), enc.build_operator(after)
    out_a, out_b = enc.forward(p, op_a), enc.forward(p, op_b)
    # a node can only change if an endpoint of the new edge is within reach in
    # either graph; distances measured in the new graph bound both
    near = set()
    for src in (("user", new_u), ("item", new_i)):
        near |= {v for v, d in _hop_distances(after, src).items() if d <= layers}
    changed = np.flatnonzero(~np.all(np.isclose(out_a, out_b, rtol=0, atol=1e-12), axis=1))
    for row in changed:
        node = ("user", row) if row < g.num_users else ("item", row - g.num_users)
        assert node in near
    assert len(changed) > 0


def test_inductive_unseen_nodes(small_graph, schedule):
    p = enc.init_params(enc.EncoderConfig(0, 2, 8, small_graph.feature_dim), 0)
    s0, s4 = snapshot_at(small_graph, schedule, 0), snapshot_at(small_graph, schedule, 4)
    unseen = np.setdiff1d(s4.user_set, s0.user_set)
    assert len(unseen) > 0
    table = enc.encode_all(p, s4)
    assert np.all(np.isfinite(table.users(unseen)))


def test_backward_matches_finite_differences(small_graph, schedule):
    snap = snapshot_at(small_graph, schedule, 0)
    op = enc.build_operator(snap)
    p = _perturbed(enc.EncoderConfig(0, 2, 5, small_graph.feature_dim), 2)
    rng = np.random.default_rng(0)
    weights = rng.normal(size=(op.num_nodes, 5))

    def f():
        return float(np.sum(enc.forward(p, op) * weights))

    _, cache = enc.forward(p, op, keep_cache=True)
    grads = enc.backward(p, op, cache, weights)
    for name, arr in p.tensors.items():
        for idx in list(np.ndindex(arr.shape))[:12]:
            old = arr[idx]
            arr[idx] = old + 1e-6
            fp = f()
            arr[idx] = old - 1e-6
            fm = f()
            arr[idx] = old
            num = (fp - fm) / 2e-6
            assert abs(num - grads[name][idx]) <= 1e-4 * max(1.0, abs(num)), name


def test_checkpoint_roundtrip(tmp_path):
    p = enc.init_params(enc.EncoderConfig(2, 3, 7, 5), 9)
    enc.save_checkpoint(p, tmp_path / "m.ckpt")
    q = enc.load_checkpoint(tmp_path / "m.ckpt")
    assert q.config == p.config
    for name in p.tensors:
        assert q.tensors[name].tobytes() == p.tensors[name].tobytes()


def test_table_roundtrip(tmp_path, small_graph, schedule):
    p = enc.init_params(enc.EncoderConfig(0, 1, 4, small_graph.feature_dim), 0)
    t = enc.encode_all(p, snapshot_at(small_graph, schedule, 0))
    enc.save_table(t, tmp_path / "t.bct")
    assert enc.load_table(tmp_path / "t.bct") == t


def test_param_shape_validation():
    cfg = enc.EncoderConfig(0, 1, 4, 3)
    p = enc.init_params(cfg, 0)
    bad = dict(p.tensors, W0=np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        enc.EncoderParams(cfg, bad)
