import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcembed import encoder as enc
from bcembed import training as tr
from bcembed.compat import BackwardTransform, TransformRegistry
from bcembed.errors import NumericError, ShapeError, StateError, ValidationError
from bcembed.graph import snapshot_at


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


def test_bpr_values():
    loss, _ = tr.bpr_loss([1.0, 2.0], [0.5, 0.5], [0.5, 0.5])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = tr.bpr_loss([1.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    assert loss == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)
    with pytest.raises(ShapeError):
        tr.bpr_loss(np.ones(3), np.ones(3), np.ones(2))


def test_bpr_gradients():
    rng = np.random.default_rng(0)
    u, p, n = (rng.normal(size=(4, 8)) for _ in range(3))
    _, grads = tr.bpr_loss(u, p, n)
    for arr, g in zip((u, p, n), grads):
        num = central_diff(lambda: tr.bpr_loss(u, p, n)[0], arr)
        assert rel_err(g, num) <= 1e-4


def test_single_step_examples():
    z = np.random.default_rng(0).normal(size=(5, 3))
    assert tr.single_step_alignment_loss(np.eye(3), z, z)[0] == 0.0
    assert tr.single_step_alignment_loss(None, z, z)[0] == 0.0
    loss, _ = tr.single_step_alignment_loss(np.eye(2), np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert loss == 2.0
    with pytest.raises(ValidationError):
        tr.single_step_alignment_loss(np.eye(2), np.zeros((0, 2)), np.zeros((0, 2)))


def test_alignment_gradients():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 5))
    z_new, z_old = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    comps = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), np.eye(3)]
    for f in (lambda: tr.single_step_alignment_loss(w, z_new, z_old),
              lambda: tr.multi_step_alignment_loss(comps, w, z_new, z_old)):
        _, (gw, gz) = f()
        assert rel_err(gw, central_diff(lambda: f()[0], w)) <= 1e-4
        assert rel_err(gz, central_diff(lambda: f()[0], z_new)) <= 1e-4
    # truncation: gradient only reaches the kept coordinates
    _, (gw, gz) = tr.single_step_alignment_loss(None, z_new, z_old)
    assert gw is None and not gz[:, 3:].any()
    assert rel_err(gz, central_diff(lambda: tr.single_step_alignment_loss(None, z_new, z_old)[0],
                                    z_new)) <= 1e-4


def test_multi_step_reduces_to_single():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 4))
    z_new, z_old = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    single = tr.single_step_alignment_loss(w, z_new, z_old)
    multi = tr.multi_step_alignment_loss([np.eye(3)], w, z_new, z_old)
    assert multi[0] == single[0]
    assert np.array_equal(multi[1][0], single[1][0])


def test_multi_step_hand_k2():
    w_hist = np.array([[2.0, 0.0], [1.0, 1.0]])
    z_new = np.array([[1.0, 1.0]])
    z_old = np.zeros((1, 2))
    # delta = (1,1); W delta = (2,2) -> 8; |delta|^2 = 2; mean = 5
    loss, _ = tr.multi_step_alignment_loss([w_hist, np.eye(2)], np.eye(2), z_new, z_old)
    assert loss == 5.0
    zero, _ = tr.multi_step_alignment_loss([w_hist, np.eye(2)], np.eye(2), z_old, z_old)
    assert zero == 0.0


def test_multi_step_from_registry():
    reg = TransformRegistry()
    reg.register(BackwardTransform.linear(1, np.array([[2.0, 0.0], [1.0, 1.0]])))
    b2 = BackwardTransform.linear(2, np.eye(2))
    loss, _ = tr.multi_step_alignment_loss(reg, b2, np.array([[1.0, 1.0]]), np.zeros((1, 2)))
    assert loss == 5.0
    with pytest.raises(StateError):
        tr.multi_step_alignment_loss(reg, BackwardTransform.linear(4, np.eye(2)),
                                     np.ones((1, 2)), np.zeros((1, 2)))


@pytest.fixture(scope="module")
def setup(small_graph, schedule):
    snap = snapshot_at(small_graph, schedule, 1)
    op = enc.build_operator(snap)
    cfg = enc.EncoderConfig(1, 1, 4, small_graph.feature_dim)
    params = enc.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    for name in params.tensors:
        params.tensors[name] = params.tensors[name] + 0.1 * rng.normal(size=params.tensors[name].shape)
    rows = np.concatenate([snap.user_set[:20], op.num_users + snap.item_set[:20]])
    align = tr.AlignmentTarget(rows, rng.normal(size=(len(rows), 3)),
                               [rng.normal(size=(3, 3)), np.eye(3)])
    batch = tr.Batch(snap.edge_users[:16], op.num_users + snap.edge_items[:16],
                     op.num_users + snap.edge_items[16:32])
    weight = rng.normal(size=(3, 4))
    return params, op, batch, align, weight


def test_joint_objective_gradients(setup):
    params, op, batch, align, weight = setup
    params = params.copy()
    weight = weight.copy()

    def f():
        return tr.joint_objective(params, weight, op, batch, align, 16.0)[0]

    _, _, grads = tr.joint_objective(params, weight, op, batch, align, 16.0)
    assert rel_err(grads["B"], central_diff(f, weight)) <= 1e-4
    for name, arr in params.tensors.items():
        sub = arr[:3] if arr.ndim == 2 else arr
        num = central_diff(f, sub)
        assert rel_err(grads[name][:3] if arr.ndim == 2 else grads[name], num) <= 1e-4, name


def test_joint_objective_lambda(setup):
    params, op, batch, align, weight = setup
    t0, parts, _ = tr.joint_objective(params, weight, op, batch, align, 0.0)
    assert t0 == parts["bpr"]
    t1, _, _ = tr.joint_objective(params, weight, op, batch, align, 1.0)
    t2, _, _ = tr.joint_objective(params, weight, op, batch, align, 2.0)
    assert (t2 - t0) == pytest.approx(2 * (t1 - t0), rel=1e-12)
    assert tr.TrainConfig().lam == 16.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_lambda_linearity(setup, a, b):
    params, op, batch, align, weight = setup
    t0 = tr.joint_objective(params, weight, op, batch, align, 0.0)[0]
    ta = tr.joint_objective(params, weight, op, batch, align, a)[0] - t0
    tb = tr.joint_objective(params, weight, op, batch, align, b)[0] - t0
    assert ta * b == pytest.approx(tb * a, rel=1e-9, abs=1e-9)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    tr.adam_step(p, {"w": np.zeros(2)}, tr.OptimizerState(), 1e-3)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_by_hand():
    p = {"w": np.array([0.5])}
    g = 0.2
    tr.adam_step(p, {"w": np.array([g])}, tr.OptimizerState(), 1e-3, weight_decay=0.01)
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    expect = 0.5 - 1e-3 * 0.01 * 0.5 - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p["w"][0] == pytest.approx(expect, abs=1e-15)


def test_adam_non_finite():
    with pytest.raises(NumericError, match="'w'"):
        tr.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, tr.OptimizerState(), 1e-3)


def test_config_validation():
    for kw in ({"lam": -1}, {"epochs": 0}, {"negatives_per_positive": 0}):
        with pytest.raises(ValidationError):
            tr.TrainConfig(**kw)


ARCH = enc.EncoderConfig(0, 1, 8, 32)
CFG = tr.TrainConfig(epochs=8, batch_size=512)


def _arch(k):
    return enc.schedule_config(ARCH, k, dim_growth=4)


@pytest.fixture(scope="module")
def m0(small_graph, schedule):
    return tr.train_version(0, small_graph, schedule, _arch(0), "KeepAll", CFG)


def test_m0_identical_across_methods(small_graph, schedule, m0):
    other = tr.train_version(0, small_graph, schedule, _arch(0), "BCAligner", CFG)
    for name in m0.params.tensors:
        assert np.array_equal(m0.params.tensors[name], other.params.tensors[name])


def test_training_decreases_bpr(small_graph, schedule):
    res = tr.train_version(0, small_graph, schedule, _arch(0), "KeepAll",
                           tr.TrainConfig(epochs=50, batch_size=512))
    assert res.loss_log[-1]["bpr"] < res.loss_log[0]["bpr"]


def test_posthoc_bpr_curve_matches_keepall(small_graph, schedule, m0):
    ka = tr.train_version(1, small_graph, schedule, _arch(1), "KeepAll", CFG)
    ph = tr.train_version(1, small_graph, schedule, _arch(1), "PostLinSLoss", CFG,
                          prev_params=m0.params)
    assert [r["bpr"] for r in ph.loss_log] == [r["bpr"] for r in ka.loss_log]
    assert ph.align_log and ph.transform.kind == "linear"


def test_joint_training_deterministic(small_graph, schedule, m0):
    a = tr.train_version(1, small_graph, schedule, _arch(1), "JointLinSLoss", CFG,
                         prev_params=m0.params)
    b = tr.train_version(1, small_graph, schedule, _arch(1), "JointLinSLoss", CFG,
                         prev_params=m0.params)
    assert np.array_equal(a.transform.weight, b.transform.weight)
    for name in a.params.tensors:
        assert np.array_equal(a.params.tensors[name], b.params.tensors[name])


def test_frozen_previous_encoder(small_graph, schedule, m0):
    before = {n: t.copy() for n, t in m0.params.tensors.items()}
    tr.train_version(1, small_graph, schedule, _arch(1), "BCAligner", CFG, prev_params=m0.params,
                     registry=TransformRegistry())
    for n, t in m0.params.tensors.items():
        assert np.array_equal(before[n], t)


def test_structural_strategies(small_graph, schedule, m0):
    fixed = tr.train_version(1, small_graph, schedule, _arch(1), "FixM0", CFG, prev_params=m0.params)
    assert fixed.params.config.output_dim == 8 and fixed.transform is None
    for n in m0.params.tensors:
        assert np.array_equal(fixed.params.tensors[n], m0.params.tensors[n])
    nt = tr.train_version(1, small_graph, schedule, _arch(1), "JointNoTrans", CFG,
                          prev_params=m0.params)
    assert nt.transform.kind == "notrans" and nt.params.config.output_dim == 12
    with pytest.raises(StateError):
        tr.train_version(1, small_graph, schedule, _arch(1), "JointNoTrans", CFG)
    with pytest.raises(StateError):
        tr.train_version(2, small_graph, schedule, _arch(2), "BCAligner", CFG,
                         prev_params=nt.params)
