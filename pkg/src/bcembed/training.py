"""Objectives, Adam, and per-version training for every method.

All gradients are analytic. Alignment losses treat the previous version's
embeddings as constant targets and the historical composites as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .compat import BackwardTransform, TransformRegistry
from .errors import NumericError, ShapeError, StateError, ValidationError
from .graph import InteractionGraph, VersionSchedule, snapshot_at
from .methods import MethodSpec, get_method


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    lam: float = 16.0
    batch_size: int = 1024
    negatives_per_positive: int = 1
    seed: int = 0
    posthoc_epochs: int | None = None
    posthoc_learning_rate: float | None = None
    transform_init: str = "identity"

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.negatives_per_positive < 1:
            raise ValidationError("negatives_per_positive must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.transform_init not in ("identity", "glorot"):
            raise ValidationError("transform_init must be 'identity' or 'glorot'")


# ---------------------------------------------------------------------------
# losses


def bpr_loss(u, pos, neg):
    """Mean ``-log sigmoid(<u,pos> - <u,neg>)`` and its gradients w.r.t. each input."""
    u, pos, neg = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (u, pos, neg))
    if not (u.shape == pos.shape == neg.shape):
        raise ShapeError(f"bpr inputs differ in shape: {u.shape}, {pos.shape}, {neg.shape}")
    n = u.shape[0]
    diff = pos - neg
    x = np.einsum("nd,nd->n", u, diff)
    loss = float(np.logaddexp(0.0, -x).mean())
    dx = -_sigmoid(-x) / n
    return loss, (dx[:, None] * diff, dx[:, None] * u, -dx[:, None] * u)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _transform_forward(weight, z_new, out_dim):
    if weight is None:
        if out_dim > z_new.shape[1]:
            raise ShapeError("identity transform cannot increase dimension")
        return z_new[:, :out_dim]
    if weight.shape[1] != z_new.shape[1]:
        raise ShapeError(f"transform expects dim {weight.shape[1]}, got {z_new.shape[1]}")
    return z_new @ weight.T


def _transform_backward(weight, z_new, g_out):
    """Gradients w.r.t. ``(weight, z_new)`` given the gradient at the output."""
    if weight is None:
        gz = np.zeros_like(z_new)
        gz[:, :g_out.shape[1]] = g_out
        return None, gz
    return g_out.T @ z_new, g_out @ weight


def _weight_of(transform):
    if transform is None or isinstance(transform, np.ndarray):
        return transform
    if isinstance(transform, BackwardTransform):
        return transform.weight
    raise TypeError(f"unsupported transform {type(transform).__name__}")


def single_step_alignment_loss(transform, z_new, z_old):
    """Mean squared distance ``||B(z_new) - z_old||^2`` over the rows.

    ``transform`` is a weight matrix, a :class:`BackwardTransform`, or ``None``
    for the identity/truncation map. Returns ``(loss, (grad_weight, grad_z_new))``.
    """
    z_new = np.atleast_2d(np.asarray(z_new, dtype=np.float64))
    z_old = np.atleast_2d(np.asarray(z_old, dtype=np.float64))
    if len(z_new) == 0:
        raise ValidationError("alignment set is empty")
    if len(z_new) != len(z_old):
        raise ShapeError("new and old embeddings cover different numbers of nodes")
    w = _weight_of(transform)
    delta = _transform_forward(w, z_new, z_old.shape[1]) - z_old
    n = len(delta)
    loss = float(np.sum(delta ** 2) / n)
    return loss, _transform_backward(w, z_new, 2.0 * delta / n)


def multi_step_alignment_loss(composites, transform, z_new, z_old):
    """Average over ``j`` of ``||W^j_{k-1} delta_k||^2``, averaged over the rows.

    ``composites`` is ``[W^0_{k-1}, ..., W^{k-1}_{k-1}]`` (last one the
    identity), e.g. from :meth:`TransformRegistry.historical_composites`. A
    registry may be passed instead, in which case ``k`` is taken from
    ``transform.version``.
    """
    if isinstance(composites, TransformRegistry):
        if not isinstance(transform, BackwardTransform):
            raise StateError("pass a BackwardTransform to resolve composites from a registry")
        composites = composites.historical_composites(transform.version,
                                                      np.atleast_2d(z_old).shape[1])
    z_new = np.atleast_2d(np.asarray(z_new, dtype=np.float64))
    z_old = np.atleast_2d(np.asarray(z_old, dtype=np.float64))
    if len(z_new) == 0:
        raise ValidationError("alignment set is empty")
    if not composites:
        raise StateError("no historical composites supplied")
    w = _weight_of(transform)
    delta = _transform_forward(w, z_new, z_old.shape[1]) - z_old
    n, k = len(delta), len(composites)
    loss = 0.0
    g_delta = np.zeros_like(delta)
    for m in composites:
        if m.shape[1] != delta.shape[1]:
            raise ShapeError(f"composite of shape {m.shape} cannot act on dim {delta.shape[1]}")
        amplified = delta @ m.T
        loss += np.sum(amplified ** 2)
        g_delta += amplified @ m
    loss = float(loss / k / n) if k > 1 else float(loss / n)
    return loss, _transform_backward(w, z_new, 2.0 * g_delta / (k * n))


def amplification_operator(composites) -> np.ndarray:
    """``(1/k) sum_j W^T W``: the quadratic form the multi-step loss puts on ``delta``."""
    return sum(m.T @ m for m in composites) / len(composites)


# ---------------------------------------------------------------------------
# joint objective


@dataclass
class AlignmentTarget:
    """Rows of the encoder output to align and their frozen previous-version targets.

    ``composites`` selects the multi-step loss; ``None`` means single-step.
    """

    rows: np.ndarray
    targets: np.ndarray
    composites: list | None = None

    def loss(self, weight, z_new):
        if self.composites is None:
            return single_step_alignment_loss(weight, z_new, self.targets)
        return multi_step_alignment_loss(self.composites, weight, z_new, self.targets)


@dataclass
class Batch:
    """Global node rows for (user, positive item, negative item) triples."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def joint_objective(params: enc.EncoderParams, weight, op: enc.GraphOperator, batch: Batch,
                    align: AlignmentTarget | None, lam: float):
    """``L_k + lam * L_align`` with gradients for the encoder and the transform.

    Returns ``(total, parts, grads)`` where ``parts`` has the ``bpr`` and
    ``align`` components and ``grads`` maps encoder parameter names (plus
    ``"B"`` for a linear transform) to gradients.
    """
    out, cache = enc.forward(params, op, keep_cache=True)
    bpr, (gu, gp, gn) = bpr_loss(out[batch.users], out[batch.pos], out[batch.neg])
    g_out = np.zeros_like(out)
    np.add.at(g_out, batch.users, gu)
    np.add.at(g_out, batch.pos, gp)
    np.add.at(g_out, batch.neg, gn)
    align_loss = 0.0
    g_weight = None
    if align is not None and lam > 0:
        align_loss, (g_weight, g_z) = align.loss(weight, out[align.rows])
        np.add.at(g_out, align.rows, lam * g_z)
        if g_weight is not None:
            g_weight = lam * g_weight
    elif align is not None:
        align_loss, _ = align.loss(weight, out[align.rows])
    grads = enc.backward(params, op, cache, g_out)
    if weight is not None and align is not None:
        grads["B"] = g_weight if g_weight is not None else np.zeros_like(weight)
    total = bpr + lam * align_loss
    return total, {"bpr": bpr, "align": align_loss}, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, learning_rate: float,
              weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with decoupled weight decay, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= learning_rate * weight_decay * p
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# per-version training


@dataclass
class VersionResult:
    params: enc.EncoderParams
    transform: BackwardTransform | None
    table: enc.EmbeddingTable
    loss_log: list = field(default_factory=list)
    align_log: list = field(default_factory=list)


def _rng(seed: int, k: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, k, stream]))


_ENCODER_INIT, _SAMPLING, _TRANSFORM_INIT = 0, 1, 2


def _positive_pairs(snapshot, num_users):
    pairs = np.unique(np.stack([snapshot.edge_users, snapshot.edge_items], axis=1), axis=0)
    return pairs[:, 0], num_users + pairs[:, 1]


def _alignment_rows(snapshot, num_users):
    return np.concatenate([snapshot.user_set, num_users + snapshot.item_set])


def init_transform_weight(out_dim: int, in_dim: int, seed: int, k: int,
                          kind: str = "identity") -> np.ndarray:
    """Initial ``W_k``: the truncation map (``"identity"``) or Glorot-uniform noise."""
    if kind == "identity":
        return np.eye(out_dim, in_dim)
    return enc.glorot_uniform(_rng(seed, k, _TRANSFORM_INIT), in_dim, out_dim, (out_dim, in_dim))


def fit_encoder(params: enc.EncoderParams, op: enc.GraphOperator, snapshot, config: TrainConfig,
                k: int, weight=None, align: AlignmentTarget | None = None,
                lam: float = 0.0) -> list[dict]:
    """Minimize ``L_k`` (plus ``lam * L_align`` when ``align`` is given) in place."""
    rng = _rng(config.seed, k, _SAMPLING)
    users, pos = _positive_pairs(snapshot, op.num_users)
    item_rows = op.num_users + snapshot.item_set
    r = config.negatives_per_positive
    users, pos = np.repeat(users, r), np.repeat(pos, r)
    tensors = params.tensors
    if weight is not None and align is not None:
        tensors = dict(tensors, B=weight)
    state = OptimizerState()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(users))
        neg = rng.choice(item_rows, size=len(users))
        sums = {"bpr": 0.0, "align": 0.0, "total": 0.0}
        batches = 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = Batch(users[idx], pos[idx], neg[idx])
            total, parts, grads = joint_objective(params, weight, op, batch, align, lam)
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at version {k}, epoch {epoch}")
            adam_step(tensors, grads, state, config.learning_rate, config.weight_decay)
            sums["bpr"] += parts["bpr"]
            sums["align"] += parts["align"]
            sums["total"] += total
            batches += 1
        history.append({"epoch": epoch, **{n: v / batches for n, v in sums.items()}})
    return history


def fit_transform(weight: np.ndarray, z_new: np.ndarray, align: AlignmentTarget,
                  config: TrainConfig) -> list[dict]:
    """Post-hoc fit of a linear transform on frozen embeddings (full-batch Adam)."""
    epochs = config.posthoc_epochs or config.epochs
    lr = config.posthoc_learning_rate or config.learning_rate
    tensors = {"B": weight}
    state = OptimizerState()
    history = []
    for epoch in range(epochs):
        loss, (g_w, _) = align.loss(weight, z_new)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite alignment loss at epoch {epoch}")
        adam_step(tensors, {"B": g_w}, state, lr, config.weight_decay)
        history.append({"epoch": epoch, "bpr": 0.0, "align": loss, "total": loss})
    return history


def train_version(k: int, graph: InteractionGraph, schedule: VersionSchedule,
                  arch: enc.EncoderConfig, method, config: TrainConfig,
                  prev_params: enc.EncoderParams | None = None,
                  registry: TransformRegistry | None = None,
                  op: enc.GraphOperator | None = None,
                  trained: VersionResult | None = None) -> VersionResult:
    """Train version ``k`` of ``method``; the caller registers the returned transform.

    ``arch`` is the version-``k`` architecture (see :func:`schedule_config`);
    Fix-M0 and Finetune-M0 ignore it and keep the architecture of ``M_{k-1}``.
    ``prev_params`` is the frozen ``M_{k-1}``; alignment targets are its
    outputs on the version-``k`` snapshot. ``registry`` must hold
    ``B_1..B_{k-1}`` for the multi-step loss.

    Post-hoc methods and Non-BC train the encoder exactly as Keep-All does;
    ``trained`` may pass in that Keep-All result (same seed and architecture)
    to skip retraining it.
    """
    method: MethodSpec = get_method(method)
    snapshot = snapshot_at(graph, schedule, k)
    op = enc.build_operator(snapshot) if op is None else op
    if k > 0 and prev_params is None and method.strategy != "independent":
        raise StateError(f"{method.label} needs M_{k - 1} to train version {k}")

    if k == 0 or method.strategy == "independent":
        params, history = _fresh_encoder(replace(arch, version=k), op, snapshot, config, k, trained)
        return VersionResult(params, None, enc.encode_all(params, snapshot, op), history)

    if method.strategy == "fixed":
        params = prev_params.with_version(k)
        return VersionResult(params, None, enc.encode_all(params, snapshot, op))

    if method.strategy == "finetune":
        params = prev_params.with_version(k)
        history = fit_encoder(params, op, snapshot, config, k)
        return VersionResult(params, None, enc.encode_all(params, snapshot, op), history)

    cfg = replace(arch, version=k)
    rows = _alignment_rows(snapshot, op.num_users)
    targets = enc.forward(prev_params, op)[rows]
    d_new, d_old = cfg.output_dim, prev_params.config.output_dim
    composites = None
    if method.loss == "multi":
        if registry is None:
            raise StateError("multi-step loss needs the transform registry")
        composites = registry.historical_composites(k, d_old)
    align = AlignmentTarget(rows, targets, composites)
    weight = (init_transform_weight(d_old, d_new, config.seed, k, config.transform_init)
              if method.transform == "linear" else None)

    align_history = []
    if method.strategy == "joint":
        params = enc.init_params(cfg, _encoder_seed(config.seed, k))
        history = fit_encoder(params, op, snapshot, config, k, weight, align, config.lam)
    else:
        params, history = _fresh_encoder(cfg, op, snapshot, config, k, trained)
        if weight is not None:
            align_history = fit_transform(weight, enc.forward(params, op)[rows], align, config)

    transform = (BackwardTransform.linear(k, weight) if weight is not None
                 else BackwardTransform.notrans(k, d_new, d_old))
    return VersionResult(params, transform, enc.encode_all(params, snapshot, op), history,
                         align_history)


def _fresh_encoder(cfg, op, snapshot, config, k, trained):
    """BPR-only encoder for version ``k``, or the Keep-All one passed in."""
    if trained is not None:
        if trained.params.config != cfg:
            raise StateError(f"reused encoder has config {trained.params.config}, expected {cfg}")
        return trained.params, trained.loss_log
    params = enc.init_params(cfg, _encoder_seed(config.seed, k))
    return params, fit_encoder(params, op, snapshot, config, k)


def _encoder_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k, _ENCODER_INIT]).generate_state(1)[0])

