"""Unintended downstream tasks: rating/activity labels, MLP consumers, ROC-AUC.

Consumers are trained once on version-0 embeddings and later fed whatever
version-0 compatible embeddings the method under test can produce.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import _container
from .encoder import EmbeddingTable
from .errors import DegenerateMetricError, ShapeError, ValidationError, VersionRangeError
from .graph import InteractionGraph, VersionSchedule, delta_edges, edges_until, snapshot_at
from .training import OptimizerState, adam_step

CONSUMER_MAGIC = "bcembed-consumer"
FULL_GRID = {"hidden_dim": (128, 256, 512, 1024), "dropout": (0.0, 0.25, 0.5)}
DESK_GRID = {"hidden_dim": (128, 256), "dropout": (0.0, 0.25)}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    arity: str
    first_test_version: int
    positive_rating: int = 4
    min_reviews: int = 10
    std_threshold: float = 1.0


TASKS = {t.task_id: t for t in [
    TaskSpec("user_activity", "user", 2),
    TaskSpec("user_positive_activity", "user", 2),
    TaskSpec("item_rating_avg", "item", 1),
    TaskSpec("item_rating_std", "item", 1),
    TaskSpec("edge_rating", "edge", 1),
]}


def get_task(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValidationError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


@dataclass(eq=False)
class LabeledExamples:
    """Binary examples whose inputs are embedded at snapshot ``version``."""

    task_id: str
    version: int
    labels: np.ndarray
    users: np.ndarray | None = None
    items: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def inputs(self, table: EmbeddingTable) -> np.ndarray:
        parts = []
        if self.users is not None:
            parts.append(table.users(self.users))
        if self.items is not None:
            parts.append(table.items(self.items))
        return np.hstack(parts)


# ---------------------------------------------------------------------------
# labels


def _item_rating_stats(graph, upto: np.ndarray):
    counts = np.bincount(graph.items[upto], minlength=graph.num_items)
    r = graph.ratings[upto].astype(np.float64)
    sums = np.bincount(graph.items[upto], weights=r, minlength=graph.num_items)
    sq = np.bincount(graph.items[upto], weights=r * r, minlength=graph.num_items)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
        std = np.sqrt(np.maximum(sq / counts - mean ** 2, 0.0))
    return counts, mean, std


def item_avg_threshold(graph: InteractionGraph, schedule: VersionSchedule,
                       min_reviews: int = 10) -> float:
    """Median average rating at ``t_0`` over items with more than ``min_reviews`` reviews."""
    counts, mean, _ = _item_rating_stats(graph, edges_until(graph, schedule.t(0)))
    eligible = counts > min_reviews
    if not eligible.any():
        raise ValidationError(f"no item has more than {min_reviews} reviews at t_0")
    return float(np.median(mean[eligible]))


def _user_labels(task, graph, schedule, k):
    snap = snapshot_at(graph, schedule, k)
    future = delta_edges(graph, schedule, k)
    if task.task_id == "user_positive_activity":
        future = future[graph.ratings[future] >= task.positive_rating]
    active = np.zeros(graph.num_users, dtype=bool)
    active[graph.users[future]] = True
    users = snap.user_set
    return LabeledExamples(task.task_id, k, active[users].astype(np.int64), users=users)


def _item_labels(task, graph, schedule, k, label_horizon):
    counts, _, _ = _item_rating_stats(graph, edges_until(graph, schedule.t(k)))
    items = np.flatnonzero(counts > task.min_reviews)
    _, mean, std = _item_rating_stats(graph, edges_until(graph, schedule.t(label_horizon)))
    if task.task_id == "item_rating_avg":
        value, threshold = mean, item_avg_threshold(graph, schedule, task.min_reviews)
    else:
        value, threshold = std, task.std_threshold
    return LabeledExamples(task.task_id, k, (value[items] > threshold).astype(np.int64),
                           items=items)


def _edge_labels(task, graph, schedule, k, edges):
    snap = snapshot_at(graph, schedule, k)
    known_u = np.zeros(graph.num_users, dtype=bool)
    known_i = np.zeros(graph.num_items, dtype=bool)
    known_u[snap.user_set] = True
    known_i[snap.item_set] = True
    edges = edges[known_u[graph.users[edges]] & known_i[graph.items[edges]]]
    return LabeledExamples(task.task_id, k,
                           (graph.ratings[edges] >= task.positive_rating).astype(np.int64),
                           users=graph.users[edges], items=graph.items[edges])


def build_labels(task, graph: InteractionGraph, schedule: VersionSchedule, k: int | None = None,
                 split: str = "test") -> LabeledExamples:
    """Examples for one task.

    ``split="test"`` builds the version-``k`` evaluation set. ``"train"`` and
    ``"valid"`` build the consumer's fitting sets, whose embedding version is
    fixed by the task (0, or 1 for the user-activity validation set).
    """
    task = get_task(task)
    if split == "test":
        if k is None or not task.first_test_version <= k <= schedule.K:
            raise VersionRangeError(f"{task.task_id} is tested at versions "
                                    f"{task.first_test_version}..{schedule.K}, got {k}")
    elif split not in ("train", "valid"):
        raise ValidationError(f"unknown split {split!r}")

    if task.arity == "user":
        version = {"train": 0, "valid": 1}.get(split, k)
        out = _user_labels(task, graph, schedule, version)
    elif task.arity == "item":
        version, horizon = {"train": (0, 0), "valid": (0, 1)}.get(split, (k, (k or 0) + 1))
        out = _item_labels(task, graph, schedule, version, horizon)
    else:
        if split == "train":
            out = _edge_labels(task, graph, schedule, 0, edges_until(graph, schedule.t(0)))
        else:
            version = 0 if split == "valid" else k
            out = _edge_labels(task, graph, schedule, version, delta_edges(graph, schedule, version))
    if len(out) == 0:
        raise ValidationError(f"{task.task_id}/{split}: no eligible examples")
    return out


# ---------------------------------------------------------------------------
# metric


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve; tied scores count one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ShapeError("labels and scores differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("ROC-AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# MLP consumer


@dataclass(eq=False)
class ConsumerModel:
    task_id: str
    input_dim: int
    hidden_dim: int
    dropout: float
    weights: dict = field(repr=False, default_factory=dict)
    valid_auc: float = float("nan")
    trained: bool = False

    def scores(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"{self.task_id} consumer expects dim {self.input_dim}, got {x.shape[1]}")
        w = self.weights
        h = np.maximum((x - w["mean"]) / w["scale"] @ w["W1"] + w["b1"], 0.0)
        return h @ w["w2"] + w["b2"]


def _init_mlp(rng, input_dim, hidden_dim):
    lim1 = np.sqrt(6.0 / (input_dim + hidden_dim))
    lim2 = np.sqrt(6.0 / (hidden_dim + 1))
    return {"W1": rng.uniform(-lim1, lim1, (input_dim, hidden_dim)), "b1": np.zeros(hidden_dim),
            "w2": rng.uniform(-lim2, lim2, hidden_dim), "b2": np.zeros(())}


def _mlp_grads(w, x, y, dropout, rng):
    z1 = x @ w["W1"] + w["b1"]
    h = np.maximum(z1, 0.0)
    if dropout > 0:
        keep = (rng.uniform(size=h.shape) >= dropout) / (1.0 - dropout)
        h = h * keep
    logit = h @ w["w2"] + w["b2"]
    n = len(y)
    g = (np.exp(-np.logaddexp(0.0, -logit)) - y) / n
    gh = np.outer(g, w["w2"])
    if dropout > 0:
        gh = gh * keep
    gz = gh * (z1 > 0)
    return {"W1": x.T @ gz, "b1": gz.sum(axis=0), "w2": h.T @ g, "b2": np.asarray(g.sum())}


def _fit_one(x_tr, y_tr, x_va, y_va, hidden_dim, dropout, rng, *, max_epochs, patience,
             learning_rate, batch_size):
    w = _init_mlp(rng, x_tr.shape[1], hidden_dim)
    state = OptimizerState()
    best_auc, best_w, stale = -np.inf, None, 0
    for _ in range(max_epochs):
        order = rng.permutation(len(y_tr))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            adam_step(w, _mlp_grads(w, x_tr[idx], y_tr[idx], dropout, rng), state, learning_rate)
        h = np.maximum(x_va @ w["W1"] + w["b1"], 0.0)
        auc = roc_auc(y_va, h @ w["w2"] + w["b2"])
        if auc > best_auc:
            best_auc, best_w, stale = auc, {n: v.copy() for n, v in w.items()}, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best_auc, best_w


def train_consumer(task, table: EmbeddingTable, train: LabeledExamples, valid: LabeledExamples,
                   grid=DESK_GRID, seed: int = 0, *, valid_table: EmbeddingTable | None = None,
                   max_epochs: int = 200, patience: int = 10, learning_rate: float = 1e-3,
                   batch_size: int = 256) -> ConsumerModel:
    """Grid-search a 1-hidden-layer MLP with early stopping on validation ROC-AUC.

    ``table`` embeds the training examples and ``valid_table`` (default: the
    same table) the validation examples; both must be version-0 embeddings.
    Inputs are standardized with training-set statistics, which become part
    of the model.
    """
    task = get_task(task)
    points = list(itertools.product(grid.get("hidden_dim", ()), grid.get("dropout", ())))
    if not points:
        raise ValidationError("consumer grid is empty")
    if table.version != 0 or (valid_table is not None and valid_table.version != 0):
        raise ValidationError("consumers are trained on version-0 embeddings only")
    valid_table = table if valid_table is None else valid_table
    x_tr, y_tr = train.inputs(table), train.labels.astype(np.float64)
    x_va, y_va = valid.inputs(valid_table), valid.labels
    mean = x_tr.mean(axis=0)
    scale = x_tr.std(axis=0)
    scale[scale == 0] = 1.0
    x_tr, x_va = (x_tr - mean) / scale, (x_va - mean) / scale

    best = None
    for n, (hidden, dropout) in enumerate(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
        auc, w = _fit_one(x_tr, y_tr, x_va, y_va, hidden, dropout, rng, max_epochs=max_epochs,
                          patience=patience, learning_rate=learning_rate, batch_size=batch_size)
        if best is None or auc > best[0]:
            best = (auc, hidden, dropout, w)
    auc, hidden, dropout, w = best
    w = dict(w, mean=mean, scale=scale)
    return ConsumerModel(task.task_id, x_tr.shape[1], hidden, dropout, w, auc, True)


def evaluate_consumer(model: ConsumerModel, table: EmbeddingTable,
                      examples: LabeledExamples) -> float:
    return roc_auc(examples.labels, model.scores(examples.inputs(table)))


def save_consumer(model: ConsumerModel, path) -> None:
    meta = {"task_id": model.task_id, "input_dim": model.input_dim,
            "hidden_dim": model.hidden_dim, "dropout": model.dropout,
            "valid_auc": model.valid_auc}
    _container.save(path, CONSUMER_MAGIC, meta, model.weights)


def load_consumer(path) -> ConsumerModel:
    meta, arrays = _container.load(path, CONSUMER_MAGIC)
    return ConsumerModel(weights=arrays, trained=True, **meta)
