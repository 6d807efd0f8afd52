"""Mean-aggregation GraphSAGE encoder over the bipartite user-item graph.

Nodes are indexed globally: users ``0..U-1`` then items ``U..U+I-1``. One
layer computes ``h' = act(W [h || mean_{u in N(v)} h_u] + b)`` with ReLU on
hidden layers and no activation on the last. Item inputs are projected
multi-hot features; a user's input is the mean projected feature of the items
it interacted with (zero when it has none).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import _container
from .errors import ShapeError, ValidationError
from .graph import Snapshot

CHECKPOINT_MAGIC = "bcembed-encoder"
TABLE_MAGIC = "bcembed-table"


@dataclass(frozen=True)
class EncoderConfig:
    version: int
    num_layers: int
    hidden_dim: int
    input_feature_dim: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be positive")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim


def schedule_config(base: EncoderConfig, k: int, *, dim_growth: int = 64,
                    grow_until: int | None = None, deepen_at: int = 2,
                    extra_layers: int = 1) -> EncoderConfig:
    """Architecture of version ``k`` grown from the version-0 ``base``.

    The width grows by ``dim_growth`` per version (frozen after ``grow_until``
    when given); ``extra_layers`` are added from version ``deepen_at`` on.
    """
    if k < 0:
        raise ValidationError("version must be non-negative")
    steps = k if grow_until is None else min(k, grow_until)
    layers = base.num_layers + (extra_layers if k >= deepen_at else 0)
    return replace(base, version=k, num_layers=layers,
                   hidden_dim=base.hidden_dim + dim_growth * steps)


def param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    d = config.hidden_dim
    shapes = {"proj": (config.input_feature_dim, d)}
    for layer in range(config.num_layers):
        shapes[f"W{layer}"] = (d, 2 * d)
        shapes[f"b{layer}"] = (d,)
    return shapes


@dataclass
class EncoderParams:
    """Weights of one encoder version keyed by name (``proj``, ``W{l}``, ``b{l}``)."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            raise ShapeError(f"expected parameters {sorted(shapes)}, got {sorted(self.tensors)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    @property
    def version(self) -> int:
        return self.config.version

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def with_version(self, k: int) -> "EncoderParams":
        return EncoderParams(replace(self.config, version=k),
                             {n: v.copy() for n, v in self.tensors.items()})


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape)
        elif name == "proj":
            tensors[name] = glorot_uniform(rng, shape[0], shape[1], shape)
        else:
            tensors[name] = glorot_uniform(rng, shape[1], shape[0], shape)
    return EncoderParams(config, tensors)


# ---------------------------------------------------------------------------
# message passing


@dataclass(frozen=True, eq=False)
class GraphOperator:
    """Sparse mean-aggregation operators for one snapshot.

    ``agg`` maps node states to the mean of neighbor states; ``lift`` maps
    projected item features to layer-0 inputs for all nodes.
    """

    num_users: int
    num_items: int
    agg: sp.csr_matrix
    lift: sp.csr_matrix
    features: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items


def _row_mean(m: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.asarray(m.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg, dtype=np.float64), where=deg > 0)
    return sp.diags(inv) @ m


def build_operator(snapshot: Snapshot) -> GraphOperator:
    graph = snapshot.graph
    U, I = graph.num_users, graph.num_items
    ui = sp.csr_matrix((np.ones(len(snapshot.edge_indices)),
                        (snapshot.edge_users, snapshot.edge_items)), shape=(U, I))
    ui.data[:] = 1.0  # repeated interactions count once
    user_mean = _row_mean(ui)
    item_mean = _row_mean(ui.T.tocsr())
    agg = sp.bmat([[None, user_mean], [item_mean, None]], format="csr")
    lift = sp.vstack([user_mean, sp.identity(I, format="csr")], format="csr")
    return GraphOperator(U, I, agg, lift, graph.item_features.astype(np.float64))


def forward(params: EncoderParams, op: GraphOperator, *, keep_cache: bool = False):
    """Embeddings for every node in the graph, shape ``(U + I, D)``.

    With ``keep_cache`` also returns the intermediates :func:`backward` needs.
    """
    t = params.tensors
    if op.features.shape[1] != t["proj"].shape[0]:
        raise ShapeError("feature dimension does not match the encoder's input projection")
    projected = op.features @ t["proj"]
    h = op.lift @ projected
    cache = []
    L = params.config.num_layers
    for layer in range(L):
        neigh = op.agg @ h
        z = np.hstack([h, neigh]) @ t[f"W{layer}"].T + t[f"b{layer}"]
        cache.append((h, neigh, z))
        h = z if layer == L - 1 else np.maximum(z, 0.0)
    return (h, cache) if keep_cache else h


def backward(params: EncoderParams, op: GraphOperator, cache, grad_out: np.ndarray):
    """Gradients of a scalar loss w.r.t. every parameter given ``dLoss/dOutput``."""
    t = params.tensors
    grads = {}
    L = params.config.num_layers
    d = params.config.hidden_dim
    g = grad_out
    for layer in reversed(range(L)):
        h, neigh, z = cache[layer]
        if layer != L - 1:
            g = g * (z > 0)
        W = t[f"W{layer}"]
        grads[f"W{layer}"] = g.T @ np.hstack([h, neigh])
        grads[f"b{layer}"] = g.sum(axis=0)
        g_cat = g @ W
        g = g_cat[:, :d] + op.agg.T @ g_cat[:, d:]
    grads["proj"] = op.features.T @ (op.lift.T @ g)
    return grads


# ---------------------------------------------------------------------------
# embedding tables


@dataclass(eq=False)
class EmbeddingTable:
    """Per-version user and item vectors for the nodes of one snapshot."""

    version: int
    user_ids: np.ndarray
    user_vectors: np.ndarray
    item_ids: np.ndarray
    item_vectors: np.ndarray

    def __post_init__(self):
        if self.user_vectors.shape[1] != self.item_vectors.shape[1]:
            raise ShapeError("user and item vectors differ in dimension")
        if len(self.user_ids) != len(self.user_vectors) or len(self.item_ids) != len(self.item_vectors):
            raise ShapeError("ids and vectors differ in length")
        self._user_pos = {int(u): n for n, u in enumerate(self.user_ids)}
        self._item_pos = {int(i): n for n, i in enumerate(self.item_ids)}

    @property
    def dim(self) -> int:
        return self.user_vectors.shape[1]

    def user(self, user_id: int) -> np.ndarray:
        return self.user_vectors[self._user_pos[int(user_id)]]

    def item(self, item_id: int) -> np.ndarray:
        return self.item_vectors[self._item_pos[int(item_id)]]

    def users(self, ids) -> np.ndarray:
        return self.user_vectors[[self._user_pos[int(u)] for u in ids]]

    def items(self, ids) -> np.ndarray:
        return self.item_vectors[[self._item_pos[int(i)] for i in ids]]

    def has_user(self, user_id) -> bool:
        return int(user_id) in self._user_pos

    def has_item(self, item_id) -> bool:
        return int(item_id) in self._item_pos

    def stacked(self) -> np.ndarray:
        return np.vstack([self.user_vectors, self.item_vectors])

    def map_vectors(self, fn, version: int | None = None) -> "EmbeddingTable":
        """New table with ``fn`` applied to the stacked ``(n, D)`` vector block."""
        out = fn(self.stacked())
        n = len(self.user_ids)
        return EmbeddingTable(self.version if version is None else version,
                              self.user_ids.copy(), out[:n], self.item_ids.copy(), out[n:])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (self.version == other.version
                and np.array_equal(self.user_ids, other.user_ids)
                and np.array_equal(self.item_ids, other.item_ids)
                and np.array_equal(self.user_vectors, other.user_vectors)
                and np.array_equal(self.item_vectors, other.item_vectors))


def table_from_output(version: int, out: np.ndarray, num_users: int,
                      user_ids, item_ids) -> EmbeddingTable:
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    return EmbeddingTable(version, user_ids, out[user_ids], item_ids, out[num_users + item_ids])


def _check_node(op: GraphOperator, kind: str, node: int) -> int:
    if kind == "user":
        if not 0 <= node < op.num_users:
            raise KeyError(f"unknown user {node}")
        return node
    if kind == "item":
        if not 0 <= node < op.num_items:
            raise KeyError(f"unknown item {node}")
        return op.num_users + node
    raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")


def encode(params: EncoderParams, snapshot: Snapshot, kind: str, node: int) -> np.ndarray:
    """Embedding of one user or item given the neighborhoods in ``snapshot``.

    Any node of the graph may be encoded; nodes without edges in the snapshot
    are encoded from a zero (user) or feature-only (item) neighborhood.
    """
    op = build_operator(snapshot)
    return forward(params, op)[_check_node(op, kind, int(node))]


def encode_all(params: EncoderParams, snapshot: Snapshot,
               op: GraphOperator | None = None) -> EmbeddingTable:
    op = build_operator(snapshot) if op is None else op
    out = forward(params, op)
    return table_from_output(params.version, out, op.num_users, snapshot.user_set,
                             snapshot.item_set)


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(params: EncoderParams, path) -> None:
    c = params.config
    meta = {"version": c.version, "num_layers": c.num_layers, "hidden_dim": c.hidden_dim,
            "input_feature_dim": c.input_feature_dim}
    _container.save(path, CHECKPOINT_MAGIC, meta, params.tensors)


def load_checkpoint(path) -> EncoderParams:
    meta, arrays = _container.load(path, CHECKPOINT_MAGIC)
    return EncoderParams(EncoderConfig(**meta), arrays)


def save_table(table: EmbeddingTable, path) -> None:
    _container.save(path, TABLE_MAGIC, {"version": table.version}, {
        "user_ids": table.user_ids, "user_vectors": table.user_vectors,
        "item_ids": table.item_ids, "item_vectors": table.item_vectors})


def load_table(path) -> EmbeddingTable:
    meta, a = _container.load(path, TABLE_MAGIC)
    return EmbeddingTable(meta["version"], a["user_ids"], a["user_vectors"],
                          a["item_ids"], a["item_vectors"])
