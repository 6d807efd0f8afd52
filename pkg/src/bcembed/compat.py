"""Backward transformations, their registry and multi-step error analysis.

``B_k`` maps version-``k`` embeddings (dim ``D_k``) onto version ``k-1``
(dim ``D_{k-1}``). The registry keeps ``B_1..B_k`` and eagerly caches every
composite ``W^j_k = W_{j+1} ... W_k`` so conversion to any older version is a
single matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _container
from .encoder import EmbeddingTable
from .errors import ShapeError, StateError, ValidationError, VersionRangeError

REGISTRY_MAGIC = "bcembed-registry"
LINEAR = "linear"
NOTRANS = "notrans"


@dataclass(eq=False)
class BackwardTransform:
    """``kind`` is ``"linear"`` (weight of shape ``(out_dim, in_dim)``) or
    ``"notrans"`` (keep the first ``out_dim`` coordinates)."""

    kind: str
    version: int
    in_dim: int
    out_dim: int
    weight: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == LINEAR:
            if self.weight is None or self.weight.shape != (self.out_dim, self.in_dim):
                raise ShapeError(f"linear B_{self.version} needs a weight of shape "
                                 f"{(self.out_dim, self.in_dim)}")
            if not np.all(np.isfinite(self.weight)):
                raise ValidationError(f"B_{self.version} has non-finite weights")
        elif self.kind == NOTRANS:
            if self.out_dim > self.in_dim:
                raise ValidationError(
                    f"NoTrans B_{self.version} cannot map dim {self.in_dim} up to {self.out_dim}")
            self.weight = None
        else:
            raise ValidationError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def linear(cls, version: int, weight: np.ndarray) -> "BackwardTransform":
        weight = np.asarray(weight, dtype=np.float64)
        return cls(LINEAR, version, weight.shape[1], weight.shape[0], weight)

    @classmethod
    def notrans(cls, version: int, in_dim: int, out_dim: int) -> "BackwardTransform":
        return cls(NOTRANS, version, in_dim, out_dim)

    def matrix(self) -> np.ndarray:
        if self.kind == LINEAR:
            return self.weight
        return truncation_matrix(self.in_dim, self.out_dim)


def truncation_matrix(in_dim: int, out_dim: int) -> np.ndarray:
    return np.eye(out_dim, in_dim)


def apply(transform: BackwardTransform, z: np.ndarray) -> np.ndarray:
    """Apply ``B_k`` to one vector or to the rows of an ``(n, in_dim)`` array."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != transform.in_dim:
        raise ShapeError(f"B_{transform.version} expects dim {transform.in_dim}, got {z.shape[-1]}")
    if transform.kind == NOTRANS:
        return z[..., :transform.out_dim].copy()
    return z @ transform.weight.T


class TransformRegistry:
    def __init__(self):
        self.transforms: list[BackwardTransform] = []
        self.dims: list[int] = []
        self._composites: dict[tuple[int, int], np.ndarray] = {}

    @property
    def latest(self) -> int:
        """Newest version reachable through the registry (0 when empty)."""
        return len(self.transforms)

    def register(self, transform: BackwardTransform) -> None:
        k = self.latest + 1
        if transform.version != k:
            raise StateError(f"expected B_{k}, got B_{transform.version}")
        if self.dims and transform.out_dim != self.dims[-1]:
            raise ShapeError(f"B_{k} maps to dim {transform.out_dim}, "
                             f"but version {k - 1} has dim {self.dims[-1]}")
        if not self.dims:
            self.dims.append(transform.out_dim)
        self.transforms.append(transform)
        self.dims.append(transform.in_dim)
        m = transform.matrix()
        self._composites[(k - 1, k)] = m
        for j in range(k - 1):
            self._composites[(j, k)] = self._composites[(j, k - 1)] @ m

    def transform(self, k: int) -> BackwardTransform:
        if not 1 <= k <= self.latest:
            raise StateError(f"B_{k} is not registered")
        return self.transforms[k - 1]

    def compose(self, j: int, k: int) -> np.ndarray:
        if j < 0 or j >= k:
            raise VersionRangeError(f"composition needs 0 <= j < k, got j={j}, k={k}")
        if k > self.latest:
            raise StateError(f"no backward link B_{k}; registry ends at version {self.latest}")
        return self._composites[(j, k)]

    def historical_composites(self, k: int, dim: int) -> list[np.ndarray]:
        """``[W^0_{k-1}, ..., W^{k-1}_{k-1}]`` with the last entry the identity."""
        if k < 1:
            raise VersionRangeError("historical composites need k >= 1")
        if self.latest < k - 1:
            raise StateError(f"registry ends at version {self.latest}; "
                             f"version {k - 1} composites are unavailable")
        mats = [self.compose(j, k - 1) for j in range(k - 1)]
        return mats + [np.eye(dim)]

    def recompute(self, j: int, k: int) -> np.ndarray:
        out = self.transform(j + 1).matrix()
        for m in range(j + 2, k + 1):
            out = out @ self.transform(m).matrix()
        return out

    def verify_cache(self, atol: float = 0.0) -> bool:
        return all(np.allclose(m, self.recompute(j, k), rtol=0.0, atol=atol)
                   for (j, k), m in self._composites.items())

    def truncated(self, k: int) -> "TransformRegistry":
        """Registry restricted to ``B_1..B_k``."""
        out = TransformRegistry()
        for t in self.transforms[:k]:
            out.register(t)
        return out


def compose(registry: TransformRegistry, j: int, k: int) -> np.ndarray:
    return registry.compose(j, k)


def to_version(registry: TransformRegistry, table: EmbeddingTable, j: int) -> EmbeddingTable:
    """Version-``j`` compatible table from a version-``k`` table."""
    k = table.version
    w = registry.compose(j, k)
    if table.dim != w.shape[1]:
        raise ShapeError(f"table dim {table.dim} does not match D_{k} = {w.shape[1]}")
    return table.map_vectors(lambda x: x @ w.T, version=j)


# ---------------------------------------------------------------------------
# error analysis


@dataclass
class AlignmentErrorRecord:
    j: int
    k: int
    errors: np.ndarray

    @property
    def mean_l2(self) -> float:
        return float(np.linalg.norm(self.errors, axis=-1).mean())


def single_step_error(transform: BackwardTransform, table_k: EmbeddingTable,
                      table_prev: EmbeddingTable, kind: str, node: int) -> np.ndarray:
    if kind == "user":
        return apply(transform, table_k.user(node)) - table_prev.user(node)
    if kind == "item":
        return apply(transform, table_k.item(node)) - table_prev.item(node)
    raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")


def error_decomposition(registry: TransformRegistry, single_step_errors: Sequence[np.ndarray],
                        j: int, k: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Split the multi-step error ``W^j_k z_k - z_j`` into amplified single-step terms.

    ``single_step_errors`` holds ``delta_{j+1} .. delta_k``. The term for
    ``delta_m`` is ``W^j_{m-1} delta_m`` (identity for ``m = j+1``). Works on
    single vectors or row-stacked batches.
    """
    if j < 0 or j >= k:
        raise VersionRangeError(f"need 0 <= j < k, got j={j}, k={k}")
    if len(single_step_errors) != k - j:
        raise ValidationError(f"expected {k - j} single-step errors, got {len(single_step_errors)}")
    terms = [np.asarray(single_step_errors[0], dtype=np.float64)]
    for m, delta in zip(range(j + 2, k + 1), single_step_errors[1:]):
        terms.append(np.asarray(delta, dtype=np.float64) @ registry.compose(j, m - 1).T)
    return sum(terms[1:], terms[0].copy()), terms


def _common_nodes(tables):
    users = tables[0].user_ids
    items = tables[0].item_ids
    for t in tables[1:]:
        users = np.intersect1d(users, t.user_ids)
        items = np.intersect1d(items, t.item_ids)
    return users, items


def error_growth_trace(registry: TransformRegistry, tables: Sequence[EmbeddingTable],
                       alignment_set=None) -> dict[tuple[int, int], float]:
    """Mean ``||W^j_k z_k - z_j||`` for every pair ``j < k``.

    ``tables[v]`` holds version-``v`` embeddings for the same inputs (e.g. all
    historical models evaluated on one snapshot). ``alignment_set`` is a
    ``(user_ids, item_ids)`` pair; by default, the nodes present in all tables.
    """
    for v, t in enumerate(tables):
        if t is None:
            raise StateError(f"missing table for version {v}")
        if t.version != v:
            raise StateError(f"tables[{v}] holds version {t.version}")
    if len(tables) < 2:
        return {}
    users, items = _common_nodes(tables) if alignment_set is None else alignment_set
    stacked = [np.vstack([t.users(users), t.items(items)]) for t in tables]
    out = {}
    for k in range(1, len(tables)):
        for j in range(k):
            delta = stacked[k] @ registry.compose(j, k).T - stacked[j]
            out[(j, k)] = float(np.linalg.norm(delta, axis=1).mean())
    return out


def simulate_error_growth(num_versions: int, dim: int, trials: int, seed: int = 0,
                          weights: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Monte-Carlo mean norm of ``delta^0_k`` for ``k = 1..num_versions-1``.

    Single-step errors are i.i.d. standard normal; links are identities unless
    ``weights`` (``W_1..W_{K}``) are given.
    """
    rng = np.random.default_rng(seed)
    reg = TransformRegistry()
    for k in range(1, num_versions):
        w = np.eye(dim) if weights is None else weights[k - 1]
        reg.register(BackwardTransform.linear(k, w))
    errors = rng.standard_normal(size=(num_versions - 1, trials, dim))
    means = []
    for k in range(1, num_versions):
        total, _ = error_decomposition(reg, list(errors[:k]), 0, k)
        means.append(np.linalg.norm(total, axis=1).mean())
    return np.asarray(means)


# ---------------------------------------------------------------------------
# persistence


def save_registry(registry: TransformRegistry, path) -> None:
    meta = {"transforms": [{"kind": t.kind, "version": t.version, "in_dim": t.in_dim,
                            "out_dim": t.out_dim} for t in registry.transforms],
            "composites": [[j, k] for (j, k) in sorted(registry._composites)]}
    arrays = {f"B{t.version}": t.weight for t in registry.transforms if t.kind == LINEAR}
    for (j, k), m in registry._composites.items():
        arrays[f"W_{j}_{k}"] = m
    _container.save(path, REGISTRY_MAGIC, meta, arrays)


def load_registry(path) -> TransformRegistry:
    meta, arrays = _container.load(path, REGISTRY_MAGIC)
    reg = TransformRegistry()
    for t in meta["transforms"]:
        reg.transforms.append(BackwardTransform(
            t["kind"], t["version"], t["in_dim"], t["out_dim"], arrays.get(f"B{t['version']}")))
        if not reg.dims:
            reg.dims.append(t["out_dim"])
        reg.dims.append(t["in_dim"])
    for j, k in meta["composites"]:
        reg._composites[(j, k)] = arrays[f"W_{j}_{k}"]
    return reg
