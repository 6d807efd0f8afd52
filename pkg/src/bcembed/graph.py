"""Evolving user-item interaction graph, version snapshots and delta edge sets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _container
from .errors import ParseError, ValidationError, VersionRangeError

GRAPH_MAGIC = "bcembed-graph"
DEFAULT_TIMESTAMPS = (0.5, 0.6, 0.7, 0.8, 0.9)


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    time: float
    rating: int


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Timestamped bipartite interactions, stored column-wise and sorted by time.

    ``item_features`` is a ``(num_items, num_brands + num_subcategories)`` 0/1
    matrix. Items without metadata have an all-zero row.
    """

    num_users: int
    num_items: int
    item_features: np.ndarray
    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    ratings: np.ndarray
    num_brands: int = 0
    user_tokens: tuple = ()
    item_tokens: tuple = ()

    def __post_init__(self):
        n = len(self.users)
        if n == 0:
            raise ValidationError("graph has no interactions")
        if not (len(self.items) == len(self.times) == len(self.ratings) == n):
            raise ValidationError("interaction columns have different lengths")
        if self.item_features.shape[0] != self.num_items:
            raise ValidationError("item_features must have one row per item")
        if self.users.min() < 0 or self.users.max() >= self.num_users:
            raise ValidationError("user_id out of range")
        if self.items.min() < 0 or self.items.max() >= self.num_items:
            raise ValidationError("item_id out of range")
        if self.times.min() < 0.0 or self.times.max() > 1.0:
            raise ValidationError("times must lie in [0, 1]")
        if np.any(np.diff(self.times) < 0):
            raise ValidationError("interactions must be sorted by time")
        if self.ratings.min() < 1 or self.ratings.max() > 5:
            raise ValidationError("ratings must be in 1..5")
        if not np.isin(self.item_features, (0, 1)).all():
            raise ValidationError("item features must be multi-hot (0/1)")
        if not 0 <= self.num_brands <= self.item_features.shape[1]:
            raise ValidationError("num_brands exceeds feature dimension")
        triples = np.stack([self.users, self.items, self.times.view(np.int64)], axis=1)
        if len(np.unique(triples, axis=0)) != n:
            raise ValidationError("duplicate (user, item, time) interaction")

    @property
    def num_interactions(self) -> int:
        return len(self.users)

    @property
    def feature_dim(self) -> int:
        return self.item_features.shape[1]

    @property
    def num_subcategories(self) -> int:
        return self.feature_dim - self.num_brands

    @property
    def interactions(self) -> list[Interaction]:
        return [Interaction(int(u), int(i), float(t), int(r))
                for u, i, t, r in zip(self.users, self.items, self.times, self.ratings)]

    def stats(self) -> dict:
        return {"users": self.num_users, "items": self.num_items,
                "interactions": self.num_interactions, "brands": self.num_brands,
                "subcategories": self.num_subcategories}

    def __eq__(self, other):
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and self.num_brands == other.num_brands
                and self.user_tokens == other.user_tokens
                and self.item_tokens == other.item_tokens
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("item_features", "users", "items", "times", "ratings")))


@dataclass(frozen=True)
class VersionSchedule:
    """Update timestamps ``t_0 < ... < t_K`` in (0, 1); ``t_{K+1}`` is 1."""

    timestamps: tuple = DEFAULT_TIMESTAMPS

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timestamps)
        object.__setattr__(self, "timestamps", ts)
        if len(ts) < 2:
            raise ValidationError("schedule needs at least two timestamps")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise ValidationError("timestamps must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("timestamps must be strictly increasing")

    @property
    def K(self) -> int:
        return len(self.timestamps) - 1

    def t(self, k: int) -> float:
        if not 0 <= k <= self.K + 1:
            raise VersionRangeError(f"no timestamp t_{k} for K={self.K}")
        return 1.0 if k == self.K + 1 else self.timestamps[k]


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Edges observed up to ``t_k`` and the users/items they touch."""

    version: int
    edge_indices: np.ndarray
    user_set: np.ndarray
    item_set: np.ndarray
    graph: InteractionGraph = field(repr=False)

    @property
    def edge_users(self) -> np.ndarray:
        return self.graph.users[self.edge_indices]

    @property
    def edge_items(self) -> np.ndarray:
        return self.graph.items[self.edge_indices]


def _check_version(schedule: VersionSchedule, k: int):
    if not 0 <= k <= schedule.K:
        raise VersionRangeError(f"version {k} outside 0..{schedule.K}")


def edges_until(graph: InteractionGraph, t: float) -> np.ndarray:
    return np.arange(np.searchsorted(graph.times, t, side="right"))


def snapshot_from_edges(graph: InteractionGraph, edge_indices: np.ndarray,
                        version: int = -1) -> Snapshot:
    edge_indices = np.asarray(edge_indices, dtype=np.int64)
    return Snapshot(version=version, edge_indices=edge_indices,
                    user_set=np.unique(graph.users[edge_indices]),
                    item_set=np.unique(graph.items[edge_indices]), graph=graph)


def snapshot_at(graph: InteractionGraph, schedule: VersionSchedule, k: int) -> Snapshot:
    _check_version(schedule, k)
    return snapshot_from_edges(graph, edges_until(graph, schedule.t(k)), version=k)


def delta_edges(graph: InteractionGraph, schedule: VersionSchedule, k: int) -> np.ndarray:
    """Indices of interactions with ``t_k < time <= t_{k+1}``."""
    _check_version(schedule, k)
    lo = np.searchsorted(graph.times, schedule.t(k), side="right")
    hi = np.searchsorted(graph.times, schedule.t(k + 1), side="right")
    return np.arange(lo, hi)


# ---------------------------------------------------------------------------
# ingestion


def _rank_times(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable order of raw timestamps and the rank/N time for each position."""
    order = np.argsort(raw, kind="stable")
    n = len(raw)
    return order, np.arange(1, n + 1, dtype=np.float64) / n


def ingest(path, features_path=None, *, delimiter: str = ",",
           skip_header: bool = False, subcategory_sep: str = "|") -> InteractionGraph:
    """Read an edge list (and optional item-feature file) into a graph.

    Edge rows are ``user_token, item_token, raw_timestamp, rating``. Feature
    rows are ``item_token, brand_token, subcat_1|subcat_2|...``; either token
    field may be empty. Tokens get dense ids in first-seen order. Timestamps
    become the fraction of edges observed so far, ties kept in file order.
    """
    path = Path(path)
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    users, items, raw_times, ratings = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader, start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
            utok, itok, ts, rt = (c.strip() for c in row)
            try:
                ts_val, rt_val = int(ts), int(rt)
            except ValueError:
                raise ParseError(path, lineno, "timestamp and rating must be integers") from None
            if not 1 <= rt_val <= 5:
                raise ValidationError(f"{path}:{lineno}: rating {rt_val} outside 1..5")
            users.append(user_ids.setdefault(utok, len(user_ids)))
            items.append(item_ids.setdefault(itok, len(item_ids)))
            raw_times.append(ts_val)
            ratings.append(rt_val)
    if not users:
        raise ValidationError(f"{path}: no interactions")

    features, num_brands = _read_features(features_path, item_ids, delimiter,
                                          subcategory_sep)
    order, times = _rank_times(np.asarray(raw_times, dtype=np.int64))
    return InteractionGraph(
        num_users=len(user_ids), num_items=len(item_ids), item_features=features,
        users=np.asarray(users, dtype=np.int64)[order],
        items=np.asarray(items, dtype=np.int64)[order],
        times=times, ratings=np.asarray(ratings, dtype=np.int8)[order],
        num_brands=num_brands, user_tokens=tuple(user_ids), item_tokens=tuple(item_ids))


def _read_features(features_path, item_ids, delimiter, subcategory_sep):
    if features_path is None:
        return np.zeros((len(item_ids), 0), dtype=np.uint8), 0
    features_path = Path(features_path)
    brands: dict[str, int] = {}
    subcats: dict[str, int] = {}
    per_item: dict[int, tuple[str, list[str]]] = {}
    with open(features_path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError(features_path, lineno, "expected item_token, brand[, subcategories]")
            itok, brand = row[0].strip(), row[1].strip()
            cats = [c.strip() for field_ in row[2:] for c in field_.split(subcategory_sep)]
            cats = [c for c in cats if c]
            if itok not in item_ids:
                continue
            if brand:
                brands.setdefault(brand, len(brands))
            for c in cats:
                subcats.setdefault(c, len(subcats))
            per_item[item_ids[itok]] = (brand, cats)
    feats = np.zeros((len(item_ids), len(brands) + len(subcats)), dtype=np.uint8)
    for item, (brand, cats) in per_item.items():
        if brand:
            feats[item, brands[brand]] = 1
        for c in cats:
            feats[item, len(brands) + subcats[c]] = 1
    return feats, len(brands)


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(seed: int, num_users: int, num_items: int, num_interactions: int,
                       feature_dim: int, latent_dim: int, *, drift: float = 0.8,
                       sharpness: float = 3.0) -> InteractionGraph:
    """Planted low-rank interaction model with drifting user tastes.

    Users have two latent factors interpolated over time (angle ``drift``
    radians across the full span), activity weights and an active window.
    Items have latent factors, a popularity bias, and multi-hot features read
    off their latent factors, so features carry signal about affinity. Ratings
    grow with item quality and user-item affinity; a latent-driven subset of
    items is polarizing (high rating spread).
    """
    for name, v in (("num_users", num_users), ("num_items", num_items),
                    ("num_interactions", num_interactions), ("feature_dim", feature_dim),
                    ("latent_dim", latent_dim)):
        if v <= 0:
            raise ValidationError(f"{name} must be positive")
    if latent_dim > feature_dim:
        raise ValidationError("latent_dim must not exceed feature_dim")
    rng = np.random.default_rng(seed)
    L = latent_dim

    item_lat = rng.normal(size=(num_items, L))
    user_a = rng.normal(size=(num_users, L))
    user_b = rng.normal(size=(num_users, L))
    popularity = rng.normal(scale=0.5, size=num_items)
    activity = rng.lognormal(sigma=1.0, size=num_users)
    start = rng.uniform(0.0, 0.7, size=num_users)
    stop = np.minimum(1.0, start + rng.uniform(0.3, 1.0, size=num_users))

    num_brands = max(1, feature_dim // 2)
    proj = rng.normal(size=(feature_dim, L))
    logits = item_lat @ proj.T + rng.normal(scale=0.5, size=(num_items, feature_dim))
    features = np.zeros((num_items, feature_dim), dtype=np.uint8)
    features[np.arange(num_items), np.argmax(logits[:, :num_brands], axis=1)] = 1
    n_sub = feature_dim - num_brands
    if n_sub > 0:
        top = np.argsort(-logits[:, num_brands:], axis=1, kind="stable")[:, :min(2, n_sub)]
        features[np.arange(num_items)[:, None], num_brands + top] = 1

    quality = item_lat @ rng.normal(size=L) / np.sqrt(L) + rng.normal(scale=0.3, size=num_items)
    polar = (item_lat @ rng.normal(size=L)) > 0.5 * np.sqrt(L)

    users = rng.choice(num_users, size=num_interactions, p=activity / activity.sum())
    raw_t = start[users] + (stop[users] - start[users]) * rng.uniform(size=num_interactions)
    items = np.empty(num_interactions, dtype=np.int64)
    affinity = np.empty(num_interactions)
    scale = sharpness / np.sqrt(L)
    chunk = max(1, 2_000_000 // num_items)
    for lo in range(0, num_interactions, chunk):
        sl = slice(lo, lo + chunk)
        ang = drift * raw_t[sl, None]
        taste = np.cos(ang) * user_a[users[sl]] + np.sin(ang) * user_b[users[sl]]
        score = scale * taste @ item_lat.T + popularity
        gumbel = rng.gumbel(size=score.shape)
        items[sl] = np.argmax(score + gumbel, axis=1)
        affinity[sl] = np.take_along_axis(score, items[sl, None], axis=1)[:, 0]
    affinity = (affinity - affinity.mean()) / (affinity.std() + 1e-12)
    noise = rng.normal(scale=np.where(polar[items], 2.0, 0.5))
    ratings = np.clip(np.rint(3.6 + 0.8 * quality[items] + 0.4 * affinity + noise), 1, 5)

    order, times = _rank_times(raw_t)
    return InteractionGraph(
        num_users=num_users, num_items=num_items, item_features=features,
        users=users[order].astype(np.int64), items=items[order], times=times,
        ratings=ratings[order].astype(np.int8), num_brands=num_brands)


# ---------------------------------------------------------------------------
# persistence


def save_graph(graph: InteractionGraph, path) -> None:
    meta = {"num_users": graph.num_users, "num_items": graph.num_items,
            "num_brands": graph.num_brands, "user_tokens": list(graph.user_tokens),
            "item_tokens": list(graph.item_tokens)}
    _container.save(path, GRAPH_MAGIC, meta, {
        "item_features": graph.item_features, "users": graph.users, "items": graph.items,
        "times": graph.times, "ratings": graph.ratings})


def load_graph(path) -> InteractionGraph:
    meta, arr = _container.load(path, GRAPH_MAGIC)
    return InteractionGraph(
        num_users=meta["num_users"], num_items=meta["num_items"],
        item_features=arr["item_features"], users=arr["users"], items=arr["items"],
        times=arr["times"], ratings=arr["ratings"], num_brands=meta["num_brands"],
        user_tokens=tuple(meta["user_tokens"]), item_tokens=tuple(meta["item_tokens"]))

