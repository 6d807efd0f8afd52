"""Intended/unintended degradation and alignment error, and the per-method runner."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import consumer as cons
from . import encoder as enc
from .compat import TransformRegistry, save_registry, to_version
from .errors import ShapeError, StateError, ValidationError
from .graph import InteractionGraph, VersionSchedule, delta_edges, snapshot_at
from .methods import METHODS, MethodSpec, get_method
from .training import TrainConfig, VersionResult, train_version

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(table: enc.EmbeddingTable, eval_users, eval_items, k_cut: int = 50,
                candidates=None, exclude=None) -> float:
    """Mean per-user Recall@k of dot-product ranking.

    ``candidates`` defaults to every item in ``table``. ``exclude`` is a
    ``(users, items)`` pair of already-seen interactions masked out of each
    user's ranking. Evaluation pairs whose user is not in the table or whose
    item is not a (non-excluded) candidate cannot be retrieved and are dropped.
    Ties rank the smaller item id first.
    """
    cand = np.unique(table.item_ids if candidates is None else np.asarray(candidates))
    if len(cand) == 0:
        raise ValidationError("candidate item set is empty")
    eval_users = np.asarray(eval_users, dtype=np.int64)
    eval_items = np.asarray(eval_items, dtype=np.int64)
    in_users = np.isin(eval_users, table.user_ids) & np.isin(eval_items, cand)
    seen = set()
    if exclude is not None:
        seen = set(zip(np.asarray(exclude[0]).tolist(), np.asarray(exclude[1]).tolist()))
    relevant: dict[int, set] = {}
    for u, i, ok in zip(eval_users.tolist(), eval_items.tolist(), in_users.tolist()):
        if ok and (u, i) not in seen:
            relevant.setdefault(u, set()).add(i)
    if not relevant:
        raise ValidationError("no evaluable edges")

    users = np.asarray(sorted(relevant), dtype=np.int64)
    item_vecs = table.items(cand)
    pos = {int(i): n for n, i in enumerate(cand)}
    masked = {}
    for u, i in seen:
        if u in relevant and i in pos:
            masked.setdefault(u, []).append(pos[i])
    recalls = []
    chunk = max(1, 4_000_000 // len(cand))
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        scores = table.users(block) @ item_vecs.T
        for r, u in enumerate(block.tolist()):
            if u in masked:
                scores[r, masked[u]] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k_cut]
        for r, u in enumerate(block.tolist()):
            hits = relevant[u].intersection(cand[top[r]].tolist())
            recalls.append(len(hits) / len(relevant[u]))
    return float(np.mean(recalls))


def intended_recall(table: enc.EmbeddingTable, graph: InteractionGraph,
                    schedule: VersionSchedule, k: int, k_cut: int = 50) -> float:
    """Recall@k of version-``k`` embeddings on the edges that arrive after ``t_k``."""
    snap = snapshot_at(graph, schedule, k)
    future = delta_edges(graph, schedule, k)
    return recall_at_k(table, graph.users[future], graph.items[future], k_cut,
                       candidates=snap.item_set, exclude=(snap.edge_users, snap.edge_items))


def alignment_error(compat_table: enc.EmbeddingTable, reference: enc.EmbeddingTable,
                    node_set=None) -> float:
    """Mean Euclidean distance between compatible and actual version-0 embeddings."""
    if compat_table.dim != reference.dim:
        raise ShapeError(f"dimension mismatch: {compat_table.dim} vs {reference.dim}")
    users, items = (reference.user_ids, reference.item_ids) if node_set is None else node_set
    a = np.vstack([compat_table.users(users), compat_table.items(items)])
    b = np.vstack([reference.users(users), reference.items(items)])
    return float(np.linalg.norm(a - b, axis=1).mean())


def relative_degradation(perf: float, perf_keepall: float) -> float:
    if perf_keepall == 0:
        raise ZeroDivisionError("Keep-All performance is zero")
    return 100.0 * (perf - perf_keepall) / perf_keepall


# ---------------------------------------------------------------------------
# runner


@dataclass
class BenchmarkConfig:
    num_layers: int = 2
    hidden_dim: int = 256
    dim_growth: int = 64
    grow_until: int | None = None
    deepen_at: int = 2
    extra_layers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: tuple = tuple(cons.TASKS)
    consumer_grid: dict = field(default_factory=lambda: dict(cons.DESK_GRID))
    consumer_seeds: int = 3
    consumer_max_epochs: int = 200
    consumer_patience: int = 10
    k_cut: int = 50
    keep_tables: bool = False

    def base_encoder(self, feature_dim: int) -> enc.EncoderConfig:
        return enc.EncoderConfig(0, self.num_layers, self.hidden_dim, feature_dim)

    def encoder_at(self, feature_dim: int, k: int) -> enc.EncoderConfig:
        return enc.schedule_config(self.base_encoder(feature_dim), k, dim_growth=self.dim_growth,
                                   grow_until=self.grow_until, deepen_at=self.deepen_at,
                                   extra_layers=self.extra_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["consumer_grid"] = {k: list(v) for k, v in self.consumer_grid.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        if "consumer_grid" in d:
            d["consumer_grid"] = {k: tuple(v) for k, v in d["consumer_grid"].items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown benchmark fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsReport:
    """Per-version metrics of one method and, given Keep-All, its degradations.

    ``unintended`` maps ``(task_id, k)`` to ROC-AUC averaged over consumer seeds.
    """

    method: str
    intended: dict[int, float] = field(default_factory=dict)
    unintended: dict[tuple[str, int], float] = field(default_factory=dict)
    unintended_per_seed: dict[tuple[str, int], list] = field(default_factory=dict)
    alignment: dict[int, float] = field(default_factory=dict)

    def updated_versions(self):
        return sorted(k for k in self.intended if k > 0)

    def avg_intended(self) -> float:
        return float(np.mean([self.intended[k] for k in self.updated_versions()]))

    def avg_unintended(self) -> float:
        return float(np.mean(list(self.unintended.values())))

    def avg_alignment(self) -> float:
        return float(np.mean([self.alignment[k] for k in self.updated_versions()]))

    def summary(self, keepall: "MetricsReport") -> dict:
        """Table-style row: metrics are averaged first, then turned into degradations."""
        if keepall is None:
            raise StateError("degradations need the Keep-All report")
        d1 = relative_degradation(self.avg_intended(), keepall.avg_intended())
        d2 = relative_degradation(self.avg_unintended(), keepall.avg_unintended())
        return {"method": self.method, "intended_degradation": d1,
                "unintended_degradation": d2, "combined_degradation": d1 + d2,
                "alignment_error": self.avg_alignment(),
                "intended_recall": self.avg_intended(), "unintended_auc": self.avg_unintended()}

    def per_version_degradation(self, keepall: "MetricsReport") -> list[dict]:
        rows = []
        for k in sorted(self.intended):
            rows.append({"version": k, "metric": "intended_degradation",
                         "value": relative_degradation(self.intended[k], keepall.intended[k])})
            cells = [key for key in self.unintended if key[1] == k]
            if cells:
                ours = np.mean([self.unintended[c] for c in cells])
                ref = np.mean([keepall.unintended[c] for c in cells])
                rows.append({"version": k, "metric": "unintended_degradation",
                             "value": relative_degradation(ours, ref)})
            rows.append({"version": k, "metric": "alignment_error", "value": self.alignment[k]})
        return rows

    def trace_rows(self) -> list[dict]:
        rows = [{"version": k, "metric": "intended_recall", "value": v}
                for k, v in sorted(self.intended.items())]
        rows += [{"version": k, "metric": f"auc_{t}", "value": v}
                 for (t, k), v in sorted(self.unintended.items(), key=lambda x: (x[0][1], x[0][0]))]
        rows += [{"version": k, "metric": "alignment_error", "value": v}
                 for k, v in sorted(self.alignment.items())]
        return rows


@dataclass(eq=False)
class MethodRun:
    method: MethodSpec
    report: MetricsReport
    encoders: list
    registry: TransformRegistry
    consumers: dict
    loss_logs: dict
    tables: list = field(default_factory=list)
    reference_tables: list = field(default_factory=list)
    train_config: TrainConfig | None = None


@dataclass(eq=False)
class _ConsumerBundle:
    """Version-0 consumers per task (one per seed) and their test sets."""

    models: dict
    tests: dict


def _train_consumers(graph, schedule, m0, config: BenchmarkConfig, seed: int):
    models, tests = {}, {}
    tables0 = {}

    def table0(v):
        if v not in tables0:
            tables0[v] = enc.encode_all(m0, snapshot_at(graph, schedule, v))
            tables0[v].version = 0
        return tables0[v]

    for task_id in config.tasks:
        task = cons.get_task(task_id)
        train = cons.build_labels(task, graph, schedule, split="train")
        valid = cons.build_labels(task, graph, schedule, split="valid")
        models[task_id] = [
            cons.train_consumer(task, table0(train.version), train, valid,
                                config.consumer_grid, seed=seed * 1000 + s,
                                valid_table=table0(valid.version),
                                max_epochs=config.consumer_max_epochs,
                                patience=config.consumer_patience)
            for s in range(config.consumer_seeds)]
        tests[task_id] = {k: cons.build_labels(task, graph, schedule, k)
                          for k in range(task.first_test_version, schedule.K + 1)}
    return _ConsumerBundle(models, tests)


def run_benchmark(graph: InteractionGraph, schedule: VersionSchedule, method,
                  config: BenchmarkConfig, reference: MethodRun | None = None,
                  run_dir=None, reuse_encoders: bool = True) -> MethodRun:
    """Train versions ``0..K`` of ``method`` and evaluate all three metrics.

    Every method except Keep-All needs the Keep-All ``reference`` run, whose
    version-0 consumers are reused (consumers are never retrained).  With
    ``reuse_encoders`` the BPR-only encoders (``M_0``, post-hoc methods and
    Non-BC) are taken from the reference instead of being retrained; the
    result is identical, since those encoders share seed and objective.
    """
    method = get_method(method)
    if method.name != "KeepAll" and reference is None:
        raise StateError(f"{method.label} needs a Keep-All reference run")
    tc = config.train
    registry = TransformRegistry()
    report = MetricsReport(method.name)
    encoders, loss_logs, tables, ref_tables = [], {}, [], []
    m0 = None
    bundle = reference.consumers if reference is not None else None
    prev = None

    for k in range(schedule.K + 1):
        snap = snapshot_at(graph, schedule, k)
        op = enc.build_operator(snap)
        trained = None
        if (reuse_encoders and reference is not None and _encoder_only_bpr(method, k)
                and _same_encoder_training(tc, reference)):
            trained = VersionResult(reference.encoders[k], None, None,
                                    reference.loss_logs[k]["encoder"])
        result = train_version(k, graph, schedule, config.encoder_at(graph.feature_dim, k), method, tc,
                               prev_params=prev, registry=registry, op=op, trained=trained)
        if result.transform is not None:
            registry.register(result.transform)
        if k == 0:
            m0 = result.params
            if reference is not None and not _same_params(m0, reference.encoders[0]):
                raise StateError("M_0 differs from the Keep-All reference; configs or seeds disagree")
            if bundle is None:
                bundle = _train_consumers(graph, schedule, m0, config, tc.seed)
        prev = result.params
        encoders.append(result.params)
        loss_logs[k] = {"encoder": result.loss_log, "transform": result.align_log}
        table_k = result.table

        report.intended[k] = intended_recall(table_k, graph, schedule, k, config.k_cut)
        z0 = enc.table_from_output(0, enc.forward(m0, op), op.num_users, snap.user_set, snap.item_set)
        compat0 = _compatible_v0(method, registry, table_k, z0, k)
        report.alignment[k] = alignment_error(compat0, z0)
        for task_id, per_k in bundle.tests.items():
            if k in per_k:
                aucs = [cons.evaluate_consumer(mdl, compat0, per_k[k])
                        for mdl in bundle.models[task_id]]
                report.unintended_per_seed[(task_id, k)] = aucs
                report.unintended[(task_id, k)] = float(np.mean(aucs))
        if config.keep_tables:
            tables.append(table_k)
            ref_tables.append(z0)
        log.info("%s v%d: recall=%.4f align=%.4f", method.label, k, report.intended[k],
                 report.alignment[k])

    run = MethodRun(method, report, encoders, registry, bundle, loss_logs, tables, ref_tables, tc)
    if run_dir is not None:
        write_run(run, run_dir)
    return run


def _encoder_only_bpr(method: MethodSpec, k: int) -> bool:
    return k == 0 or method.strategy in ("posthoc", "independent")


_ENCODER_FIELDS = ("epochs", "learning_rate", "weight_decay", "batch_size",
                   "negatives_per_positive", "seed")


def _same_encoder_training(tc: TrainConfig, reference: MethodRun) -> bool:
    ref = reference.train_config
    return ref is not None and all(getattr(tc, f) == getattr(ref, f) for f in _ENCODER_FIELDS)


def _same_params(a: enc.EncoderParams, b: enc.EncoderParams) -> bool:
    return a.config == b.config and all(np.array_equal(a.tensors[n], b.tensors[n])
                                        for n in a.tensors)


def _compatible_v0(method: MethodSpec, registry, table_k, z0, k):
    if k == 0 or method.strategy in ("independent", "fixed"):
        return z0
    if method.strategy == "finetune":
        return table_k.map_vectors(lambda x: x, version=0)
    return to_version(registry, table_k, 0)


# ---------------------------------------------------------------------------
# artifacts


def write_run(run: MethodRun, run_dir) -> Path:
    out = Path(run_dir) / run.method.name
    out.mkdir(parents=True, exist_ok=True)
    for params in run.encoders:
        enc.save_checkpoint(params, out / f"encoder_v{params.version}.ckpt")
    save_registry(run.registry, out / "registry.bcr")
    for t in run.tables:
        enc.save_table(t, out / f"table_v{t.version}.bct")
    with open(out / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["version", "stage", "epoch", "bpr", "align", "total"])
        for k, logs in sorted(run.loss_logs.items()):
            for stage, rows in logs.items():
                for r in rows:
                    w.writerow([k, stage, r["epoch"], repr(r["bpr"]), repr(r["align"]),
                                repr(r["total"])])
    with open(out / "unintended.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "version", "seed", "roc_auc"])
        for (task, k), aucs in sorted(run.report.unintended_per_seed.items(),
                                      key=lambda x: (x[0][1], x[0][0])):
            for s, a in enumerate(aucs):
                w.writerow([task, k, s, repr(a)])
    write_rows(out / "trace.csv", run.report.trace_rows(), ["version", "metric", "value"])
    with open(out / "report.json", "w") as fh:
        json.dump(report_to_dict(run.report), fh, indent=1, sort_keys=True)
    return out


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})


def report_to_dict(report: MetricsReport) -> dict:
    return {"method": report.method,
            "intended": {str(k): v for k, v in report.intended.items()},
            "alignment": {str(k): v for k, v in report.alignment.items()},
            "unintended": [{"task": t, "version": k, "roc_auc": v,
                            "per_seed": report.unintended_per_seed.get((t, k), [])}
                           for (t, k), v in report.unintended.items()]}


def report_from_dict(d: dict) -> MetricsReport:
    r = MetricsReport(d["method"])
    r.intended = {int(k): v for k, v in d["intended"].items()}
    r.alignment = {int(k): v for k, v in d["alignment"].items()}
    for row in d["unintended"]:
        r.unintended[(row["task"], row["version"])] = row["roc_auc"]
        r.unintended_per_seed[(row["task"], row["version"])] = row["per_seed"]
    return r


SUMMARY_COLUMNS = ["method", "intended_degradation", "unintended_degradation",
                   "combined_degradation", "alignment_error", "intended_recall", "unintended_auc"]


def summary_table(reports: dict[str, MetricsReport]) -> list[dict]:
    """Rows in canonical method order; requires a ``"KeepAll"`` entry."""
    if "KeepAll" not in reports:
        raise StateError("summary needs the Keep-All report")
    ka = reports["KeepAll"]
    return [reports[name].summary(ka) for name in METHODS if name in reports]
