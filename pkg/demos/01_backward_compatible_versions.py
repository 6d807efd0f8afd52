"""Train a few encoder versions and keep their embeddings usable by an old consumer.

A consumer model is fit once on version-0 embeddings. Each later encoder is
trained jointly with a linear backward link ``B_k`` to its predecessor, so the
newest embeddings can be mapped back to version 0 on the fly and fed to the
untouched consumer.

Run with ``python3 demos/01_backward_compatible_versions.py`` (a few seconds).
"""
import numpy as np

from bcembed import BenchmarkConfig, TrainConfig, VersionSchedule, generate_synthetic, run_benchmark
from bcembed import to_version
from bcembed.evaluation import alignment_error

graph = generate_synthetic(0, 300, 120, 8000, 16, 6)
schedule = VersionSchedule()
print(f"graph: {graph.num_users} users, {graph.num_items} items, {len(graph.users)} interactions")

cfg = BenchmarkConfig(num_layers=1, hidden_dim=16, dim_growth=8, deepen_at=3,
                      train=TrainConfig(epochs=20, batch_size=512),
                      tasks=("edge_rating", "item_rating_avg"),
                      consumer_grid={"hidden_dim": (32,), "dropout": (0.0,)},
                      consumer_seeds=1, consumer_max_epochs=50, keep_tables=True)

# Keep-All retrains everything and keeps every model; it is the reference.
keepall = run_benchmark(graph, schedule, "KeepAll", cfg)
bc = run_benchmark(graph, schedule, "BCAligner", cfg, reference=keepall)

print("\nversion  dim  recall@50  ||B z_k - z_0|| (mean)")
for k, table in enumerate(bc.tables):
    print(f"{k:7d} {table.dim:4d} {bc.report.intended[k]:10.4f}  {bc.report.alignment[k]:.4f}")

# The conversion is just a matrix product with the cached composite W^0_k.
latest = bc.tables[-1]
back = to_version(bc.registry, latest, 0)
print(f"\nlatest table has dim {latest.dim}; converted back to version 0 it has dim {back.dim}")
print("error vs the real version-0 model on the same snapshot:",
      round(alignment_error(back, keepall.reference_tables[-1]), 4))

print("\nfrozen consumer ROC-AUC (Keep-All uses the real M_0 at every version):")
for (task, k), auc in sorted(bc.report.unintended.items(), key=lambda x: (x[0][1], x[0][0])):
    print(f"  {task:16s} v{k}: BC-Aligner {auc:.3f}  Keep-All {keepall.report.unintended[(task, k)]:.3f}")

w = bc.registry.compose(0, schedule.K)
print("\nsingular values of W^0_K:", np.round(np.linalg.svd(w, compute_uv=False)[:6], 3))
