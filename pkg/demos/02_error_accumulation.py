"""How alignment errors pile up along a chain of backward links.

Mapping version k back to version j composes ``B_{j+1} .. B_k``. The total
error is a sum of the single-step errors, each pushed through the links
between it and version j. With independent noise and identity links, the
errors add like a random walk: their mean norm grows with the square root of
the number of hops, not linearly.
"""
import numpy as np

from bcembed.compat import BackwardTransform, TransformRegistry, error_decomposition, simulate_error_growth

rng = np.random.default_rng(1)

# a small chain with shrinking dimensions 6 -> 5 -> 4 -> 3 (newest first)
dims = [3, 4, 5, 6]
reg = TransformRegistry()
for k in range(1, len(dims)):
    reg.register(BackwardTransform.linear(k, rng.normal(size=(dims[k - 1], dims[k])) / 2))
z = [rng.normal(size=dims[v]) for v in range(len(dims))]
deltas = [reg.transform(m).matrix() @ z[m] - z[m - 1] for m in range(1, len(dims))]

direct = reg.compose(0, 3) @ z[3] - z[0]
total, terms = error_decomposition(reg, deltas, 0, 3)
print("direct multi-step error  :", np.round(direct, 6))
print("sum of amplified terms   :", np.round(total, 6))
for m, t in enumerate(terms, start=1):
    print(f"  term from delta_{m}: norm {np.linalg.norm(t):.4f}")

print("\nidentity links, unit Gaussian single-step errors, dim 16, 2000 trials")
means = simulate_error_growth(9, 16, 2000, seed=0)
for g, m in enumerate(means, start=1):
    print(f"  hops {g}: mean ||error|| {m:6.3f}   / sqrt(hops) {m / np.sqrt(g):6.3f}   / hops {m / g:6.3f}")

# contracting links damp old errors; expanding links amplify them
for scale in (0.7, 1.3):
    w = [scale * np.eye(16)] * 8
    m = simulate_error_growth(9, 16, 2000, seed=0, weights=w)
    print(f"links = {scale} I: mean error after 8 hops {m[-1]:.2f}")
