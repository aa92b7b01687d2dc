"""
Rank correlation with ties
==========================

Scores are compared by Spearman's rho: the Pearson correlation of ranks, with
tied values sharing the average of their ranks. Rescaling either side by any
increasing function leaves rho unchanged.
"""
import numpy as np

from attrmap.data import Sample
from attrmap.evaluation import evaluate, spearman_rho
from attrmap.model import TapNet, TapNetConfig
from attrmap.tensor import seeded_rng

print(spearman_rho([1, 2, 3, 4, 5], [5, 6, 7, 8, 7]))        # the 7s share rank 3.5
x = np.array([0.3, -1.2, 2.5, 0.9, 0.0])
y = np.array([1.0, 0.2, 3.0, 0.5, 0.4])
print(spearman_rho(x, y), spearman_rho(np.exp(x), y ** 3))  # same value

# The report for an untrained network on random labels: rows near zero, in
# the column order of manifests.
rng = seeded_rng(0)
samples = [Sample(rng.random((3, 64, 64)).astype(np.float32),
                  np.r_[rng.uniform(-1, 1, 8), rng.uniform()].astype(np.float32)) for _ in range(60)]
report = evaluate(TapNet.build(TapNetConfig(), seed=0), samples)
print(report.to_text())
print(report.to_csv())
