"""K-means basis points against a random draw on ten Gaussian blobs.

With few basis points, centers found by K-means cover the blobs better
than random training points; with many, both are fine.

Run: python3 demos/kmeans_vs_random.py
"""

from nystrom_tron import TrainConfig, evaluate, train
from nystrom_tron.synthetic import split, ten_blobs

X, y = ten_blobs(6000, seed=0)
tr, te = split(X, y, 5000)
for m in (10, 200):
    for policy in ("random", "kmeans"):
        model, _ = train(tr, TrainConfig(1.0, 2.0, m, basis_policy=policy, p=2))
        print(f"m={m:3d} {policy:6s} accuracy {evaluate(model, te):.4f}")
