"""Grow the basis in stages, warm-starting each stage from the last.

The padded coefficients give the same objective as the previous stage's
optimum, so every stage starts where the last one stopped.

Run: python3 demos/stagewise.py
"""

from nystrom_tron import TrainConfig, train
from nystrom_tron.synthetic import split, two_spirals
from nystrom_tron.tron import TronConfig

X, y = two_spirals(3000, seed=2, noise=0.8)
tr, te = split(X, y, 2500)
tight = TronConfig(eps_rel=1e-8)
model, rep = train(tr, TrainConfig(1.0, 0.5, [16, 32, 64, 128], p=3, tron=tight), test_data=te)
for s in rep.stages:
    print(f"m={s.m:4d}  f_start {s.f_start:.6f}  f_final {s.f_final:.6f}"
          f"  TRON iterations {s.trace.n_accepted}")
print(f"test accuracy {rep.test_accuracy:.4f}")

# a cold start on the final basis reaches the same optimum
_, cold = train(tr, TrainConfig(1.0, 0.5, 128, p=3, tron=tight), basis=model.basis)
print(f"cold start m=128: f_final {cold.final_objective:.6f}")
