"""Test accuracy as the basis grows, against an exact kernel machine.

Run: python3 demos/accuracy_vs_m.py
"""

import numpy as np

from nystrom_tron import TrainConfig, evaluate, train
from nystrom_tron.data import to_csr
from nystrom_tron.kernel import kernel_matrix
from nystrom_tron.reference import solve_full_kernel
from nystrom_tron.synthetic import split, two_spirals
from nystrom_tron.tron import TronConfig

X, y = two_spirals(4000, seed=1, noise=0.8)
tr, te = split(X, y, 3000)
for m in (4, 16, 64, 256):
    model, _ = train(tr, TrainConfig(1.0, 0.5, m))
    print(f"m={m:4d}  accuracy {evaluate(model, te):.4f}")

sub = to_csr(tr[:1000])
alpha = solve_full_kernel(kernel_matrix(sub, sub, 0.5), y[:1000].astype(float), 1.0,
                          cfg=TronConfig(eps_rel=1e-6)).coef
scores = kernel_matrix(to_csr(te, 2), sub, 0.5) @ alpha
print(f"full kernel on 1000 points: {np.mean(np.where(scores >= 0, 1, -1) == y[3000:]):.4f}")
