"""Sums over the AllReduce tree follow one fixed order, so runs repeat bit for bit.

The same basis and data give the same objective for any worker count up
to rounding, and every reduced vector equals the serial sum taken in the
tree's pinned order.

Run: python3 demos/deterministic_allreduce.py
"""

from nystrom_tron import TrainConfig, train
from nystrom_tron.allreduce import LocalCluster, pinned_sum
from nystrom_tron.data import to_csr
from nystrom_tron.kernel import BasisSet
from nystrom_tron.synthetic import split, two_spirals

X, y = two_spirals(1500, seed=3, noise=0.6)
tr, _ = split(X, y, 1500)
basis = BasisSet(to_csr(tr[:50]), "given", 0.5)
for p in (1, 2, 4, 8):
    cluster = LocalCluster(p, record=True)
    _, rep = train(tr, TrainConfig(1.0, 0.5, 50, p=p), basis=basis, cluster=cluster)
    rounds = list(zip(*(c.log for c in cluster.comms)))
    same = all(pinned_sum([e[2] for e in r], cluster.topo).tobytes() == r[0][3].tobytes()
               for r in rounds)
    print(f"p={p}  objective {rep.final_objective!r}  {len(rounds)} reductions, "
          f"all equal to pinned serial sums: {same}")
