"""Back-of-envelope step-4 communication time from a latency/bandwidth model.

Each TRON iteration costs about five collective calls, each with a fixed
latency C plus D seconds per byte for B bytes.

Run: python3 demos/comm_cost.py
"""

from nystrom_tron.allreduce import CommCostModel, estimate_comm_cost

m = 10_000
for latency in (1e-4, 1e-2, 1.0):  # LAN RPC, slow network, Hadoop-style round
    model = CommCostModel(latency, per_byte_cost=1e-9, bytes_per_call=8 * m)
    print(f"C={latency:g}s: 300 iterations -> {estimate_comm_cost(300, 5, model):.1f}s")
