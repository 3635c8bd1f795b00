"""Train a Nystrom kernel machine on two spirals, then score held-out points.

Run: python3 demos/train_and_predict.py
"""

from nystrom_tron import TrainConfig, evaluate, predict, train
from nystrom_tron.synthetic import split, two_spirals

X, y = two_spirals(3000, seed=0, noise=0.8)
tr, te = split(X, y, 2500)

# 4 simulated workers on threads; 128 random basis points
model, report = train(tr, TrainConfig(lam=1.0, sigma=0.5, m=128, p=4), test_data=te)

print("per-step seconds:", {k: round(v, 4) for k, v in report.step_times.items()})
print("TRON:", report.tron_trace.status, "after", report.tron_trace.n_accepted, "iterations")
print(f"objective {report.final_objective:.6f}, test accuracy {report.test_accuracy:.4f}")
print("first labels:", predict(model, te[:10]).tolist())
assert evaluate(model, te) == report.test_accuracy
