"""How well m basis points reconstruct the full kernel matrix.

Run: python3 demos/approx_error.py
"""

from nystrom_tron.cli import approx_error_rows
from nystrom_tron.data import from_dense
from nystrom_tron.synthetic import two_spirals

X, y = two_spirals(800, seed=4, noise=0.8)
for row in approx_error_rows(from_dense(X, y), sigma=0.5, ms=[5, 20, 80, 320, 800]):
    print(f"m={row['m']:4d}  frobenius {row['frobenius_rel']:.3e}  spectral {row['spectral_rel']:.3e}")
