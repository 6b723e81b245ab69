"""How the power loss treats confident and uncertain predictions.

Run with ``python3 demos/power_loss_landscape.py``. Prints the normalized
two-class gradient magnitudes of the entropy and of the power sum for a
few exponents, then a coarse text map of the three-class surface.
"""

import numpy as np

from arpm.losses import alpha_power, alpha_power_surface, simplex_grid, two_class_gradient

p = np.array([0.52, 0.55, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
print("normalized |d loss / dp| for two classes")
print("     p  entropy" + "".join(f"  alpha={a}" for a in (2, 4, 8)))
ent = two_class_gradient(p)
curves = [two_class_gradient(p, a) for a in (2, 4, 8)]
for i, q in enumerate(p):
    print(f"  {q:.2f}  {ent[i]:7.3f}" + "".join(f"  {c[i]:7.3f}" for c in curves))
print("\nAfter normalization, a larger exponent puts much less pull on near-even")
print("predictions: at p=0.55 the alpha=8 curve is about a tenth of the alpha=2 one.")

print("\nvalue of sum p^a at a few simplex points")
points = np.array([[1, 0, 0], [0.8, 0.1, 0.1], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])
for a in (2, 6):
    print(f"  alpha={a}: " + "  ".join(f"{v:.3f}" for v in alpha_power(points, a)))

grid = simplex_grid(10)
_, grad = alpha_power_surface(grid, 6)
print(f"\nalpha=6 gradient norm on a {len(grid)}-point grid: "
      f"min {grad.min():.4f}, median {np.median(grad):.4f}, max {grad.max():.4f}")
