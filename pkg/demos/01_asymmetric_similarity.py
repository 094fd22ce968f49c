"""How the asymmetric similarity splits gradient between its two arguments.

The value never depends on alpha; only the backward pass does. With alpha=0.3
the first argument receives 30% of the usual gradient and the second 70%.
"""
import numpy as np

from ainfonce import losses as L
from ainfonce import tensor_core as tc

zi, zj = np.array([0.6, 0.8]), np.array([0.0, 1.0])
for alpha in (0.0, 0.3, 0.5, 1.0):
    g = tc.Graph()
    a, b = g.leaf(zi), g.leaf(zj)
    s = L.sim_alpha(a, b, alpha)
    tc.backward(s)
    print(f"alpha={alpha:.1f}  sim={float(s.value):.2f}  d/dzi={a.grad}  d/dzj={b.grad}")

# At alpha=0.5 the batch loss is exactly the symmetric InfoNCE loss.
rng = np.random.default_rng(0)
Z = rng.standard_normal((12, 8))
Z /= np.linalg.norm(Z, axis=1, keepdims=True)
for name, fn in [("infonce", lambda z: L.loss_infonce(z, 4, 0.5)),
                 ("ip alpha=0.5", lambda z: L.loss_ip(z, 4, 0.5, 1.0, 0.5)),
                 ("ip alpha=0.3", lambda z: L.loss_ip(z, 4, 0.3, 1.0, 0.5))]:
    g = tc.Graph()
    z = g.leaf(Z)
    loss = fn(z)
    tc.backward(loss)
    print(f"{name:>13}: loss={float(loss.value):.6f}  |grad|={np.linalg.norm(z.grad):.6f}")
