#!/usr/bin/env python3
"""The reverse-mode core on small tensors, checked against finite differences.

Builds a little graph (conv -> batch norm -> relu -> crop -> sum), runs the
backward pass, and compares a few analytic gradient entries with central
differences recomputed in float64.
"""

import numpy as np

import densevox.tensor as T

rng = np.random.default_rng(0)

x = T.Tensor(rng.standard_normal((6, 6, 6, 2)), requires_grad=True)
w = T.Tensor(rng.standard_normal((3, 3, 3, 2, 4)) * 0.4, requires_grad=True)
b = T.Tensor(np.zeros(4), requires_grad=True)
gamma = T.Tensor(np.ones(4), requires_grad=True)
beta = T.Tensor(np.zeros(4), requires_grad=True)


def loss_value():
    h = T.conv3d_valid(x, w, b)
    h = T.batch_norm(h, gamma, beta, np.zeros(4), np.ones(4), "train")
    h = T.relu(h)
    h = T.crop_center(h, (2, 2, 2))
    return T.sum_all(h)


loss = loss_value()
T.backward(loss)
print(f"loss = {float(loss.data):.6f}")
print("gradient shapes:", {t.name or n: g.grad.shape for n, (t, g) in
                           {"x": (x, x), "w": (w, w), "gamma": (gamma, gamma)}.items()})

print("\nanalytic vs central-difference (float64, step 1e-5):")
for name, t in [("w", w), ("gamma", gamma), ("beta", beta)]:
    flat = t.data.reshape(-1)
    idx = rng.integers(0, flat.size, size=3)
    for i in idx:
        keep = flat[i]
        flat[i] = keep + 1e-5
        hi = float(loss_value().data)
        flat[i] = keep - 1e-5
        lo = float(loss_value().data)
        flat[i] = keep
        fd = (hi - lo) / 2e-5
        an = t.grad.reshape(-1)[i]
        print(f"  {name}[{i:3d}]: analytic {an:+.6f}  numeric {fd:+.6f}  "
              f"|diff| {abs(an - fd):.2e}")

# gradients accumulate across consumers: y = relu(x) + relu(x)
x2 = T.Tensor(np.ones(4), requires_grad=True)
two = T.add(T.relu(x2), T.relu(x2))
T.backward(T.sum_all(two))
print("\nsum rule: d/dx [relu(x) + relu(x)] at x=1 ->", x2.grad)

# crop scatters gradient mass into the window and nowhere else
x3 = T.Tensor(np.zeros((4, 4, 4, 1)), requires_grad=True)
T.backward(T.sum_all(T.crop_center(x3, (2, 2, 2))))
print("crop backward mass:", x3.grad.sum(), "placed in the center window:",
      bool(np.all(x3.grad[1:3, 1:3, 1:3] == 1)))
