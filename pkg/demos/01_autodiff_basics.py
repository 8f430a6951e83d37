import numpy as np

from ddpm_cd import nn
from ddpm_cd.nn import Tensor

# A leaf that tracks gradients
w = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
loss = (w * w).sum()
loss.backward()
print("d/dw sum(w^2) =", w.grad)  # [2, 4, 6]

# Convolution on a tiny image, checked against central differences
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
k = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
nn.conv2d(x, k, padding=1).sum().backward()

i = (0, 1, 2, 2)
h = 1e-5
old = x.data[i]
x.data[i] = old + h
up = nn.conv2d(Tensor(x.data), k, padding=1).data.sum()
x.data[i] = old - h
down = nn.conv2d(Tensor(x.data), k, padding=1).data.sum()
x.data[i] = old
print("analytic", x.grad[i], "numeric", (up - down) / (2 * h))

# Fit a line with Adam
xs = np.linspace(-1, 1, 32)[:, None]
ys = 3 * xs - 0.5
layer = nn.Linear(1, 1, rng=rng)
opt = nn.Adam(layer.parameters(), lr=0.05)
for step in range(300):
    opt.zero_grad()
    nn.mse_loss(layer(Tensor(xs, dtype=np.float32)), ys.astype(np.float32)).backward()
    opt.step()
print("slope %.3f  intercept %.3f" % (layer.weight.data[0, 0], layer.bias.data[0]))
