"""Tour of the tensor core: building graphs, reverse-mode gradients,
and checking them against finite differences by hand."""

import numpy as np

from attacklab import tensor as T

# Tensors are immutable float64 arrays; ops build a graph behind the
# scenes when any input is grad-tracked.
a = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
b = T.Tensor([[5.0], [6.0]])
product = T.matmul(a, b)
print("A @ B =", product.data.ravel().tolist())

loss = T.tsum(product)
grads = T.backward(loss)
print("d(sum)/dA =\n", grads[a].data)

# The loss used by the attack: squared L2 distance between feature
# vectors. Its gradient is 2*(a - b).
x = T.Tensor([3.0, -1.0, 0.5], requires_grad=True)
target = T.Tensor([1.0, 0.0, 0.0])
dist = T.l2_dist_sq(x, target)
print("\n||x - t||^2 =", dist.item())
print("analytic gradient:", T.backward(dist)[x].data)

# Sanity-check one coordinate with central differences.
h = 1e-5
bumped_hi = np.array([3.0 + h, -1.0, 0.5])
bumped_lo = np.array([3.0 - h, -1.0, 0.5])
fd = (((bumped_hi - target.data) ** 2).sum()
      - ((bumped_lo - target.data) ** 2).sum()) / (2 * h)
print("finite-difference check (coord 0):", fd)

# A transformer-ish composite still differentiates cleanly.
w = T.Tensor(np.random.default_rng(0).normal(size=(3, 3)))
z = T.Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
out = T.softmax(T.layer_norm(T.gelu(T.matmul(z, w))), axis=1)
print("\nsoftmax rows sum to", out.data.sum(axis=1))
print("composite gradient shape:", T.backward(T.tsum(out))[z].shape)

# sign() lives outside the graph: it is the PGD step direction.
g = T.Tensor([-0.3, 0.0, 7.0])
print("\nsign of", g.data.tolist(), "->", T.sign(g).data.tolist())
