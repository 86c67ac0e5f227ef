"""A tour of the numpy autodiff core: a tiny graph, a gradient check, and one attention call."""

# %%
import numpy as np

from glyrag import autodiff as ad
from glyrag import nn
from glyrag.autodiff import Tensor

rng = np.random.default_rng(0)

# %% build a small graph and read back gradients
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = rng.normal(size=(5, 4))
y = rng.normal(size=(5, 3))
loss = ad.huber_loss(ad.tanh(ad.matmul(Tensor(x), w)), y)
loss.backward()
print("loss", round(loss.item(), 6))
print("dL/dW row 0", np.round(w.grad[0], 5))

# %% central differences agree with backprop
err = ad.grad_check(lambda: ad.huber_loss(ad.tanh(ad.matmul(Tensor(x), w)), y), [w])
print(f"relative error {err:.2e}")

# %% multi-head self-attention over 6 tokens of width 8
mha = nn.MultiHeadAttention(8, 2, rng)
tokens = Tensor(rng.normal(size=(1, 6, 8)))
out = mha(tokens, tokens, tokens)
print("attention output", out.shape)

# with a single key the softmax weight is 1, so the output ignores the query entirely
one = Tensor(rng.normal(size=(1, 1, 8)))
a = mha(Tensor(rng.normal(size=(1, 1, 8))), one, one).data
b = mha(Tensor(rng.normal(size=(1, 1, 8))), one, one).data
print("single-key outputs equal:", np.allclose(a, b))
