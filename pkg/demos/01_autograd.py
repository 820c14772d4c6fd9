"""Reverse-mode autograd on a tiny regression, checked against central differences."""

# %%
import numpy as np

from olid_ensemble import tensor as T

# %% the tape records each op; backward walks it in reverse
x = T.Tensor([[0.5, -1.0, 2.0]], requires_grad=True)
w = T.Tensor([[0.3], [0.1], [-0.2]], requires_grad=True)
loss = T.mse(T.sigmoid(T.matmul(x, w)), [[0.691]])
loss.backward()
print("loss", float(loss.data))
print("dL/dw", w.grad.ravel())

# %% gradient checks need 64-bit tensors; h=1e-4 central differences
with T.check_mode():
    r = np.random.default_rng(0)
    logits = T.Tensor(r.normal(size=(4, 3)))
    report = T.gradient_check(lambda t: T.cross_entropy(t, [0, 2, 1, 1]), logits)
    print("cross_entropy worst relative error %.2e" % report.max_rel_error)

    g, b = T.Tensor(r.normal(size=6)), T.Tensor(r.normal(size=6))
    ln_in = T.Tensor(r.normal(size=(3, 6)))
    weights = r.normal(size=(3, 6))
    report = T.gradient_check(lambda t: T.tsum(T.layer_norm(t, g, b) * weights), ln_in)
    print("layer_norm worst relative error %.2e" % report.max_rel_error)

# %% masked softmax puts exact zeros on padded columns
scores = T.Tensor([[1.0, 2.0, 3.0, 4.0]])
print(T.softmax(scores, where=np.array([[True, True, True, False]])).data)
