"""
Reverse-mode differentiation on a tape
======================================

Tensors record the operations that produced them. ``backward`` walks that
record once, newest node first, and leaves gradients on the leaves.
"""

import numpy as np

from softdistill import autograd as ag
from softdistill.autograd import Tensor, grad_check

# a tiny expression: sum(relu(x @ W) * 3)
x = Tensor([[1.0, -2.0], [0.5, 4.0]])
W = Tensor([[0.3, -1.0], [0.2, 0.7]], requires_grad=True)
y = ag.sum(ag.scale(ag.relu(ag.matmul(x, W)), 3.0))
ag.backward(y)
print("y =", y.item())
print("dy/dW =\n", W.grad)

# the same gradient by central differences, coordinate by coordinate
err = grad_check(lambda w: ag.sum(ag.scale(ag.relu(ag.matmul(x, w)), 3.0)), W.data)
print("max relative error vs finite differences:", err)

# log_softmax stays finite for very large logits
z = Tensor(np.array([[1000.0, 0.0, -1000.0]]))
print("log_softmax:", ag.log_softmax(z).data)

# non-finite results are refused rather than propagated
try:
    ag.log(Tensor([0.0]))
except ag.NonFiniteError as exc:
    print("refused:", exc)
