"""
Hard labels, soft labels and Jensen-Shannon divergence
======================================================

All three losses take raw student logits and return a batch mean in nats.
The soft losses take the teacher's probabilities as fixed targets.
"""

import math

import numpy as np

from softdistill.autograd import Tensor
from softdistill.losses import cross_entropy_hard, js_divergence, one_hot, soft_cross_entropy

logits = Tensor(np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]]))
labels = np.array([0, 2])
teacher = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])

print("hard CE         ", cross_entropy_hard(logits, labels).item())
print("soft CE (one-hot)", soft_cross_entropy(logits, one_hot(labels, 3)).item())
print("soft CE (teacher)", soft_cross_entropy(logits, teacher).item())
print("JS divergence   ", js_divergence(logits, teacher).item())

# JS is bounded by ln 2, reached by distributions with disjoint support
far = js_divergence(Tensor([[0.0, -800.0]]), np.array([[0.0, 1.0]])).item()
print("disjoint JS", far, "ln 2", math.log(2))
