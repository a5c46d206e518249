"""
Weight decay, training loss and a norm-based capacity proxy
===========================================================

The proxy multiplies the Frobenius norms of the weight matrices, scales by
2^depth and divides by sqrt(m). Weaker decay lets training loss fall further
but grows the norms, so the proxy rises.
"""

from softdistill.data import SyntheticConfig, generate_synthetic
from softdistill.nn import MlpSpec, bound_proxy_from_norms, frobenius_norms
from softdistill.pipelines import TrainConfig, train_teacher

print("proxy for norms [2, 3] and m = 100:", bound_proxy_from_norms([2.0, 3.0], 100))

T, V, _, _ = generate_synthetic(SyntheticConfig(mean_scale=0.65, n_gallery=100))
for beta in (3e-3, 3e-4, 3e-5):
    params, log = train_teacher(T, V, MlpSpec([32, 32, 10]), TrainConfig(epochs=30, weight_decay=beta))
    last = log[-1]
    norms = ", ".join(f"{n:.2f}" for n in frobenius_norms(params))
    print(f"beta={beta:g}  train loss {last.train_loss:.4f}  norms [{norms}]  proxy {last.bound_proxy:.3f}")
