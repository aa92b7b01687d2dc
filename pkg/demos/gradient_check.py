"""
Checking hand-written backward passes
=====================================

Every layer in the library has an explicit backward function. This script
compares them against central finite differences computed in float64, first
for one convolution and then for a whole two-block network.
"""
import numpy as np

from attrmap.model import TapNet, TapNetConfig, check_gradients
from attrmap.tensor import conv2d_backward, conv2d_forward, grad_check, seeded_rng

rng = seeded_rng(0)

# A random convolution and a random projection of its output give a scalar
# function whose gradient we know analytically.
x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
proj = rng.normal(size=conv2d_forward(x, w, b, stride=2, pad=1).shape)
grads = conv2d_backward(x, w, proj, stride=2, pad=1)

report = grad_check(
    lambda p: float(np.sum(conv2d_forward(p["x"], p["w"], p["b"], 2, 1) * proj)),
    {"x": x, "w": w, "b": b},
    {"x": grads.grad_input, "w": grads.grad_params["weight"], "b": grads.grad_params["bias"]},
)
print("conv2d:", {k: f"{v:.1e}" for k, v in report.per_param.items()})

# The same check through a small network under an MSE loss. Batch norm in
# train mode couples every sample, and ReLU kinks make a fixed step unreliable
# near zero, so coordinates whose step flips a rectifier are re-checked with a
# smaller step. The report says how many needed that.
tiny = TapNetConfig(input_size=8, blocks=((4, 1), (6, 2)), tap_size=2, stem_channels=3,
                    attribute_names=("a", "b", "c"))
net = TapNet.build(tiny, seed=1)
report = check_gradients(net, rng.random((3, 3, 8, 8)), rng.standard_normal((3, 3)))
print(f"network: max relative error {report.max_rel_error:.1e} over {report.checked} parameters "
      f"({report.refined} re-stepped), passed={report.passed}")
