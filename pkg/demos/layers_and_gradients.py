"""layers_and_gradients.py

Walk through the hand-written layers on tiny tensors and check each backward
pass against central differences.
"""
import numpy as np

from forgecam import tensor as T
from forgecam.model import ArchConfig, model_init

rng = np.random.default_rng(0)

# a 3x3 convolution on a 2-image batch, stride 1, zero padding 1
x = rng.uniform(-1, 1, (2, 3, 8, 8))
conv = T.ConvParams(rng.uniform(-1, 1, (4, 3, 3, 3)), np.zeros(4), stride=1, padding=1)
y = T.conv2d(x, conv)
print("conv2d", x.shape, "->", y.shape)

# the upstream gradient is arbitrary; summing y * g turns the layer into a scalar
g = rng.uniform(-1, 1, y.shape)
dx, dw, db = T.conv2d_backward(x, conv, g)
err = T.gradient_check(lambda v: np.sum(T.conv2d(v, conv) * g), x, dx, 1e-3)
print("conv2d input gradient, max relative error", err)

pooled, argmax = T.maxpool2(y)
print("maxpool2", y.shape, "->", pooled.shape, "argmax codes", np.unique(argmax))

bn = T.BatchNormParams.create(4, np.float64)
out, cache = T.batchnorm(y, bn, "train")
print("batchnorm per-channel mean", out.mean(axis=(0, 2, 3)).round(6))
print("running mean after one batch", bn.running_mean.round(4))

loss = T.bce_with_logit(np.zeros(1), np.ones(1))
print("BCE at logit 0 is ln 2:", loss.value, "gradient", loss.grad_wrt_logit)

# one RMSProp step on a scalar, lr 1e-3
p = np.array([0.0])
state = T.RmsPropState.like(p, learning_rate=1e-3)
T.rmsprop_step(p, np.array([1.0]), state)
print("RMSProp first step", p, "accumulator", state.s)

# end to end on a small float64 network: tiny steps avoid ReLU/max-pool kinks
arch = ArchConfig(input_size=16, widths=(4, 6, 8, 8), fc_hidden=8, strict=False)
model = model_init(arch, seed=1, dtype=np.float64)
xb = rng.uniform(-1, 1, (2, 3, 16, 16))
labels = np.array([0.0, 1.0])
logits, cache = model.forward(xb, "train", update_stats=False)
grads = model.backward(cache, T.bce_with_logit(logits, labels).grad_wrt_logit, wrt_input=True)
f = lambda v: T.bce_with_logit(model.forward(v, "train", update_stats=False)[0], labels).value
for eps in (1e-6, 1e-3):
    print(f"input gradient at eps={eps:g}: max relative error",
          T.gradient_check(f, xb, grads["input"], eps))
