"""A short walk through the tape-based autodiff engine."""
import numpy as np

from msr import autodiff as ad
from msr.autodiff import Tensor

# everything differentiable is a Tensor; ops record themselves on the active tape
with ad.fresh_tape() as tape:
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    w = Tensor(np.array([[1.0], [-0.25]]), requires_grad=True)
    y = ad.sum(ad.relu(x @ w))
    grads = ad.backward(y)
    print("y =", float(y.data))
    print("dy/dw =", grads[w.id].ravel())
    print("ops recorded:", tape.op_counts())

# stop_gradient blocks the backward sweep without changing values
with ad.fresh_tape():
    a = Tensor(np.array([3.0]), requires_grad=True)
    b = ad.stop_gradient(a) * a
    ad.backward(ad.sum(b))
    print("d(sg(a) * a)/da =", a.grad, "(only the live factor counts)")

# central differences against the analytic gradient
point = np.random.default_rng(0).normal(size=(4, 6))
probe = Tensor(np.random.default_rng(3).normal(size=(4, 6)))
err = ad.grad_check(lambda t: ad.sum(ad.l2_normalize(t) * probe), point)
print(f"l2_normalize max rel err: {err:.2e}")

err = ad.grad_check(lambda t: ad.sum(ad.logsumexp(t, axis=1)), point)
print(f"logsumexp max rel err: {err:.2e}")

# a conv + batch-norm block, the encoder's building piece
img = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
kern = np.random.default_rng(2).normal(size=(4, 3, 3, 3))


def block(k):
    h = ad.conv2d(Tensor(img), k, stride=1, padding=1)
    h = ad.batch_norm(h, Tensor(np.ones(4)), Tensor(np.zeros(4)), training=True)
    return ad.sum(ad.relu(h) * ad.relu(h))


print(f"conv2d -> batch_norm -> relu max rel err: {ad.grad_check(block, kern):.2e}")
