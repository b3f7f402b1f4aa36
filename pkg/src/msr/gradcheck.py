"""Finite-difference gradient suite over every primitive and the composed losses.

Each case draws a random problem from a seed and reports the worst
relative error over all of its differentiable inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objective import info_nce, mse_loss, neg_cosine_loss, total_loss

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


def _distinct(rng, shape):
    # values at least 1e-2 apart, so max-pool winners survive the finite-difference step
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - n * 0.025


def _each_input(arrays, build):
    """One scalar function per input; the others stay fixed constants."""
    fns = []
    for i in range(len(arrays)):
        def fn(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = x
            return build(*args)
        fns.append((fn, arrays[i]))
    return fns


Case = Callable[[np.random.Generator], list]


def _binary(op):
    def case(rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))  # exercises broadcasting
        w = rng.normal(size=(3, 4))
        return _each_input([a, b], lambda x, y: ad.sum(op(x, y) * Tensor(w)))
    return case


def _unary(op, sample=None):
    def case(rng):
        x = sample(rng) if sample else rng.normal(size=(3, 5))
        w = rng.normal(size=op(Tensor(x)).shape)
        return [(lambda t: ad.sum(op(t) * Tensor(w)), x)]
    return case


def _matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    return _each_input([a, b], lambda x, y: ad.sum(ad.matmul(x, y) * Tensor(w)))


def _conv(layout, stride, padding):
    def case(rng):
        x = rng.normal(size=(2, 2, 5, 5)) if layout == "NCHW" else rng.normal(size=(2, 5, 5, 2))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding, layout=layout)
        w = rng.normal(size=out.shape)
        return _each_input([x, k], lambda a, b: ad.sum(
            ad.conv2d(a, b, stride=stride, padding=padding, layout=layout) * Tensor(w)))
    return case


def _max_pool(layout):
    def case(rng):
        x = _distinct(rng, (2, 2, 4, 4) if layout == "NCHW" else (2, 4, 4, 2))
        w = rng.normal(size=ad.max_pool2d(Tensor(x), 2, layout=layout).shape)
        return [(lambda t: ad.sum(ad.max_pool2d(t, 2, layout=layout) * Tensor(w)), x)]
    return case


def _batch_norm(shape, channel_axis, training):
    def case(rng):
        C = shape[channel_axis]
        x = rng.normal(size=shape) * 2 + 1
        g, b = rng.uniform(0.5, 1.5, C), rng.normal(size=C)
        rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, C)
        w = rng.normal(size=shape)

        def build(xx, gg, bb):
            kw = {} if training else dict(running_mean=rm.copy(), running_var=rv.copy())
            return ad.sum(ad.batch_norm(xx, gg, bb, training=training, channel_axis=channel_axis, **kw) * Tensor(w))
        return _each_input([x, g, b], build)
    return case


def _dot(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=3)
    return _each_input([a, b], lambda x, y: ad.sum(ad.dot(x, y) * Tensor(w)))


def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    return _each_input([a, b], lambda x, y: ad.sum(ad.concat([x, y], axis=0) * Tensor(w)))


def _stop_gradient(rng):
    # sg(x) acts as the constant x0: the true derivative of sum(x0 * x) is x0
    x0 = rng.normal(size=(3, 4))
    return [(lambda t: ad.sum(ad.stop_gradient(t) * t), x0,
             lambda t: ad.sum(Tensor(x0) * t))]


def _mse_case(rng):
    z1, z2 = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    return _each_input([z1, z2], mse_loss)


def _neg_cos_case(rng):
    z1, z2 = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    return _each_input([z1, z2], neg_cosine_loss)


def _info_nce_case(rng):
    z1, z2, neg = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(4, 8))
    gamma = 0.5
    return _each_input([z1, z2, neg], lambda a, b, n: info_nce(a, b, n, gamma))


def _total_case(rng):
    zs = [rng.normal(size=(4, 6)) for _ in range(4)]
    beta = float(rng.uniform(0.05, 0.95))
    cases = []
    # fully differentiable form: every online argument keeps its gradient
    for i in (0, 1):
        def fn(x, i=i):
            args = [Tensor(z) for z in zs]
            args[i] = x
            return total_loss(*args, beta=beta, detach_online_partner=False)
        cases.append((fn, zs[i]))
    # detached form: the analytic gradient must equal the derivative with partners frozen
    def detached(x):
        return total_loss(x, Tensor(zs[1]), Tensor(zs[2]), Tensor(zs[3]), beta=beta)

    def frozen(x):
        return (1 - beta) * mse_loss(x, Tensor(zs[3])) + beta * mse_loss(x, Tensor(zs[1]))
    cases.append((detached, zs[0], frozen))
    return cases


CASES: dict[str, Case] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scalar_mul": _unary(lambda t: ad.scalar_mul(t, -1.7)),
    "matmul": _matmul,
    "transpose": _unary(lambda t: ad.transpose(t)),
    "conv2d[NCHW,s1,p1]": _conv("NCHW", 1, 1),
    "conv2d[NHWC,s2,p0]": _conv("NHWC", 2, 0),
    "max_pool2d[NCHW]": _max_pool("NCHW"),
    "max_pool2d[NHWC]": _max_pool("NHWC"),
    "global_avg_pool": _unary(lambda t: ad.global_avg_pool(t), lambda r: r.normal(size=(2, 3, 4, 4))),
    "relu": _unary(ad.relu, lambda r: _away_from_zero(r, (3, 5))),
    "batch_norm[train,4d]": _batch_norm((3, 2, 3, 3), 1, True),
    "batch_norm[train,2d]": _batch_norm((5, 3), 1, True),
    "batch_norm[eval,4d]": _batch_norm((2, 3, 3, 2), 3, False),
    "sum": _unary(lambda t: ad.sum(t, axis=1)),
    "mean": _unary(lambda t: ad.mean(t, axis=0, keepdims=True)),
    "l2_normalize": _unary(ad.l2_normalize),
    "dot": _dot,
    "log": _unary(ad.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "exp": _unary(ad.exp),
    "logsumexp": _unary(lambda t: ad.logsumexp(t, axis=1)),
    "stop_gradient": _stop_gradient,
    "concat": _concat,
    "reshape": _unary(lambda t: ad.reshape(t, (5, 3))),
    "mse_loss": _mse_case,
    "neg_cosine_loss": _neg_cos_case,
    "info_nce": _info_nce_case,
    "total_loss": _total_case,
}


@dataclass
class SuiteResult:
    errors: dict[str, float]
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e < TOLERANCE for e in self.errors.values())

    def table(self) -> str:
        width = max(len(k) for k in self.errors)
        lines = [f"{'op'.ljust(width)}  max rel err  status"]
        for k, e in self.errors.items():
            lines.append(f"{k.ljust(width)}  {e:11.3e}  {'ok' if e < TOLERANCE else 'FAIL'}")
        return "\n".join(lines) + "\n"


def check_case(name: str, seed: int, fd_step: float = 1e-5) -> float:
    rng = np.random.default_rng([seed, len(name)])
    worst = 0.0
    for entry in CASES[name](rng):
        fn, point, *ref = entry
        worst = max(worst, ad.grad_check(fn, point, fd_step, reference=ref[0] if ref else None))
    return worst


def run_suite(seeds: int = 100, fd_step: float = 1e-5, names=None) -> SuiteResult:
    start = time.perf_counter()
    errors = {}
    for name in names or CASES:
        errors[name] = max(check_case(name, s, fd_step) for s in range(seeds))
    return SuiteResult(errors, seeds, time.perf_counter() - start)
