"""Encoder, projector and predictor networks plus the EMA-linked model pair."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENCODER, PROJECTOR, PREDICTOR = "encoder", "projector", "predictor"


@dataclass(frozen=True)
class Arch:
    name: str
    channels: tuple[int, ...]
    proj_hidden: int
    out_dim: int
    pred_hidden: int
    in_channels: int = 3
    image_size: int = 32

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


ARCHS: dict[str, Arch] = {
    "cifar-small": Arch("cifar-small", (32, 64, 128), proj_hidden=256, out_dim=64, pred_hidden=256),
    "cifar-tiny": Arch("cifar-tiny", (16, 32, 64), proj_hidden=128, out_dim=32, pred_hidden=128),
}


def get_arch(name: str) -> Arch:
    try:
        return ARCHS[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHS)}") from None


@dataclass
class ModelParams:
    """Named parameter tensors plus non-differentiated buffers."""

    arch: Arch
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
            for k, v in self.params.items()
        }
        return ModelParams(self.arch, params, {k: b.copy() for k, b in self.buffers.items()})

    def subset(self, prefixes: tuple[str, ...], requires_grad: bool | None = None) -> "ModelParams":
        keep = lambda k: k.split(".", 1)[0] in prefixes  # noqa: E731
        full = self.copy(requires_grad)
        return ModelParams(
            self.arch,
            {k: v for k, v in full.params.items() if keep(k)},
            {k: v for k, v in full.buffers.items() if keep(k)},
        )

    def has(self, module: str) -> bool:
        return any(k.startswith(module + ".") for k in self.params)

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of parameters and buffers (buffers prefixed ``buf:``)."""
        out = {k: v.data for k, v in self.params.items()}
        out.update({"buf:" + k: v for k, v in self.buffers.items()})
        return out


@dataclass
class ModelPair:
    online: ModelParams
    target: ModelParams
    tau: float = 0.99


class ForwardLog(list):
    """Records (network, view tag, predictor applied, batch size) per network forward."""

    def record(self, network: str, tag: str | None, predictor: bool, batch: int) -> None:
        self.append((network, tag, predictor, batch))

    def count(self, network: str | None = None) -> int:  # type: ignore[override]
        return sum(1 for e in self if network is None or e[0] == network)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bn(params, buffers, prefix, width, dtype):
    params[prefix + ".weight"] = np.ones(width, dtype=dtype)
    params[prefix + ".bias"] = np.zeros(width, dtype=dtype)
    buffers[prefix + ".running_mean"] = np.zeros(width, dtype=dtype)
    buffers[prefix + ".running_var"] = np.ones(width, dtype=dtype)


def _mlp(rng, params, buffers, prefix, widths, dtype):
    """Linear - BN - ReLU ... - Linear, weights stored as [in, out]."""
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.fc{i}.weight"] = _kaiming_uniform(rng, (a, b), a, dtype)
        params[f"{prefix}.fc{i}.bias"] = np.zeros(b, dtype=dtype)
        if i < len(widths) - 2:
            _bn(params, buffers, f"{prefix}.bn{i}", b, dtype)


def init_online(arch: Arch, seed: int, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        params[f"{ENCODER}.conv{i}.weight"] = _kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype)
        _bn(params, buffers, f"{ENCODER}.bn{i}", cout, dtype)
        cin = cout
    _mlp(rng, params, buffers, PROJECTOR, (arch.feature_dim, arch.proj_hidden, arch.out_dim), dtype)
    _mlp(rng, params, buffers, PREDICTOR, (arch.out_dim, arch.pred_hidden, arch.out_dim), dtype)
    return ModelParams(arch, {k: Tensor(v, requires_grad=True) for k, v in params.items()}, buffers)


def init_models(arch_spec: str = "cifar-small", seed: int = 0, dtype=np.float64, tau: float = 0.99) -> ModelPair:
    """Fresh online network and a target copy of its encoder and projector."""
    arch = get_arch(arch_spec)
    online = init_online(arch, seed, dtype)
    target = online.subset((ENCODER, PROJECTOR), requires_grad=False)
    return ModelPair(online, target, tau)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _bn_apply(p: ModelParams, prefix: str, x: Tensor, train_mode: bool, update_stats: bool,
              channel_axis: int = 1) -> Tensor:
    track = train_mode and update_stats
    return ad.batch_norm(
        x,
        p.params[prefix + ".weight"],
        p.params[prefix + ".bias"],
        training=train_mode,
        running_mean=p.buffers[prefix + ".running_mean"] if (track or not train_mode) else None,
        running_var=p.buffers[prefix + ".running_var"] if (track or not train_mode) else None,
        channel_axis=channel_axis,
    )


def _check_batch(p: ModelParams, batch: Tensor) -> None:
    a = p.arch
    want = (a.in_channels, a.image_size, a.image_size)
    if batch.data.ndim != 4 or tuple(batch.shape[1:]) != want:
        raise ad.ShapeError(f"expected batch of shape [B, {want[0]}, {want[1]}, {want[2]}], got {batch.shape}")


def encoder_forward(p: ModelParams, batch: Tensor, train_mode: bool, update_stats: bool = True) -> Tensor:
    """3 x [conv3x3 - BN - ReLU - maxpool2] then global average pooling.

    Takes [B, C, H, W]; activations run channels-last internally.
    """
    _check_batch(p, batch)
    h = ad.transpose(batch, axes=(0, 2, 3, 1))
    for i in range(len(p.arch.channels)):
        h = ad.conv2d(h, p.params[f"{ENCODER}.conv{i}.weight"], stride=1, padding=1, layout="NHWC")
        h = _bn_apply(p, f"{ENCODER}.bn{i}", h, train_mode, update_stats, channel_axis=3)
        # max-pool commutes with ReLU; pooling first touches a quarter of the values
        h = ad.relu(ad.max_pool2d(h, 2, layout="NHWC"))
    return ad.global_avg_pool(h, layout="NHWC")


def mlp_forward(p: ModelParams, prefix: str, h: Tensor, train_mode: bool, update_stats: bool = True) -> Tensor:
    i = 0
    while f"{prefix}.fc{i}.weight" in p.params:
        h = h @ p.params[f"{prefix}.fc{i}.weight"] + p.params[f"{prefix}.fc{i}.bias"]
        if f"{prefix}.bn{i}.weight" in p.params:
            h = ad.relu(_bn_apply(p, f"{prefix}.bn{i}", h, train_mode, update_stats))
        i += 1
    return h


def project(p: ModelParams, batch: Tensor, train_mode: bool, update_stats: bool = True) -> Tensor:
    """g(f(x)) without stop-gradient."""
    feats = encoder_forward(p, batch, train_mode, update_stats)
    return mlp_forward(p, PROJECTOR, feats, train_mode, update_stats)


def encode_online(p: ModelParams, batch: Tensor, train_mode: bool = True, *,
                  log: ForwardLog | None = None, tag: str | None = None) -> Tensor:
    """q(g(f(x))) through the online network; rows are not normalized."""
    if not p.has(PREDICTOR):
        raise ValueError("online parameters carry no predictor")
    z = mlp_forward(p, PREDICTOR, project(p, batch, train_mode), train_mode)
    if log is not None:
        log.record("online", tag, True, batch.shape[0])
    return z


def encode_target(p: ModelParams, batch: Tensor, train_mode: bool = True, *,
                  log: ForwardLog | None = None, tag: str | None = None,
                  network: str = "target") -> Tensor:
    """stop_gradient(g(f(x))).

    Train-mode BN here uses batch statistics but never writes the running
    buffers; those follow the online network through :func:`ema_update`.
    """
    z = ad.stop_gradient(project(p, batch, train_mode, update_stats=False))
    if log is not None:
        log.record(network, tag, False, batch.shape[0])
    return z


def features(p: ModelParams, batch: Tensor) -> Tensor:
    """Encoder output f(x) in eval mode (running statistics)."""
    return encoder_forward(p, batch, train_mode=False)


# ---------------------------------------------------------------------------
# EMA target
# ---------------------------------------------------------------------------


def ema_update(pair: ModelPair, tau: float | None = None) -> ModelPair:
    """xi <- tau * xi + (1 - tau) * theta for every target parameter and buffer."""
    tau = pair.tau if tau is None else float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"EMA factor must lie in [0, 1], got {tau}")
    on, tg = pair.online, pair.target
    for name, xi in tg.params.items():
        theta = on.params.get(name)
        if theta is None or theta.shape != xi.shape:
            raise ValueError(f"target parameter {name!r} has no matching online parameter")
        tg.params[name] = Tensor(tau * xi.data + (1.0 - tau) * theta.data, requires_grad=xi.requires_grad)
    for name, buf in tg.buffers.items():
        src = on.buffers.get(name)
        if src is None or src.shape != buf.shape:
            raise ValueError(f"target buffer {name!r} has no matching online buffer")
        tg.buffers[name] = tau * buf + (1.0 - tau) * src
    return pair


def ema_schedule(k: int, K: int, tau_base: float, mode: str = "constant") -> float:
    if k < 0 or k > K:
        raise ValueError(f"step {k} outside [0, {K}]")
    if mode == "constant":
        return float(tau_base)
    if mode == "cosine-increase":
        return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * k / K) + 1.0) / 2.0
    raise ValueError(f"unknown EMA schedule {mode!r}")
