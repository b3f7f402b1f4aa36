"""Pretraining loop with MSR and baseline routings, SGD, EMA target and checkpoints."""

from __future__ import annotations

import ctypes
import hashlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import nn
from .augment import AugSpec, ViewBatch, make_views
from .autodiff import Tensor
from .data import Dataset, batches
from .objective import BETA_MODES, SIMILARITIES, beta_at, cosine_lr, total_loss

MODES = ("msr", "byol_aa", "byol_aw", "simsiam_msr")
TAU_MODES = ("constant", "cosine-increase")
MAGIC = b"MSRCKPT1"
BETA_BASE_DEFAULT = 0.3


class TrainingError(RuntimeError):
    """A step produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an unknown version."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "msr"
    beta_base: float | None = None
    beta_schedule: str = "cosine"
    similarity: str | None = None
    epochs: int = 50
    batch_size: int = 256
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau_base: float = 0.99
    tau_schedule: str = "constant"
    seed: int = 0
    arch: str = "cifar-small"
    float_width: int = 32
    detach_online_partner: bool = True
    jitter_scale: float = 1.0
    crop_min_scale: float = 0.2

    def resolved(self) -> "TrainConfig":
        """Validate and fill mode-dependent defaults."""
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        byol = self.mode.startswith("byol")
        beta = self.beta_base
        if beta is None:
            beta = 0.0 if byol else BETA_BASE_DEFAULT
        if byol and beta != 0.0:
            raise ValueError(f"mode {self.mode} has no aggressive-pair term; beta_base must be 0")
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta_base must lie in [0, 1], got {beta}")
        sim = self.similarity or ("neg_cosine" if self.mode == "simsiam_msr" else "mse")
        if sim not in SIMILARITIES:
            raise ValueError(f"unknown similarity {sim!r}")
        if self.beta_schedule not in BETA_MODES:
            raise ValueError(f"unknown beta schedule {self.beta_schedule!r}")
        if self.tau_schedule not in TAU_MODES:
            raise ValueError(f"unknown tau schedule {self.tau_schedule!r}")
        checks = [
            (self.epochs >= 0, "epochs must be non-negative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.lr0 >= 0, "lr0 must be non-negative"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (0.0 <= self.tau_base <= 1.0, "tau_base must lie in [0, 1]"),
            (self.float_width in (32, 64), "float_width must be 32 or 64"),
            (self.jitter_scale >= 0, "jitter_scale must be non-negative"),
            (0.0 < self.crop_min_scale <= 1.0, "crop_min_scale must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        nn.get_arch(self.arch)
        return replace(self, beta_base=float(beta), similarity=sim)

    @property
    def dtype(self):
        return np.float32 if self.float_width == 32 else np.float64

    def aug_spec(self) -> AugSpec:
        base = AugSpec(crop_scale=(self.crop_min_scale, 1.0))
        return (base if self.jitter_scale == 1.0 else base.noisy(self.jitter_scale)).validate()

    def canonical(self) -> str:
        """One ``key=value`` per line in field order; the basis of the config hash."""
        cfg = self.resolved()
        return "".join(f"{f.name}={_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(cls_field, text: str):
    """Inverse of the canonical formatting for one TrainConfig field."""
    default = cls_field.default
    text = text.strip()
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ValueError(f"{cls_field.name}: expected true/false, got {text!r}")
        return text == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or cls_field.name == "beta_base":
        return None if text in ("", "none") else float(text)
    if cls_field.name == "similarity":
        return None if text in ("", "none") else text
    return text


def config_from_items(items: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: parse_value(known[k], v) for k, v in items.items()}
    return replace(base or TrainConfig(), **values)


@dataclass
class TrainState:
    config: TrainConfig
    pair: nn.ModelPair
    momentum: dict[str, np.ndarray]
    k: int
    K: int
    steps_per_epoch: int
    log: list[dict] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.k >= self.K


@dataclass
class StepMetrics:
    k: int
    loss: float
    beta: float
    lr: float
    tau: float
    backward: int
    forwards: dict[str, int]
    routes: list[tuple]

    def row(self) -> dict:
        return {"k": self.k, "loss": self.loss, "beta": self.beta, "lr": self.lr,
                "tau": self.tau, "backward": self.backward}


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap instead of fresh mmaps (glibc only)."""
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    ok = libc.mallopt(m_mmap_threshold, 1 << 30) and libc.mallopt(m_trim_threshold, 1 << 30)
    return bool(ok)


def init_state(config: TrainConfig, n_samples: int) -> TrainState:
    cfg = config.resolved()
    steps = n_samples // cfg.batch_size
    if steps == 0 and cfg.epochs > 0:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n_samples}")
    pair = nn.init_models(cfg.arch, seed=cfg.seed, dtype=cfg.dtype, tau=cfg.tau_base)
    if cfg.mode == "simsiam_msr":
        pair.target = None  # the online network serves as its own detached target
    mom = {k: np.zeros_like(v.data) for k, v in pair.online.params.items()}
    return TrainState(cfg, pair, mom, 0, cfg.epochs * steps, steps)


def step_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), 2, int(k)]).generate_state(1, np.uint64)[0] >> 1)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1, int(epoch)]).generate_state(1, np.uint64)[0] >> 1)


def _to_nchw(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype))


def route_views(state: TrainState, views: ViewBatch, log: nn.ForwardLog):
    """Return (z_on_a, z_on_a', z_tg_w, z_tg_w') for the configured mode."""
    cfg = state.config
    on = state.pair.online
    t = lambda a: _to_nchw(a, cfg.dtype)  # noqa: E731
    if cfg.mode == "msr":
        tg = state.pair.target
        z = nn.encode_online(on, t(views.v_a), log=log, tag="v_a")
        zp = nn.encode_online(on, t(views.v_a_prime), log=log, tag="v_a_prime")
        w = nn.encode_target(tg, t(views.v_w), log=log, tag="v_w")
        wp = nn.encode_target(tg, t(views.v_w_prime), log=log, tag="v_w_prime")
    elif cfg.mode == "byol_aa":
        tg = state.pair.target
        z = nn.encode_online(on, t(views.v_a), log=log, tag="v_a")
        zp = nn.encode_online(on, t(views.v_a_prime), log=log, tag="v_a_prime")
        w = nn.encode_target(tg, t(views.v_a), log=log, tag="v_a")
        wp = nn.encode_target(tg, t(views.v_a_prime), log=log, tag="v_a_prime")
    elif cfg.mode == "byol_aw":
        # aggressive views to the online branch, weak views to the target
        tg = state.pair.target
        z = nn.encode_online(on, t(views.v_a), log=log, tag="v_a")
        zp = nn.encode_online(on, t(views.v_a_prime), log=log, tag="v_a_prime")
        w = nn.encode_target(tg, t(views.v_w), log=log, tag="v_w")
        wp = nn.encode_target(tg, t(views.v_w_prime), log=log, tag="v_w_prime")
    else:  # simsiam_msr
        z = nn.encode_online(on, t(views.v_a), log=log, tag="v_a")
        zp = nn.encode_online(on, t(views.v_a_prime), log=log, tag="v_a_prime")
        w = nn.encode_target(on, t(views.v_w), log=log, tag="v_w", network="online-detached")
        wp = nn.encode_target(on, t(views.v_w_prime), log=log, tag="v_w_prime", network="online-detached")
    return z, zp, w, wp


def sgd_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], momentum: dict[str, np.ndarray],
               lr: float, mu: float, wd: float) -> None:
    """m <- mu m + (g + wd theta); theta <- theta - lr m.  Parameters only, never buffers."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        d = g + wd * p.data if wd else g
        m = momentum[name]
        m *= mu
        m += d
        params[name] = Tensor(p.data - lr * m, requires_grad=p.requires_grad)


def pretrain_step(state: TrainState, images: np.ndarray, indices: np.ndarray,
                  views: ViewBatch | None = None) -> tuple[TrainState, StepMetrics]:
    """One step: views, routing, reweighted loss, one backward, SGD on theta, EMA on xi."""
    cfg = state.config
    k, K = state.k, state.K
    if k >= K:
        raise ValueError(f"training already finished ({k} of {K} steps)")
    beta = beta_at(k, K, cfg.beta_base, cfg.beta_schedule)
    lr = cosine_lr(k, K, cfg.lr0)
    tau = nn.ema_schedule(k, K, cfg.tau_base, cfg.tau_schedule) if state.pair.target is not None else float("nan")
    if views is None:
        views = make_views(images, step_seed(cfg.seed, k), cfg.aug_spec(), indices)
    log = nn.ForwardLog()
    with ad.fresh_tape() as tape:
        z, zp, w, wp = route_views(state, views, log)
        loss = total_loss(z, zp, w, wp, beta, cfg.similarity, cfg.detach_online_partner)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {k}")
        grads = ad.backward(loss)
        backward = tape.backward_passes
    online = state.pair.online
    named = {name: grads[p.id] for name, p in online.params.items() if p.id in grads}
    sgd_update(online.params, named, state.momentum, lr, cfg.momentum, cfg.weight_decay)
    if state.pair.target is not None:
        nn.ema_update(state.pair, tau)
    forwards: dict[str, int] = {}
    for net, *_ in log:
        forwards[net] = forwards.get(net, 0) + 1
    metrics = StepMetrics(k, value, beta, lr, tau, backward, forwards, list(log))
    state.k = k + 1
    state.log.append(metrics.row())
    return state, metrics


def _schedule(state: TrainState, n: int) -> Iterator[tuple[int, np.ndarray]]:
    """(k, sample indices) for every remaining step, derived from (seed, epoch) alone."""
    cfg = state.config
    epoch, offset = divmod(state.k, state.steps_per_epoch) if state.steps_per_epoch else (0, 0)
    k = state.k
    while k < state.K:
        order = batches(n, cfg.batch_size, epoch_seed(cfg.seed, epoch))
        for idx in order[offset:]:
            if k >= state.K:
                return
            yield k, idx
            k += 1
        epoch, offset = epoch + 1, 0


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MSR_THREADS", "1")))
    except ValueError:
        raise ValueError("MSR_THREADS must be an integer") from None


def pretrain(config: TrainConfig, dataset: Dataset, state: TrainState | None = None,
             stop_at: int | None = None,
             callback: Callable[[TrainState, StepMetrics], None] | None = None) -> TrainState:
    """Run (or resume) pretraining up to ``stop_at`` steps (default: all K)."""
    if state is None:
        state = init_state(config, len(dataset))
    elif state.config.digest() != config.resolved().digest():
        raise ValueError("checkpoint was written with a different configuration")
    cfg, spec = state.config, state.config.aug_spec()
    stop = state.K if stop_at is None else min(stop_at, state.K)
    plan = [(k, idx) for k, idx in _schedule(state, len(dataset)) if k < stop]
    make = lambda item: make_views(dataset.images[item[1]], step_seed(cfg.seed, item[0]), spec, item[1])  # noqa: E731
    pool = ThreadPoolExecutor(1) if worker_count() > 1 and plan else None
    try:
        pending = pool.submit(make, plan[0]) if pool else None
        for i, (k, idx) in enumerate(plan):
            if pool:
                views = pending.result()
                pending = pool.submit(make, plan[i + 1]) if i + 1 < len(plan) else None
            else:
                views = make((k, idx))
            state, metrics = pretrain_step(state, dataset.images[idx], idx, views)
            if callback is not None:
                callback(state, metrics)
    finally:
        if pool:
            pool.shutdown(wait=True)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [("online:" + k, v) for k, v in state.pair.online.state().items()]
    if state.pair.target is not None:
        out += [("target:" + k, v) for k, v in state.pair.target.state().items()]
    out += [("momentum:" + k, v) for k, v in state.momentum.items()]
    return out


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Magic, u64 manifest length, JSON manifest, then little-endian raw arrays."""
    arrays = _state_arrays(state)
    manifest = {
        "version": 1,
        "config": state.config.canonical(),
        "config_sha256": state.config.digest(),
        "k": state.k,
        "K": state.K,
        "steps_per_epoch": state.steps_per_epoch,
        "log": state.log,
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str}
                    for n, a in arrays],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise CheckpointError(f"{path}: manifest length {n} exceeds file size")
    try:
        manifest = json.loads(raw[16 : 16 + n])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupted manifest ({e})") from None
    if manifest.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    pos, arrays = 16 + n, {}
    for t in manifest["tensors"]:
        dt = np.dtype(t["dtype"])
        size = int(np.prod(t["shape"], dtype=np.int64)) * dt.itemsize
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: payload for {t['name']} is truncated")
        arrays[t["name"]] = np.frombuffer(raw, dtype=dt, count=size // dt.itemsize, offset=pos) \
            .reshape(t["shape"]).astype(dt.newbyteorder("="))
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return manifest, arrays


def config_from_canonical(text: str) -> TrainConfig:
    items = dict(line.split("=", 1) for line in text.splitlines() if line)
    return config_from_items(items)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    manifest, arrays = read_checkpoint(path)
    cfg = config_from_canonical(manifest["config"]).resolved()
    if cfg.digest() != manifest["config_sha256"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    state = init_state(cfg, manifest["steps_per_epoch"] * cfg.batch_size)

    def fill(prefix: str, mp: nn.ModelParams) -> None:
        for name, t in mp.params.items():
            mp.params[name] = Tensor(_take(arrays, f"{prefix}:{name}", t.data), requires_grad=t.requires_grad)
        for name, b in mp.buffers.items():
            mp.buffers[name] = _take(arrays, f"{prefix}:buf:{name}", b)

    fill("online", state.pair.online)
    if state.pair.target is not None:
        fill("target", state.pair.target)
    for name, m in state.momentum.items():
        state.momentum[name] = _take(arrays, f"momentum:{name}", m)
    if arrays:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(arrays)[:3]}")
    state.k, state.K = int(manifest["k"]), int(manifest["K"])
    state.log = list(manifest["log"])
    return state


def _take(arrays: dict[str, np.ndarray], key: str, like: np.ndarray) -> np.ndarray:
    try:
        a = arrays.pop(key)
    except KeyError:
        raise CheckpointError(f"checkpoint lacks tensor {key!r}") from None
    if a.shape != like.shape or a.dtype != like.dtype:
        raise CheckpointError(f"{key}: stored {a.dtype}{a.shape}, expected {like.dtype}{like.shape}")
    return a


def write_metrics_csv(state: TrainState, path: str | os.PathLike) -> None:
    cols = ("k", "loss", "beta", "lr", "tau", "backward")
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in state.log:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
