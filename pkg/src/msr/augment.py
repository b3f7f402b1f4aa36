"""Two-stage view generation: a weak geometric stage and a photometric stage on top.

Images are float arrays in [0, 1], channels last: one image is [H, W, 3],
a batch is [B, H, W, 3].  Every random draw comes from a stream keyed by
``(step_seed, sample_index, branch)``; per-sample parameters are drawn first
and then applied with batched, purely per-sample arithmetic, so augmenting a
batch gives bit-for-bit the same images as augmenting each sample alone.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

PRIMITIVES = ("random_resized_crop", "hflip", "color_jitter", "grayscale", "gaussian_blur")
JITTER_OPS = ("brightness", "contrast", "saturation", "hue")
LUMA = (0.299, 0.587, 0.114)
CROP_ATTEMPTS = 10

# branch ids for the four per-sample streams
WEAK, WEAK_PRIME, AGGR, AGGR_PRIME = 0, 1, 2, 3


@dataclass(frozen=True)
class AugSpec:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 32
    flip_p: float = 0.5
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    gray_p: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_p: float = 0.5

    def validate(self, source_size: int | None = None) -> "AugSpec":
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValueError(f"bad crop_ratio {self.crop_ratio}")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")
        if source_size is not None and self.out_size > source_size:
            raise ValueError(f"out_size {self.out_size} exceeds source size {source_size}")
        b, c, s, h = self.jitter
        if min(b, c, s) < 0 or not 0.0 <= h <= 0.5:
            raise ValueError(f"bad jitter strengths {self.jitter}")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"bad blur_sigma {self.blur_sigma}")
        return self

    def noisy(self, factor: float = 2.0) -> "AugSpec":
        """Same recipe with every jitter strength scaled (hue capped at 0.5)."""
        b, c, s, h = self.jitter
        return replace(self, jitter=(b * factor, c * factor, s * factor, min(0.5, h * factor)))

    def photometric_off(self) -> "AugSpec":
        return replace(self, jitter_p=0.0, gray_p=0.0, blur_p=0.0)


@dataclass
class ViewBatch:
    """Four views per source image, [B, S, S, 3] float32 each."""

    v_w: np.ndarray
    v_w_prime: np.ndarray
    v_a: np.ndarray
    v_a_prime: np.ndarray
    step_seed: int

    def seed(self, index: int, branch: int) -> tuple[int, int, int]:
        return (self.step_seed, index, branch)

    def __len__(self) -> int:
        return len(self.v_w)


def sample_rng(step_seed: int, index: int, branch: int) -> np.random.Generator:
    return np.random.default_rng([int(step_seed), int(index), int(branch)])


# ---------------------------------------------------------------------------
# Batched primitives (per-sample parameters, no cross-sample arithmetic)
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[-1] != 3 or 0 in x.shape[1:]:
        raise ValueError(f"expected images [B, H, W, 3], got {x.shape}")
    return x


def hflip(images: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    out = images[..., ::-1, :].copy() if mask is None else images.copy()
    if mask is not None:
        out[mask] = images[mask][:, :, ::-1]
    return out


def luminance(images: np.ndarray) -> np.ndarray:
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def grayscale(images: np.ndarray) -> np.ndarray:
    """Replace each pixel by its luminance; channel-equal pixels pass through exactly."""
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    y = np.where((r == g) & (g == b), r, np.clip(luminance(images), 0.0, 1.0))
    return np.repeat(y[..., None], 3, axis=-1).astype(images.dtype, copy=False)


def _image_means(x: np.ndarray) -> np.ndarray:
    # row-wise pairwise sums give the same value for a sample alone or in a batch
    flat = np.ascontiguousarray(x).reshape(len(x), -1)
    return flat.sum(axis=1) / flat.shape[1]


def _blend(a: np.ndarray, b, factor: np.ndarray) -> np.ndarray:
    f = factor.reshape((-1,) + (1,) * (a.ndim - 1))
    return np.clip(f * a + (1.0 - f) * b, 0.0, 1.0)


def adjust_brightness(x, factor):
    return _blend(x, 0.0, factor)


def adjust_contrast(x, factor):
    m = _image_means(luminance(x)).reshape(-1, 1, 1, 1)
    return _blend(x, m, factor)


def adjust_saturation(x, factor):
    return _blend(x, luminance(x)[..., None], factor)


def adjust_hue(x, shift):
    """Rotate hue by ``shift`` turns via an HSV round trip."""
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    nz = delta > 0
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    d = np.where(nz, delta, 1.0)
    rc, gc, bc = (maxc - r) / d, (maxc - g) / d, (maxc - b) / d
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(nz, (h / 6.0) % 1.0, 0.0)
    h = (h + shift.reshape(-1, 1, 1)) % 1.0
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    sel = [i == k for k in range(6)]
    out_r = np.select(sel, [v, q, p, p, t, v])
    out_g = np.select(sel, [t, v, v, q, p, p])
    out_b = np.select(sel, [p, p, t, v, v, q])
    return np.clip(np.stack([out_r, out_g, out_b], axis=-1), 0.0, 1.0)


_JITTER_FNS = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(2 sigma)."""
    radius = max(1, math.ceil(2.0 * sigma))
    w = np.array([math.exp(-(t * t) / (2.0 * sigma * sigma)) for t in range(-radius, radius + 1)])
    return w / w.sum()


def gaussian_blur(images: np.ndarray, sigmas: Sequence[float]) -> np.ndarray:
    """Separable blur with reflect padding; per-sample sigma."""
    x = _as_batch(images)
    kernels = [blur_kernel(float(s)) for s in sigmas]
    R = max(len(k) // 2 for k in kernels)
    H, W = x.shape[1:3]
    if R >= min(H, W):
        raise ValueError(f"blur radius {R} too large for {H}x{W} image")
    # zero-padded taps beyond a sample's own radius leave its result unchanged
    taps = np.zeros((len(x), 2 * R + 1))
    for n, k in enumerate(kernels):
        r = len(k) // 2
        taps[n, R - r : R + r + 1] = k
    out = x.astype(np.float64)
    for axis in (1, 2):
        pad = [(0, 0)] * 4
        pad[axis] = (R, R)
        xp = np.pad(out, pad, mode="reflect")
        size = out.shape[axis]
        acc = np.zeros_like(out)
        for t in range(2 * R + 1):
            sl = [slice(None)] * 4
            sl[axis] = slice(t, t + size)
            acc += taps[:, t].reshape(-1, 1, 1, 1) * xp[tuple(sl)]
        out = acc
    return np.clip(out, 0.0, 1.0)


def resized_crop(images: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers) of per-sample boxes (top, left, h, w)."""
    x = _as_batch(images)
    B, H, W = x.shape[:3]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(B, 4)
    o = np.arange(size) + 0.5
    sy = boxes[:, :1] + o[None] * (boxes[:, 2:3] / size) - 0.5
    sx = boxes[:, 1:2] + o[None] * (boxes[:, 3:4] / size) - 0.5
    sy, sx = np.clip(sy, 0, H - 1), np.clip(sx, 0, W - 1)
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    y1, x1 = np.minimum(y0 + 1, H - 1), np.minimum(x0 + 1, W - 1)
    fy, fx = (sy - y0)[:, :, None, None], (sx - x0)[:, None, :, None]
    bi = np.arange(B)[:, None, None]
    top = x[bi, y0[:, :, None], x0[:, None, :]] * (1 - fx) + x[bi, y0[:, :, None], x1[:, None, :]] * fx
    bot = x[bi, y1[:, :, None], x0[:, None, :]] * (1 - fx) + x[bi, y1[:, :, None], x1[:, None, :]] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Per-sample parameter draws
# ---------------------------------------------------------------------------


def draw_crop_box(rng: np.random.Generator, H: int, W: int, scale, ratio) -> tuple[int, int, int, int]:
    """Random-resized-crop window; falls back to a center crop after 10 misses."""
    area = H * W
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(CROP_ATTEMPTS):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        w, h = W, H
    return (H - h) // 2, (W - w) // 2, h, w


@dataclass
class WeakParams:
    box: tuple[int, int, int, int]
    flip: bool


@dataclass
class AggressiveParams:
    jitter: bool
    factors: tuple[float, float, float, float]
    order: tuple[int, ...]
    gray: bool
    blur: bool
    sigma: float


def _factor(rng, strength: float) -> float:
    return float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))


def draw_weak(rng: np.random.Generator, spec: AugSpec, H: int, W: int) -> WeakParams:
    box = draw_crop_box(rng, H, W, spec.crop_scale, spec.crop_ratio)
    return WeakParams(box, bool(rng.uniform() < spec.flip_p))


def draw_aggressive(rng: np.random.Generator, spec: AugSpec) -> AggressiveParams:
    """A fixed number of draws per sample, whether or not each op fires."""
    bs, cs, ss, hs = spec.jitter
    jitter = bool(rng.uniform() < spec.jitter_p)
    factors = (_factor(rng, bs), _factor(rng, cs), _factor(rng, ss), float(rng.uniform(-hs, hs)))
    order = tuple(int(i) for i in rng.permutation(4))
    gray = bool(rng.uniform() < spec.gray_p)
    blur = bool(rng.uniform() < spec.blur_p)
    sigma = float(rng.uniform(*spec.blur_sigma))
    return AggressiveParams(jitter, factors, order, gray, blur, sigma)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def weak_batch(images: np.ndarray, params: Sequence[WeakParams], size: int) -> np.ndarray:
    x = resized_crop(images, np.array([p.box for p in params]), size)
    return hflip(x, np.array([p.flip for p in params]))


def _masked(fn, x: np.ndarray, mask: np.ndarray, *args) -> np.ndarray:
    if not mask.any():
        return x
    out = x.copy()
    out[mask] = fn(x[mask], *(a[mask] for a in args))
    return out


def aggressive_batch(images: np.ndarray, params: Sequence[AggressiveParams]) -> np.ndarray:
    """color jitter (random op order per sample), then grayscale, then blur."""
    x = _as_batch(images).astype(np.float64)
    on = np.array([p.jitter for p in params])
    factors = np.array([p.factors for p in params], dtype=np.float64).reshape(len(params), 4)
    order = np.array([p.order for p in params], dtype=np.int64).reshape(len(params), 4)
    for pos in range(4):
        for op, fn in enumerate(_JITTER_FNS):
            x = _masked(fn, x, on & (order[:, pos] == op), factors[:, op])
    x = _masked(grayscale, x, np.array([p.gray for p in params]))
    blur = np.array([p.blur for p in params])
    if blur.any():
        x = _masked(gaussian_blur, x, blur, np.array([p.sigma for p in params]))
    return x


def weak_augment(image: np.ndarray, rng: np.random.Generator, spec: AugSpec = AugSpec()) -> np.ndarray:
    """t1: random resized crop to ``spec.out_size`` then a coin-flip mirror."""
    H, W = image.shape[:2]
    return weak_batch(image[None], [draw_weak(rng, spec, H, W)], spec.out_size)[0].astype(np.float32)


def aggressive_augment(image: np.ndarray, rng: np.random.Generator, spec: AugSpec = AugSpec()) -> np.ndarray:
    """t2: photometric ops only; never crops or flips."""
    return aggressive_batch(image[None], [draw_aggressive(rng, spec)])[0].astype(np.float32)


def apply_primitive(primitive: str, image: np.ndarray, rng: np.random.Generator,
                    spec: AugSpec = AugSpec()) -> np.ndarray:
    """One primitive on one [H, W, 3] image with its probability drawn from ``rng``."""
    x = _as_batch(np.asarray(image)[None])
    H, W = x.shape[1:3]
    if primitive == "random_resized_crop":
        out = resized_crop(x, [draw_crop_box(rng, H, W, spec.crop_scale, spec.crop_ratio)], spec.out_size)
    elif primitive == "hflip":
        out = hflip(x) if rng.uniform() < spec.flip_p else x
    elif primitive == "color_jitter":
        p = draw_aggressive(rng, replace(spec, gray_p=0.0, blur_p=0.0))
        out = aggressive_batch(x, [p])
    elif primitive == "grayscale":
        out = grayscale(x) if rng.uniform() < spec.gray_p else x
    elif primitive == "gaussian_blur":
        fire = rng.uniform() < spec.blur_p
        sigma = rng.uniform(*spec.blur_sigma)
        out = gaussian_blur(x, [sigma]) if fire else x
    else:
        raise ValueError(f"unknown primitive {primitive!r}; expected one of {PRIMITIVES}")
    return np.clip(out[0], 0.0, 1.0).astype(np.float32)


def make_views(images: np.ndarray, step_seed: int, spec: AugSpec = AugSpec(),
               indices: Sequence[int] | None = None) -> ViewBatch:
    """v_w = t1(x), v_w' = t1'(x), v_a = t2(v_w), v_a' = t2'(v_w').

    ``indices`` are the sample ids used to key the streams (defaults to the
    position within the batch).
    """
    x = np.asarray(images)
    if x.ndim != 4 or len(x) == 0:
        raise ValueError(f"make_views needs a nonempty [B, H, W, 3] batch, got {x.shape}")
    _as_batch(x)
    ids = range(len(x)) if indices is None else [int(i) for i in indices]
    if len(ids) != len(x):
        raise ValueError("indices must match the batch length")
    H, W = x.shape[1:3]
    weak, aggr = [], []
    for branch_w, branch_a in ((WEAK, AGGR), (WEAK_PRIME, AGGR_PRIME)):
        weak.append([draw_weak(sample_rng(step_seed, i, branch_w), spec, H, W) for i in ids])
        aggr.append([draw_aggressive(sample_rng(step_seed, i, branch_a), spec) for i in ids])
    # stage 2 reads the emitted float32 weak views, so replaying it standalone is exact
    v_w = weak_batch(x, weak[0], spec.out_size).astype(np.float32)
    v_wp = weak_batch(x, weak[1], spec.out_size).astype(np.float32)
    v_a = aggressive_batch(v_w, aggr[0]).astype(np.float32)
    v_ap = aggressive_batch(v_wp, aggr[1]).astype(np.float32)
    return ViewBatch(v_w, v_wp, v_a, v_ap, int(step_seed))


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary P6 with maxval 255 and values round(255 v)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 3], got {img.shape}")
    px = np.floor(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(px.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a P6/255 PPM")
    w, h = int(m.group(1)), int(m.group(2))
    body = raw[m.end():]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
