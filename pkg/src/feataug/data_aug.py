"""Input-space view generation for small images and synthetic vectors.

Images are ``3 x h x w`` uint8 arrays; each transform returns a new uint8
array.  Pipelines are ordered transform lists, each applied with its own
probability.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

SETTINGS = ("SymmWeakAug", "SymmStrongAug", "AsymmStrongAug")
KINDS = ("random_resized_crop", "hflip", "color_jitter", "grayscale", "gaussian_blur", "solarize")

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    p: float = 1.0
    params: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}")
        if not 0 <= self.p <= 1:
            raise ValueError("probability must lie in [0, 1]")


@dataclass(frozen=True)
class Pipeline:
    size: int
    transforms: tuple[TransformSpec, ...]

    def kinds(self) -> list[str]:
        return [t.kind for t in self.transforms]

    def get(self, kind: str) -> TransformSpec | None:
        return next((t for t in self.transforms if t.kind == kind), None)


def _base_transforms(crop_min_area: float, jitter: tuple[float, float, float, float]) -> list[TransformSpec]:
    b, c, s, h = jitter
    return [
        TransformSpec("random_resized_crop", 1.0, {"area": (crop_min_area, 1.0), "ratio": (3 / 4, 4 / 3)}),
        TransformSpec("hflip", 0.5),
        TransformSpec("color_jitter", 0.8, {"brightness": b, "contrast": c, "saturation": s, "hue": h}),
        TransformSpec("grayscale", 0.2),
    ]


def make_pipeline(
    setting: str,
    size: int = 32,
    *,
    crop_min_area: float = 0.2,
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1),
    strong_probs: tuple[float, float] = (0.5, 0.1),
    asymm_anchor: tuple[float, float] = (1.0, 0.0),
    asymm_positive: tuple[float, float] = (0.1, 0.2),
) -> tuple[Pipeline, Pipeline]:
    """The (anchor, positive) pipeline pair for a DA setting.

    Probability tuples are ``(blur, solarize)``.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown DA setting {setting!r}; choose from {SETTINGS}")
    base = _base_transforms(crop_min_area, jitter)

    def with_extras(blur_p: float, sol_p: float) -> Pipeline:
        extras = [TransformSpec("gaussian_blur", blur_p, {"sigma": (0.1, 2.0)}), TransformSpec("solarize", sol_p)]
        return Pipeline(size, tuple(base + extras))

    if setting == "SymmWeakAug":
        pipe = Pipeline(size, tuple(base))
        return pipe, pipe
    if setting == "SymmStrongAug":
        pipe = with_extras(*strong_probs)
        return pipe, pipe
    return with_extras(*asymm_anchor), with_extras(*asymm_positive)


# ---------------------------------------------------------------- primitives


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``c x h x w`` float array (half-pixel centres)."""
    _, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = img[:, top : top + side, left : left + side]
    if side == size:
        return crop.copy()
    return _to_u8(resize_bilinear(crop.astype(np.float64), size, size))


def random_resized_crop(img, rng, size, area=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    _, h, w = img.shape
    total = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = total * rng.uniform(area[0], area[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top : top + ch, left : left + cw].astype(np.float64)
            return _to_u8(resize_bilinear(crop, size, size))
    return center_crop_resize(img, size)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def _luma(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def grayscale(img: np.ndarray) -> np.ndarray:
    y = _to_u8(_luma(img.astype(np.float64)))
    return np.stack([y, y, y])


def _rgb_to_hsv(x):
    r, g, b = x
    maxc = x.max(axis=0)
    minc = x.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return hue, s, v


def _hsv_to_rgb(hue, s, v):
    i = np.floor(hue * 6.0)
    f = hue * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(img, rng, brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1) -> np.ndarray:
    x = img.astype(np.float64) / 255.0
    for op in rng.permutation(4):
        if op == 0:
            x = np.clip(x * rng.uniform(1 - brightness, 1 + brightness), 0, 1)
        elif op == 1:
            m = _luma(x).mean()
            x = np.clip(m + (x - m) * rng.uniform(1 - contrast, 1 + contrast), 0, 1)
        elif op == 2:
            gray = _luma(x)[None]
            x = np.clip(gray + (x - gray) * rng.uniform(1 - saturation, 1 + saturation), 0, 1)
        else:
            hh, ss, vv = _rgb_to_hsv(x)
            x = _hsv_to_rgb((hh + rng.uniform(-hue, hue)) % 1.0, ss, vv)
    return _to_u8(x * 255.0)


def blur_kernel_size(h: int) -> int:
    k = math.ceil(h / 10)
    return k if k % 2 else k + 1


def gaussian_blur(img, rng, sigma=(0.1, 2.0)) -> np.ndarray:
    s = rng.uniform(*sigma)
    ksize = blur_kernel_size(img.shape[1])
    r = ksize // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / s) ** 2)
    taps /= taps.sum()
    x = np.pad(img.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
    h, w = img.shape[1:]
    x = sum(taps[i] * x[:, i : i + h, :] for i in range(ksize))
    x = sum(taps[i] * x[:, :, i : i + w] for i in range(ksize))
    return _to_u8(x)


def solarize(img: np.ndarray, threshold: int = 128) -> np.ndarray:
    img = np.asarray(img, dtype=np.uint8)
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def transform(kind: str, params: dict, image: np.ndarray, rng: np.random.Generator, size: int | None = None):
    size = size or image.shape[1]
    if kind == "random_resized_crop":
        return random_resized_crop(image, rng, size, **params)
    if kind == "hflip":
        return hflip(image)
    if kind == "color_jitter":
        return color_jitter(image, rng, **params)
    if kind == "grayscale":
        return grayscale(image)
    if kind == "gaussian_blur":
        return gaussian_blur(image, rng, **params)
    if kind == "solarize":
        return solarize(image, **params)
    raise ValueError(f"unknown transform {kind!r}")


def apply_pipeline(spec: Pipeline, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view.  A skipped crop falls back to a centre crop-resize."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3*h*w image, got {image.shape}")
    out = image
    for t in spec.transforms:
        hit = rng.random() < t.p
        if t.kind == "random_resized_crop":
            out = transform(t.kind, t.params, out, rng, spec.size) if hit else center_crop_resize(out, spec.size)
        elif hit:
            out = transform(t.kind, t.params, out, rng, spec.size)
    return out


def augment_batch(
    images: np.ndarray,
    pipeline: Pipeline,
    seed: int,
    stream_ids,
    *,
    workers: int = 0,
) -> np.ndarray:
    """Augment a batch with one independent rng stream per sample.

    The stream for sample ``i`` is seeded by ``(seed, stream_ids[i])`` so the
    result does not depend on ``workers``.
    """

    def one(args):
        img, sid = args
        return apply_pipeline(pipeline, img, np.random.default_rng([seed, int(sid)]))

    jobs = list(zip(images, stream_ids))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            views = list(pool.map(one, jobs))
    else:
        views = [one(j) for j in jobs]
    return np.stack(views)


def to_float(images: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    """uint8 ``b x 3 x h x w`` -> per-channel standardized floats."""
    x = images.astype(np.float64) / 255.0
    m = np.asarray(mean).reshape(1, 3, 1, 1)
    s = np.asarray(std).reshape(1, 3, 1, 1)
    return (x - m) / s


@dataclass(frozen=True)
class VectorAugConfig:
    noise_sigma: float = 0.1  # relative to per-dimension data std
    mask_rate: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1

    def __post_init__(self):
        if self.noise_sigma < 0 or not 0 <= self.mask_rate < 1 or self.scale_low > self.scale_high:
            raise ValueError("invalid vector augmentation parameters")


def synthetic_view(v: np.ndarray, rng: np.random.Generator, cfg: VectorAugConfig = VectorAugConfig(), data_std=1.0):
    """Noisy, masked, rescaled copy of a vector or of each row of a batch.

    Noise has standard deviation ``cfg.noise_sigma * data_std`` per
    dimension; each coordinate is zeroed with probability ``cfg.mask_rate``;
    each row is multiplied by a factor drawn from
    ``U(cfg.scale_low, cfg.scale_high)``.
    """
    v = np.asarray(v, dtype=np.float64)
    x = np.atleast_2d(v)
    sigma = cfg.noise_sigma * np.asarray(data_std, dtype=np.float64)
    out = x + rng.normal(size=x.shape) * sigma
    if cfg.mask_rate > 0:
        out = out * (rng.random(x.shape) >= cfg.mask_rate)
    out = out * rng.uniform(cfg.scale_low, cfg.scale_high, size=(x.shape[0], 1))
    return out.reshape(v.shape)
