"""Multi-crop view generation: 2 global + 8 local low-resolution views per image.

All ops work on (H, W, 3) float arrays in [0, 1]; normalization happens last.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import stream
from .tensor import ParameterError

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    solarize_p: float = 0.0
    solarize_threshold: float = 0.5

    def __post_init__(self):
        self.blur_sigma = tuple(self.blur_sigma)
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p", "solarize_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name}={v} is not a probability")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0, solarize_p=0.0)


@dataclass
class ViewConfig:
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple = (0.7, 1.0)
    local_scale: tuple = (0.2, 0.5)
    global_size: int = 32
    local_size: int = 16
    ratio: tuple = (3 / 4, 4 / 3)
    # one AugmentConfig per global view, one shared by all locals
    global_augs: list = field(default_factory=lambda: [
        AugmentConfig(blur_p=1.0, solarize_p=0.0),
        AugmentConfig(blur_p=0.1, solarize_p=0.2),
    ])
    local_aug: AugmentConfig = field(default_factory=lambda: AugmentConfig(blur_p=0.5))

    def __post_init__(self):
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        self.ratio = tuple(self.ratio)
        self.global_augs = [a if isinstance(a, AugmentConfig) else AugmentConfig(**a) for a in self.global_augs]
        if not isinstance(self.local_aug, AugmentConfig):
            self.local_aug = AugmentConfig(**self.local_aug)
        self.validate()

    def validate(self) -> None:
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi <= 1):
                raise ParameterError(f"{name}={getattr(self, name)} must satisfy 0 < min < max <= 1")
        if self.local_size * 2 != self.global_size:
            raise ParameterError("local views must have 1/4 the area of global views "
                                 f"(got {self.local_size} vs {self.global_size})")
        if len(self.global_augs) != self.n_global:
            raise ParameterError(f"need {self.n_global} global augment configs, got {len(self.global_augs)}")
        if self.n_global < 1 or self.n_local < 0:
            raise ParameterError("view counts must be positive")

    @classmethod
    def cifar(cls, **kw) -> "ViewConfig":
        return cls(global_scale=(0.7, 1.0), local_scale=(0.2, 0.5), global_size=32, local_size=16, **kw)

    @classmethod
    def tiny_imagenet(cls, **kw) -> "ViewConfig":
        return cls(global_scale=(0.5, 1.0), local_scale=(0.2, 0.4), global_size=64, local_size=32, **kw)

    @classmethod
    def for_image_size(cls, size: int, **kw) -> "ViewConfig":
        if size == 32:
            return cls.cifar(**kw)
        if size == 64:
            return cls.tiny_imagenet(**kw)
        return cls(global_size=size, local_size=size // 2, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewBatch:
    globals: list
    locals: list
    source_id: int = -1


# ---------------------------------------------------------------- geometry

def _sample_matrix(start: float, length: float, out: int, src: int) -> np.ndarray:
    """(out, src) bilinear weights sampling [start, start+length) at pixel centres."""
    pos = start + (np.arange(out) + 0.5) * (length / out) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    t = pos - lo
    m = np.zeros((out, src))
    rows = np.arange(out)
    np.add.at(m, (rows, lo), 1 - t)
    np.add.at(m, (rows, hi), t)
    return m


def crop_resize(image: np.ndarray, box, out_size: int) -> np.ndarray:
    """Bilinear resample of ``box = (top, left, height, width)`` (float pixels)."""
    top, left, h, w = box
    H, W = image.shape[:2]
    ry = _sample_matrix(top, h, out_size, H)
    rx = _sample_matrix(left, w, out_size, W)
    return np.einsum("ih,hwc,jw->ijc", ry, image, rx, optimize=True)


def sample_crop_box(shape, scale_range, rng: np.random.Generator, ratio=(3 / 4, 4 / 3), attempts: int = 10):
    """Crop box whose area fraction is uniform on ``scale_range``.

    Falls back to a centred square crop of the drawn area after ``attempts``
    rejected aspect ratios.
    """
    H, W = shape[:2]
    area = H * W
    lo, hi = scale_range
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    frac = lo
    for _ in range(attempts):
        frac = rng.uniform(lo, hi)
        ar = math.exp(rng.uniform(*log_r))
        w = math.sqrt(frac * area * ar)
        h = math.sqrt(frac * area / ar)
        if 0 < w <= W and 0 < h <= H:
            top = rng.uniform(0, H - h)
            left = rng.uniform(0, W - w)
            return top, left, h, w
    side = min(math.sqrt(frac * area), H, W)
    return (H - side) / 2, (W - side) / 2, side, side


def random_resized_crop(image: np.ndarray, scale_range, out_size: int, rng: np.random.Generator,
                        ratio=(3 / 4, 4 / 3), return_box: bool = False):
    box = sample_crop_box(image.shape, scale_range, rng, ratio)
    view = crop_resize(image, box, out_size)
    return (view, box) if return_box else view


# ---------------------------------------------------------------- photometric

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def grayscale(image: np.ndarray) -> np.ndarray:
    g = image @ _LUMA
    return np.repeat(g[..., None], 3, axis=-1)


def adjust_brightness(image, factor):
    return np.clip(image * factor, 0, 1)


def adjust_contrast(image, factor):
    m = (image @ _LUMA).mean()
    return np.clip((image - m) * factor + m, 0, 1)


def adjust_saturation(image, factor):
    g = (image @ _LUMA)[..., None]
    return np.clip((image - g) * factor + g, 0, 1)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [np.stack(c, axis=-1) for c in
               ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros_like(hsv)
    for k in range(6):
        out = np.where((i == k)[..., None], choices[k], out)
    return out


def adjust_hue(image, shift):
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0, 1)


def color_jitter(image, rng, brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1):
    """Brightness/contrast/saturation/hue with random factors, in random order."""
    ops = []
    if brightness:
        ops.append((adjust_brightness, rng.uniform(max(0, 1 - brightness), 1 + brightness)))
    if contrast:
        ops.append((adjust_contrast, rng.uniform(max(0, 1 - contrast), 1 + contrast)))
    if saturation:
        ops.append((adjust_saturation, rng.uniform(max(0, 1 - saturation), 1 + saturation)))
    if hue:
        ops.append((adjust_hue, rng.uniform(-hue, hue)))
    for k in rng.permutation(len(ops)):
        fn, factor = ops[k]
        image = fn(image, factor)
    return image


def _blur_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for o in range(-r, r + 1):
            j = i + o
            # reflect without repeating the edge pixel
            while j < 0 or j >= n:
                j = -j if j < 0 else 2 * (n - 1) - j
            m[i, j] += kernel[o + r]
    return m


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), reflect padding."""
    r = max(1, math.ceil(3 * sigma))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    H, W = image.shape[:2]
    return np.einsum("ih,hwc,jw->ijc", _blur_matrix(H, k), image, _blur_matrix(W, k), optimize=True)


def solarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Invert pixels strictly above ``threshold``."""
    return np.where(image > threshold, 1.0 - image, image)


def augment(view: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Flip, color jitter, grayscale, blur, solarize, applied in that order."""
    cfg = cfg or AugmentConfig()
    out = view
    if cfg.flip_p and rng.random() < cfg.flip_p:
        out = hflip(out)
    if cfg.jitter_p and rng.random() < cfg.jitter_p:
        out = color_jitter(out, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    if cfg.gray_p and rng.random() < cfg.gray_p:
        out = grayscale(out)
    if cfg.blur_p and rng.random() < cfg.blur_p:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    if cfg.solarize_p and rng.random() < cfg.solarize_p:
        out = solarize(out, cfg.solarize_threshold)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- views

def generate_views(image: np.ndarray, cfg: ViewConfig, rng: np.random.Generator,
                   mean=None, std=None, source_id: int = -1) -> ViewBatch:
    """Crop, resize and augment the global and local views of one image."""
    image = np.asarray(image, dtype=np.float64)

    def finish(v):
        if mean is not None:
            v = (v - mean) / std
        return v.astype(np.float32)

    globs = [finish(augment(random_resized_crop(image, cfg.global_scale, cfg.global_size, rng, cfg.ratio),
                            rng, cfg.global_augs[i]))
             for i in range(cfg.n_global)]
    locs = [finish(augment(random_resized_crop(image, cfg.local_scale, cfg.local_size, rng, cfg.ratio),
                           rng, cfg.local_aug))
            for _ in range(cfg.n_local)]
    return ViewBatch(globs, locs, source_id)


def generate_batch(images: np.ndarray, ids, cfg: ViewConfig, seed: int, epoch: int,
                   mean=None, std=None) -> tuple[np.ndarray, np.ndarray]:
    """Views for a batch, stacked as (n_global, B, g, g, 3) and (n_local, B, l, l, 3).

    Each sample draws from its own stream keyed by (seed, epoch, id).
    """
    gl, lo = [], []
    for img, i in zip(images, ids):
        vb = generate_views(img, cfg, stream(seed, "views", epoch, int(i)), mean, std, int(i))
        gl.append(vb.globals)
        lo.append(vb.locals)
    g = np.stack([np.stack(v) for v in zip(*gl)]) if gl else np.zeros((cfg.n_global, 0))
    l = np.stack([np.stack(v) for v in zip(*lo)]) if lo and cfg.n_local else \
        np.zeros((cfg.n_local, len(gl), cfg.local_size, cfg.local_size, 3), np.float32)
    return g, l
