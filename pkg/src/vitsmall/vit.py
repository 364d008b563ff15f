"""Monolithic Vision Transformer for low-resolution inputs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, NonFiniteError, ParameterError, Tensor

INIT_SCHEMES = ("uniform", "xavier", "truncated-normal")


@dataclass
class ViTConfig:
    image_size: tuple = (32, 32)
    patch_size: int = 4
    depth: int = 9
    dim: int = 192
    heads: int = 12
    mlp_ratio: float = 2.0
    dropout: float = 0.0
    attn_dropout: float = 0.0
    pos_interp: str = "bilinear"
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ParameterError(f"image size {self.image_size} not divisible by patch size {p}")
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        if self.mlp_ratio < 1:
            raise ParameterError("mlp_ratio must be >= 1")
        if not (0 <= self.dropout < 1 and 0 <= self.attn_dropout < 1):
            raise ParameterError("dropout rates must lie in [0, 1)")
        if self.pos_interp not in ("bilinear", "bicubic"):
            raise ParameterError(f"unknown pos_interp {self.pos_interp!r}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"unsupported dtype {self.dtype!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def patch_size_for(image_size: int) -> int:
    """Patch size used for a square input: 8 for 64x64, 4 for 32x32."""
    return 8 if image_size >= 64 else 4


# ---------------------------------------------------------------- patches

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)(W/p), p*p*C), patches in row-major order."""
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    b, h, w, c = images.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    out = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, (h // p) * (w // p), p * p * c)
    return out[0] if squeeze else out


def unpatchify(patches: np.ndarray, p: int, h: int, w: int, c: int = 3) -> np.ndarray:
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b = patches.shape[0]
    out = patches.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, h, w, c)
    return out[0] if squeeze else out


# ---------------------------------------------------------------- DPE

def _linear_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) align-corners linear interpolation matrix."""
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    # a single output cell samples the grid centre
    pos = [(src - 1) / 2.0] if dst == 1 else np.arange(dst) * (src - 1) / (dst - 1)
    for i, x in enumerate(pos):
        lo = min(int(math.floor(x)), src - 2)
        t = x - lo
        m[i, lo] += 1.0 - t
        m[i, lo + 1] += t
    return m


def _cubic_weights(src: int, dst: int, a: float = -0.75) -> np.ndarray:
    """(dst, src) align-corners bicubic (Keys) interpolation matrix, edge-clamped."""
    if src == 1 or dst == 1:
        return _linear_weights(src, dst)
    m = np.zeros((dst, src))

    def kernel(d):
        d = abs(d)
        if d <= 1:
            return (a + 2) * d ** 3 - (a + 3) * d ** 2 + 1
        if d < 2:
            return a * d ** 3 - 5 * a * d ** 2 + 8 * a * d - 4 * a
        return 0.0

    for i in range(dst):
        x = i * (src - 1) / (dst - 1)
        base = int(math.floor(x))
        for k in range(base - 1, base + 3):
            m[i, min(max(k, 0), src - 1)] += kernel(x - k)
    return m


def interpolation_matrix(src: tuple[int, int], dst: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Matrix M with ``M @ grid.reshape(-1, D)`` = resized grid, row-major."""
    fn = _linear_weights if mode == "bilinear" else _cubic_weights
    return np.kron(fn(src[0], dst[0]), fn(src[1], dst[1]))


def interpolate_pos_embed(grid: np.ndarray, target, mode: str = "bilinear") -> np.ndarray:
    """Resize a (G, G, D) (or (Gh, Gw, D)) position grid to the target grid size."""
    if isinstance(target, int):
        target = (target, target)
    gh, gw, d = grid.shape
    if (gh, gw) == tuple(target):
        return grid
    m = interpolation_matrix((gh, gw), tuple(target), mode)
    out = m @ grid.reshape(gh * gw, d).astype(np.float64)
    return out.reshape(target[0], target[1], d).astype(grid.dtype)


# ---------------------------------------------------------------- init

def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """N(0, std^2) redrawn until every value lies within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int, scheme: str) -> np.ndarray:
    if scheme == "uniform":
        return rng.uniform(-0.05, 0.05, (fan_in, fan_out))
    if scheme == "xavier":
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, (fan_in, fan_out))
    if scheme == "truncated-normal":
        return truncated_normal(rng, (fan_in, fan_out))
    raise ParameterError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def init_weights(config: ViTConfig, scheme: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Backbone parameters as arrays, in a fixed name order."""
    if scheme not in INIT_SCHEMES:
        raise ParameterError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    dt = config.np_dtype
    d, hd = config.dim, config.hidden_dim
    pdim = config.patch_size ** 2 * 3
    params: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out):
        params[f"{name}.weight"] = init_matrix(rng, fan_in, fan_out, scheme).astype(dt)
        params[f"{name}.bias"] = np.zeros(fan_out, dtype=dt)

    def norm(name):
        params[f"{name}.gain"] = np.ones(d, dtype=dt)
        params[f"{name}.bias"] = np.zeros(d, dtype=dt)

    lin("patch_embed", pdim, d)
    params["cls_token"] = truncated_normal(rng, (d,)).astype(dt)
    params["pos_embed"] = truncated_normal(rng, (config.num_patches + 1, d)).astype(dt)
    for i in range(config.depth):
        b = f"blocks.{i}"
        norm(f"{b}.norm1")
        lin(f"{b}.attn.qkv", d, 3 * d)
        lin(f"{b}.attn.proj", d, d)
        norm(f"{b}.norm2")
        lin(f"{b}.mlp.fc1", d, hd)
        lin(f"{b}.mlp.fc2", hd, d)
    norm("norm")
    return params


def parameter_count(config: ViTConfig) -> int:
    d, hd, depth = config.dim, config.hidden_dim, config.depth
    pdim = config.patch_size ** 2 * 3
    block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hd + hd) + (hd * d + d)
    return pdim * d + d + d + (config.num_patches + 1) * d + depth * block + 2 * d


# ---------------------------------------------------------------- model

@dataclass
class EncoderOutput:
    tokens: Tensor
    cls: Tensor
    patches: Tensor
    attention: list[np.ndarray] = field(default_factory=list)


class ViT:
    """Pre-norm ViT encoder: patch embed, CLS token, learned position grid."""

    def __init__(self, config: ViTConfig, params: dict[str, np.ndarray] | None = None,
                 scheme: str = "truncated-normal", rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ParameterError("need params or an rng to initialize")
            params = init_weights(config, scheme, rng)
        expected = init_weights_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise KeyError(f"missing backbone tensor {name!r}")
            if tuple(params[name].shape) != shape:
                raise DimensionError(f"tensor {name!r} has shape {params[name].shape}, expected {shape}")
        self.params: dict[str, Tensor] = {
            k: T.parameter(np.array(params[k], dtype=config.np_dtype), name=k) for k in expected}
        self._interp_cache: dict = {}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _pos_embed(self, grid: tuple[int, int]) -> Tensor:
        pos = self.params["pos_embed"]
        if grid == self.config.grid:
            return pos
        m = self._interp_cache.get(grid)
        if m is None:
            m = interpolation_matrix(self.config.grid, grid, self.config.pos_interp).astype(self.config.np_dtype)
            self._interp_cache[grid] = m
        cls_pos = T.slice_axis(pos, 0, 0, 1)
        patch_pos = T.matmul(Tensor(m), T.slice_axis(pos, 0, 1, pos.shape[0]))
        return T.concat([cls_pos, patch_pos], axis=0)

    def embed(self, images: np.ndarray) -> Tensor:
        """Token sequence (B, n+1, D) with CLS prepended and positions added."""
        cfg = self.config
        images = np.asarray(images, dtype=cfg.np_dtype)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DimensionError(f"expected (B, H, W, 3) images, got {images.shape}")
        b, h, w, _ = images.shape
        p = cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"view {h}x{w} not divisible by patch size {p}")
        if h > cfg.image_size[0] or w > cfg.image_size[1]:
            raise DimensionError(f"view {h}x{w} larger than configured {cfg.image_size}")
        P = self.params
        tokens = T.linear(Tensor(patchify(images, p)), P["patch_embed.weight"], P["patch_embed.bias"])
        cls = T.add(Tensor(np.zeros((b, 1, cfg.dim), dtype=cfg.np_dtype)), P["cls_token"])
        x = T.concat([cls, tokens], axis=1)
        return T.add(x, self._pos_embed((h // p, w // p)))

    def block(self, x: Tensor, i: int, train: bool = False, rng=None, want_attention: bool = False):
        cfg = self.config
        P = self.params
        pre = f"blocks.{i}"
        b, n, d = x.shape
        heads = cfg.heads
        hd = d // heads
        drop = cfg.dropout if train else 0.0
        adrop = cfg.attn_dropout if train else 0.0

        h = T.layer_norm(x, P[f"{pre}.norm1.gain"], P[f"{pre}.norm1.bias"])
        qkv = T.linear(h, P[f"{pre}.attn.qkv.weight"], P[f"{pre}.attn.qkv.bias"])
        qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = T.unstack(qkv, 0)
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        weights = attn.data if want_attention else None
        attn = T.dropout(attn, adrop, rng, training=adrop > 0)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        out = T.linear(ctx, P[f"{pre}.attn.proj.weight"], P[f"{pre}.attn.proj.bias"])
        x = T.add(x, T.dropout(out, drop, rng, training=drop > 0))

        h = T.layer_norm(x, P[f"{pre}.norm2.gain"], P[f"{pre}.norm2.bias"])
        h = T.gelu(T.linear(h, P[f"{pre}.mlp.fc1.weight"], P[f"{pre}.mlp.fc1.bias"]))
        h = T.dropout(h, drop, rng, training=drop > 0)
        h = T.linear(h, P[f"{pre}.mlp.fc2.weight"], P[f"{pre}.mlp.fc2.bias"])
        x = T.add(x, T.dropout(h, drop, rng, training=drop > 0))
        return x, weights

    def forward(self, images: np.ndarray, want_attention: bool = False, train: bool = False,
                rng: np.random.Generator | None = None) -> EncoderOutput:
        x = self.embed(images)
        attention = []
        for i in range(self.config.depth):
            try:
                x, w = self.block(x, i, train=train, rng=rng, want_attention=want_attention)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite activations in block {i}: {exc}") from None
            if not np.isfinite(x.data).all():
                raise NonFiniteError(f"non-finite activations in block {i}")
            if want_attention:
                attention.append(w)
        x = T.layer_norm(x, self.params["norm.gain"], self.params["norm.bias"])
        n = x.shape[1]
        return EncoderOutput(tokens=x, cls=T.getitem(x, (slice(None), 0)),
                             patches=T.slice_axis(x, 1, 1, n), attention=attention)

    __call__ = forward


def init_weights_shapes(config: ViTConfig) -> dict[str, tuple]:
    d, hd = config.dim, config.hidden_dim
    shapes = {"patch_embed.weight": (config.patch_size ** 2 * 3, d), "patch_embed.bias": (d,),
              "cls_token": (d,), "pos_embed": (config.num_patches + 1, d)}
    for i in range(config.depth):
        b = f"blocks.{i}"
        shapes.update({
            f"{b}.norm1.gain": (d,), f"{b}.norm1.bias": (d,),
            f"{b}.attn.qkv.weight": (d, 3 * d), f"{b}.attn.qkv.bias": (3 * d,),
            f"{b}.attn.proj.weight": (d, d), f"{b}.attn.proj.bias": (d,),
            f"{b}.norm2.gain": (d,), f"{b}.norm2.bias": (d,),
            f"{b}.mlp.fc1.weight": (d, hd), f"{b}.mlp.fc1.bias": (hd,),
            f"{b}.mlp.fc2.weight": (hd, d), f"{b}.mlp.fc2.bias": (d,),
        })
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


class LinearClassifier:
    """Single linear map from the CLS feature to class logits."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.params = {
            "classifier.weight": T.parameter(truncated_normal(rng, (dim, num_classes)).astype(dtype),
                                             name="classifier.weight"),
            "classifier.bias": T.parameter(np.zeros(num_classes, dtype=dtype), name="classifier.bias"),
        }

    def __call__(self, features: Tensor) -> Tensor:
        return T.linear(features, self.params["classifier.weight"], self.params["classifier.bias"])


class ViTClassifier:
    """Backbone + linear head; the supervised model."""

    def __init__(self, backbone: ViT, head: LinearClassifier):
        self.backbone = backbone
        self.head = head

    @property
    def config(self) -> ViTConfig:
        return self.backbone.config

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.head.params}

    def forward(self, images, train: bool = False, rng=None, want_attention: bool = False):
        out = self.backbone.forward(images, want_attention=want_attention, train=train, rng=rng)
        return self.head(out.cls), out

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        chunks = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                chunks.append(self.forward(images[i:i + batch_size])[0].data)
        return np.concatenate(chunks, axis=0)
