"""Tiny MAE-style ViT encoder/decoder with per-domain adapters.

Parameters live in a :class:`ParamStore` split three ways: ``shared`` weights
used by every input, ``clean`` adapters and ``adv`` adapters.  Which parameters
are duplicated is chosen by ``ModelConfig.adapter``.  A forward pass for a given
:class:`Domain` sees the shared weights plus that domain's adapters under plain
names such as ``enc.blocks.0.ln1.gamma``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .mim import MaskSpec, visible_indices
from .tensor import ContractError, DimensionError, Tensor

ADAPTER_KINDS = ("norm-layers", "class-token", "both", "none")

# per-channel statistics applied to 0-255 pixels before patch embedding
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


class Domain(enum.Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adv"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 2
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0
    adapter: str = "norm-layers"
    decoder_adapters: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for dim, heads in (("enc_dim", "enc_heads"), ("dec_dim", "dec_heads")):
            if getattr(self, dim) % getattr(self, heads):
                raise ValueError(f"{dim} {getattr(self, dim)} not divisible by {heads} {getattr(self, heads)}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.adapter not in ADAPTER_KINDS:
            raise ValueError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class ParamStore:
    shared: dict[str, np.ndarray] = field(default_factory=dict)
    clean: dict[str, np.ndarray] = field(default_factory=dict)
    adv: dict[str, np.ndarray] = field(default_factory=dict)

    PARTITIONS = ("shared", "clean", "adv")

    def partition(self, label: str) -> dict[str, np.ndarray]:
        return {"shared": self.shared, "clean": self.clean, "adv": self.adv}[label]

    def items(self):
        """``(key, array)`` pairs, key = ``"<partition>/<name>"``, in a fixed order."""
        for label in self.PARTITIONS:
            part = self.partition(label)
            for name in part:
                yield f"{label}/{name}", part[name]

    def keys(self) -> list[str]:
        return [k for k, _ in self.items()]

    def get(self, key: str) -> np.ndarray:
        label, name = key.split("/", 1)
        return self.partition(label)[name]

    def set(self, key: str, value: np.ndarray) -> None:
        label, name = key.split("/", 1)
        self.partition(label)[name] = value

    def view(self, domain: Domain) -> dict[str, np.ndarray]:
        adapters = self.clean if domain is Domain.CLEAN else self.adv
        return {**self.shared, **adapters}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.shared.items()},
                          {k: v.copy() for k, v in self.clean.items()},
                          {k: v.copy() for k, v in self.adv.items()})

    def check(self) -> None:
        if set(self.clean) != set(self.adv):
            raise ContractError("clean and adversarial adapters differ in names")
        for k in self.clean:
            if self.clean[k].shape != self.adv[k].shape:
                raise ContractError(f"adapter {k} shape mismatch between domains")
        if set(self.shared) & set(self.clean):
            raise ContractError("shared and adapter partitions overlap")


def leaf_tensors(store: ParamStore, requires_grad: bool = True) -> dict[str, Tensor]:
    """One leaf tensor per stored array, keyed like ``ParamStore.items``."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in store.items()}


def domain_view(leaves: Mapping[str, Tensor], domain: Domain) -> dict[str, Tensor]:
    """Plain-named parameters a forward pass in ``domain`` uses."""
    out = {}
    own = domain.value + "/"
    for k, t in leaves.items():
        if k.startswith("shared/"):
            out[k[7:]] = t
        elif k.startswith(own):
            out[k[len(own):]] = t
    return out


def _as_view(params, domain: Domain) -> Mapping[str, Tensor]:
    if isinstance(params, ParamStore):
        return {k: Tensor(v) for k, v in params.view(domain).items()}
    first = next(iter(params))
    if "/" in first:
        return domain_view(params, domain)
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


# ----------------------------------------------------------------------- init


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table ``[grid*grid, dim]``; row-major grid order."""
    if dim % 4:
        raise DimensionError("sin-cos embedding dim must be divisible by 4")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(ys), enc(xs)], axis=1)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _adapter_names(cfg: ModelConfig) -> tuple[bool, bool]:
    norms = cfg.adapter in ("norm-layers", "both")
    cls = cfg.adapter in ("class-token", "both")
    return norms, cls


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Xavier-uniform linears, unit/zero LayerNorms, zero class token.

    Adversarial adapters start as an exact copy of the clean ones.
    """
    rng = np.random.default_rng(seed)
    norms_dup, cls_dup = _adapter_names(cfg)
    store = ParamStore()

    def linear(prefix, fan_in, fan_out):
        store.shared[prefix + ".w"] = _xavier(rng, fan_in, fan_out)
        store.shared[prefix + ".b"] = np.zeros(fan_out)

    def norm(prefix, dim, duplicate):
        target = store.clean if duplicate else store.shared
        target[prefix + ".gamma"] = np.ones(dim)
        target[prefix + ".beta"] = np.zeros(dim)

    def block(prefix, dim, duplicate):
        hidden = int(dim * cfg.mlp_ratio)
        norm(prefix + ".ln1", dim, duplicate)
        linear(prefix + ".qkv", dim, 3 * dim)
        linear(prefix + ".proj", dim, dim)
        norm(prefix + ".ln2", dim, duplicate)
        linear(prefix + ".fc1", dim, hidden)
        linear(prefix + ".fc2", hidden, dim)

    linear("enc.patch_embed", cfg.patch_dim, cfg.enc_dim)
    (store.clean if cls_dup else store.shared)["enc.cls_token"] = np.zeros(cfg.enc_dim)
    for i in range(cfg.enc_depth):
        block(f"enc.blocks.{i}", cfg.enc_dim, norms_dup)
    norm("enc.norm", cfg.enc_dim, norms_dup)

    dec_dup = norms_dup and cfg.decoder_adapters
    linear("dec.embed", cfg.enc_dim, cfg.dec_dim)
    store.shared["dec.mask_token"] = rng.normal(0.0, 0.02, size=cfg.dec_dim)
    for i in range(cfg.dec_depth):
        block(f"dec.blocks.{i}", cfg.dec_dim, dec_dup)
    norm("dec.norm", cfg.dec_dim, dec_dup)
    linear("dec.pred", cfg.dec_dim, cfg.patch_dim)

    for part in (store.shared, store.clean):
        for k in part:
            part[k] = np.asarray(part[k], dtype=dtype)
    store.adv = {k: v.copy() for k, v in store.clean.items()}
    return store


# -------------------------------------------------------------------- forward


def pixel_normalizer(channels: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(scale, shift)`` mapping 0-255 pixels to the model's scale."""
    if channels == 3:
        mean, std = np.array(PIXEL_MEAN), np.array(PIXEL_STD)
    else:
        mean, std = np.full(channels, 0.5), np.full(channels, 0.25)
    scale_ = 1.0 / (255.0 * std)
    shift = -mean / std
    return scale_.reshape(-1, 1, 1).astype(dtype), shift.reshape(-1, 1, 1).astype(dtype)


def normalize_pixels(images: np.ndarray) -> np.ndarray:
    s, b = pixel_normalizer(images.shape[-3], np.float64)
    return np.asarray(images, dtype=np.float64) * s + b


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """``[..., C, H, W] -> [..., N, C*p*p]``, differentiable."""
    *lead, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    nl = len(lead)
    x = T.reshape(image, (*lead, c, gh, p, gw, p))
    x = T.transpose(x, (*range(nl), nl + 1, nl + 3, nl + 0, nl + 2, nl + 4))
    return T.reshape(x, (*lead, gh * gw, c * p * p))


def unpatchify(patches, patch_size: int, channels: int):
    """Inverse of :func:`patchify`; accepts arrays or tensors."""
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    *lead, n, _ = data.shape
    g = int(round(np.sqrt(n)))
    p = patch_size
    nl = len(lead)
    x = data.reshape(*lead, g, g, channels, p, p)
    x = x.transpose(*range(nl), nl + 2, nl + 0, nl + 3, nl + 1, nl + 4)
    return x.reshape(*lead, channels, g * p, g * p)


def embed_images(images, cfg: ModelConfig, dtype=np.float32) -> Tensor:
    """Raw 0-255 images ``[B, C, H, W]`` to normalized patches ``[B, N, K]``."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    x = T.cast(x, dtype)
    s, b = pixel_normalizer(cfg.channels, dtype)
    x = T.add(T.mul(x, s), b)
    return patchify(x, cfg.patch_size)


def _attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = T.linear(x, p[prefix + ".qkv.w"], p[prefix + ".qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), dh ** -0.5), -1)
    o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(o, p[prefix + ".proj.w"], p[prefix + ".proj.b"])


def _block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int, eps: float) -> Tensor:
    h = T.layer_norm(x, p[prefix + ".ln1.gamma"], p[prefix + ".ln1.beta"], eps)
    x = T.add(x, _attention(h, p, prefix, heads))
    h = T.layer_norm(x, p[prefix + ".ln2.gamma"], p[prefix + ".ln2.beta"], eps)
    h = T.gelu(T.linear(h, p[prefix + ".fc1.w"], p[prefix + ".fc1.b"]))
    return T.add(x, T.linear(h, p[prefix + ".fc2.w"], p[prefix + ".fc2.b"]))


def _keep_index(masks, batch: int, n: int) -> np.ndarray:
    if masks is None:
        return np.broadcast_to(np.arange(n), (batch, n))
    if isinstance(masks, MaskSpec):
        masks = [masks] * batch
    if len(masks) != batch:
        raise ContractError(f"{len(masks)} masks for a batch of {batch}")
    for m in masks:
        if m.n_patches != n:
            raise ContractError(f"mask built for {m.n_patches} patches, input has {n}")
    return visible_indices(masks)


_POS_CACHE: dict = {}


def _pos_table(dim: int, grid: int, dtype) -> np.ndarray:
    key = (dim, grid, np.dtype(dtype).str)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = sincos_pos_embed_2d(dim, grid).astype(dtype)
    return _POS_CACHE[key]


def encode(patches: Tensor, masks: Sequence[MaskSpec] | MaskSpec | None, domain: Domain, params,
           cfg: ModelConfig) -> Tensor:
    """Encode visible patches ``[B, N, K] -> [B, V+1, enc_dim]`` (class token first).

    ``params`` is a :class:`ParamStore` (treated as constants), a leaf map from
    :func:`leaf_tensors`, or a plain-named map such as a fine-tune extract.
    """
    p = _as_view(params, domain)
    b, n, _ = patches.shape
    if n != cfg.n_patches:
        raise DimensionError(f"expected {cfg.n_patches} patches, got {n}")
    keep = _keep_index(masks, b, n)
    dtype = patches.dtype
    x = T.linear(patches, p["enc.patch_embed.w"], p["enc.patch_embed.b"])
    x = T.add_positional(x, _pos_table(cfg.enc_dim, cfg.grid, dtype))
    if keep.shape[1] != n:
        x = T.gather_rows(x, keep)
    cls = T.broadcast_to(T.reshape(p["enc.cls_token"], (1, 1, cfg.enc_dim)), (b, 1, cfg.enc_dim))
    x = T.concat([cls, x], axis=1)
    for i in range(cfg.enc_depth):
        x = _block(x, p, f"enc.blocks.{i}", cfg.enc_heads, cfg.norm_eps)
    return T.layer_norm(x, p["enc.norm.gamma"], p["enc.norm.beta"], cfg.norm_eps)


def decode(features: Tensor, masks: Sequence[MaskSpec] | MaskSpec | None, domain: Domain, params,
           cfg: ModelConfig) -> Tensor:
    """Predict every patch ``[B, N, C*p*p]`` from encoder output ``[B, V+1, enc_dim]``."""
    p = _as_view(params, domain)
    b, v1, _ = features.shape
    n = cfg.n_patches
    keep = _keep_index(masks, b, n)
    if keep.shape[1] + 1 != v1:
        raise ContractError(f"{v1 - 1} encoded patches but the mask keeps {keep.shape[1]}")
    dtype = features.dtype
    y = T.linear(features, p["dec.embed.w"], p["dec.embed.b"])
    base = T.broadcast_to(T.reshape(p["dec.mask_token"], (1, 1, cfg.dec_dim)), (b, n, cfg.dec_dim))
    full = T.scatter_rows(y[:, 1:, :], keep, base)
    full = T.add_positional(full, _pos_table(cfg.dec_dim, cfg.grid, dtype))
    y = T.concat([y[:, :1, :], full], axis=1)
    for i in range(cfg.dec_depth):
        y = _block(y, p, f"dec.blocks.{i}", cfg.dec_heads, cfg.norm_eps)
    y = T.layer_norm(y, p["dec.norm.gamma"], p["dec.norm.beta"], cfg.norm_eps)
    y = T.linear(y, p["dec.pred.w"], p["dec.pred.b"])
    return y[:, 1:, :]


def forward(images, masks, domain: Domain, params, cfg: ModelConfig) -> Tensor:
    """Full autoencoder on raw images: ``[B, C, H, W] -> [B, N, C*p*p]``."""
    dtype = _param_dtype(params)
    patches = embed_images(images, cfg, dtype)
    return decode(encode(patches, masks, domain, params, cfg), masks, domain, params, cfg)


def _param_dtype(params):
    if isinstance(params, ParamStore):
        return next(iter(params.shared.values())).dtype
    v = next(iter(params.values()))
    return v.dtype


def pooled_features(images, params, cfg: ModelConfig, domain: Domain = Domain.CLEAN) -> Tensor:
    """Mean of encoder patch-token outputs over the full (unmasked) image."""
    dtype = _param_dtype(params)
    z = encode(embed_images(images, cfg, dtype), None, domain, params, cfg)
    return T.mean(z[:, 1:, :], axis=1)


def extract_finetune_params(store: ParamStore) -> dict[str, np.ndarray]:
    """Encoder-side shared weights plus clean adapters, under plain names."""
    out = {k: v for k, v in store.shared.items() if k.startswith("enc.")}
    out.update({k: v for k, v in store.clean.items() if k.startswith("enc.")})
    return out


def dropped_params(store: ParamStore) -> list[str]:
    """Store keys that :func:`extract_finetune_params` leaves out."""
    kept = set(extract_finetune_params(store))
    out = []
    for key, _ in store.items():
        label, name = key.split("/", 1)
        if label == "adv" or name not in kept:
            out.append(key)
    return out
