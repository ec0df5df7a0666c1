"""Random patch masking and the masked-reconstruction objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


class ConfigError(ValueError):
    pass


def masked_count(n_patches: int, ratio: float) -> int:
    # round half up
    return int(math.floor(ratio * n_patches + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    masked: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        m = self.masked
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ContractError("masked indices must be strictly increasing")
        if m and (m[0] < 0 or m[-1] >= self.n_patches):
            raise ContractError(f"masked index out of range for {self.n_patches} patches")

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_patches, dtype=bool)
        keep[list(self.masked)] = False
        return np.flatnonzero(keep)

    @property
    def masked_array(self) -> np.ndarray:
        return np.asarray(self.masked, dtype=np.int64)


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniform subset of ``masked_count(n, ratio)`` patches, drawn without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = masked_count(n_patches, ratio)
    masked = np.sort(rng.permutation(n_patches)[:k])
    return MaskSpec(n_patches, tuple(int(i) for i in masked), ratio)


def sample_masks(batch: int, n_patches: int, ratio: float, rng: np.random.Generator) -> list[MaskSpec]:
    return [sample_mask(n_patches, ratio, rng) for _ in range(batch)]


def visible_indices(masks: Sequence[MaskSpec]) -> np.ndarray:
    """Stack per-sample visible index lists into ``[B, V]``."""
    rows = [m.visible for m in masks]
    if len({len(r) for r in rows}) > 1:
        raise ContractError("all masks in a batch must keep the same number of patches")
    return np.stack(rows).astype(np.int64)


def masked_indices(masks: Sequence[MaskSpec]) -> np.ndarray:
    rows = [m.masked_array for m in masks]
    if len({len(r) for r in rows}) > 1:
        raise ContractError("all masks in a batch must mask the same number of patches")
    return np.stack(rows)


def patchify_array(images: np.ndarray, p: int) -> np.ndarray:
    """``[..., C, H, W] -> [..., N, C*p*p]`` with row-major patch order."""
    *lead, c, h, w = images.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    nl = len(lead)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl + 0, nl + 2, nl + 4)
    return x.reshape(*lead, gh * gw, c * p * p)


def reconstruction_target(image: np.ndarray, patch_size: int, normalize_per_patch: bool = True,
                          eps: float = 1e-6) -> np.ndarray:
    """Patchified pixels, optionally standardized per patch."""
    target = patchify_array(np.asarray(image), patch_size)
    if normalize_per_patch:
        mu = target.mean(-1, keepdims=True)
        var = target.var(-1, keepdims=True)
        centered = np.where(np.ptp(target, axis=-1, keepdims=True) == 0, 0.0, target - mu)
        target = centered / np.sqrt(var + eps)
    return target


def reconstruction_loss(pred: Tensor, target, masks: Sequence[MaskSpec]) -> Tensor:
    """Mean squared error over masked patches only.

    ``pred`` and ``target`` are ``[B, N, K]``; one mask per sample.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    idx = masked_indices(masks)
    if idx.shape[-1] == 0:
        raise ContractError("reconstruction loss is undefined for an empty mask")
    picked = T.gather_rows(pred, idx)
    tgt = np.take_along_axis(target, idx[..., None], axis=-2).astype(pred.dtype, copy=False)
    return T.mse(picked, tgt)
