"""Online adversarial examples for masked image modeling.

The attacker perturbs raw 0-255 pixels inside an L-inf ball and ascends the
distance between encoder features of the perturbed input (adversarial
adapters) and of the clean input (clean adapters, held constant).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .mim import MaskSpec
from .model import Domain, ModelConfig, ParamStore, embed_images, encode
from .tensor import DimensionError, Tensor

PIXEL_MIN, PIXEL_MAX = 0.0, 255.0
DISTANCES = ("l2", "kl")
INITS = ("uniform", "zero")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 2.0
    steps: int = 2
    step_size: float | None = None  # None -> epsilon / steps
    distance: str = "l2"
    init: str = "uniform"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.epsilon > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")

    @property
    def mu(self) -> float:
        return self.epsilon / self.steps if self.step_size is None else self.step_size


def feature_distance(f_adv: Tensor, f_clean: Tensor, kind: str = "l2") -> Tensor:
    """Distance between adversarial and clean encoder features.

    ``l2``: mean squared difference over all elements.  ``kl``: softmax over the
    feature dim of each token, then KL(clean || adv) averaged over tokens.
    Only ``f_adv`` is differentiated; pass a detached ``f_clean``.
    """
    if f_adv.shape != f_clean.shape:
        raise DimensionError(f"feature shapes differ: {f_adv.shape} vs {f_clean.shape}")
    f_clean = T.detach(f_clean)
    if kind == "l2":
        return T.mse(f_adv, f_clean)
    if kind == "kl":
        lp_clean = T.log_softmax(f_clean, -1).data
        p_clean = np.exp(lp_clean)
        lq = T.log_softmax(f_adv, -1)
        cross = T.sum(T.mul(lq, p_clean), axis=-1)
        ent = (p_clean * lp_clean).sum(-1)
        return T.mean(T.sub(ent, cross))
    raise ValueError(f"unknown distance {kind!r}")


def random_init(x: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    delta = rng.uniform(-epsilon, epsilon, size=x.shape)
    return np.clip(x + delta, PIXEL_MIN, PIXEL_MAX)


def project(x_cand: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the eps-ball around ``x_orig`` intersected with the pixel range."""
    if np.shape(x_cand) != np.shape(x_orig):
        raise DimensionError(f"candidate {np.shape(x_cand)} vs original {np.shape(x_orig)}")
    lo = np.maximum(x_orig - epsilon, PIXEL_MIN)
    hi = np.minimum(x_orig + epsilon, PIXEL_MAX)
    return np.minimum(np.maximum(x_cand, lo), hi)


def sign_ascent(x: np.ndarray, loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                epsilon: float, step_size: float, steps: int, init: str,
                rng: np.random.Generator | None, trace: list | None = None) -> np.ndarray:
    """Generic L-inf PGD: start, then ``steps`` signed-gradient steps, projecting each time.

    ``trace`` (if given) receives ``(x_t, loss_t, grad_t)`` per iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    x_a = random_init(x, epsilon, rng) if init == "uniform" else x.copy()
    for _ in range(steps):
        loss, g = loss_and_grad(x_a)
        if trace is not None:
            trace.append((x_a.copy(), loss, g))
        x_a = project(x_a + step_size * np.sign(g), x, epsilon)
    return x_a


class FeatureDistanceLoss:
    """Callable ``x_a -> (L_adv, dL_adv/dx_a)`` against cached clean features."""

    def __init__(self, x: np.ndarray, masks: Sequence[MaskSpec], params: ParamStore,
                 cfg: ModelConfig, distance: str = "l2"):
        self.masks = masks
        self.cfg = cfg
        self.distance = distance
        self.dtype = next(iter(params.shared.values())).dtype
        self.clean_view = {k: Tensor(v) for k, v in params.view(Domain.CLEAN).items()}
        self.adv_view = {k: Tensor(v) for k, v in params.view(Domain.ADVERSARIAL).items()}
        clean = encode(embed_images(x, cfg, self.dtype), masks, Domain.CLEAN, self.clean_view, cfg)
        self.f_clean = T.detach(clean)

    def loss(self, x_a: Tensor) -> Tensor:
        f_adv = encode(embed_images(x_a, self.cfg, self.dtype), self.masks, Domain.ADVERSARIAL,
                       self.adv_view, self.cfg)
        # mean over samples of per-sample distance; scaling by B leaves each
        # sample's gradient sign unchanged
        return T.scale(feature_distance(f_adv, self.f_clean, self.distance), float(len(self.masks)))

    def __call__(self, x_a: np.ndarray) -> tuple[float, np.ndarray]:
        xt = Tensor(x_a, requires_grad=True)
        loss = self.loss(xt)
        g = T.grad(loss, {"x": xt})["x"]
        return loss.item() / len(self.masks), g

    def value(self, x_a: np.ndarray) -> float:
        return self.loss(Tensor(x_a)).item() / len(self.masks)


def pgd_attack(x: np.ndarray, masks: Sequence[MaskSpec], params: ParamStore, cfg: AttackConfig,
               rng: np.random.Generator, model_cfg: ModelConfig, trace: list | None = None) -> np.ndarray:
    """PGD-T on the feature-distance loss; parameters are read, never updated."""
    loss_fn = FeatureDistanceLoss(x, masks, params, model_cfg, cfg.distance)
    return sign_ascent(x, loss_fn, cfg.epsilon, cfg.mu, cfg.steps, cfg.init, rng, trace)


def fgsm_attack(x: np.ndarray, masks: Sequence[MaskSpec], params: ParamStore, cfg: AttackConfig,
                rng: np.random.Generator, model_cfg: ModelConfig) -> np.ndarray:
    """Single signed step of size ``cfg.mu`` after the configured start."""
    x = np.asarray(x, dtype=np.float64)
    loss_fn = FeatureDistanceLoss(x, masks, params, model_cfg, cfg.distance)
    start = random_init(x, cfg.epsilon, rng) if cfg.init == "uniform" else x.copy()
    _, g = loss_fn(start)
    step = start + cfg.mu * np.sign(g)
    lo = np.clip(x - cfg.epsilon, PIXEL_MIN, PIXEL_MAX)
    hi = np.clip(x + cfg.epsilon, PIXEL_MIN, PIXEL_MAX)
    return np.clip(step, lo, hi)


def attack_effectiveness_report(x: np.ndarray, masks: Sequence[MaskSpec], params: ParamStore,
                                cfg: AttackConfig, model_cfg: ModelConfig, seed: int = 0) -> dict:
    """Mean feature distance with no perturbation, random noise, and PGD at budget eps."""
    loss_fn = FeatureDistanceLoss(x, masks, params, model_cfg, cfg.distance)
    x64 = np.asarray(x, dtype=np.float64)
    noise = random_init(x64, cfg.epsilon, np.random.default_rng(seed))
    adv = sign_ascent(x64, loss_fn, cfg.epsilon, cfg.mu, cfg.steps, cfg.init, np.random.default_rng(seed))
    return {
        "epsilon": cfg.epsilon,
        "steps": cfg.steps,
        "none": loss_fn.value(x64),
        "random": loss_fn.value(noise),
        "pgd": loss_fn.value(adv),
    }
