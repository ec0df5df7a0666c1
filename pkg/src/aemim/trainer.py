"""Co-training loop: inner maximization (attack) and outer minimization (AdamW)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .attack import AttackConfig, FeatureDistanceLoss, sign_ascent
from .data import augment_batch
from .mim import reconstruction_loss, reconstruction_target, sample_masks
from .model import Domain, ModelConfig, ParamStore, forward, init_params, leaf_tensors, normalize_pixels
from .tensor import Tensor

log = logging.getLogger(__name__)

STREAMS = ("mask", "attack", "subset", "augment")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_ratio: float = 0.5
    adv_ratio_alpha: float = 1.0
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    batch_size: int = 64
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    epochs: int = 20
    warmup_epochs: int = 2
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    mask_ratio: float = 0.75
    normalize_target: bool = True
    augment: bool = True
    decay_adapters: bool = True
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda_ratio <= 1.0:
            raise ValueError(f"lambda_ratio must lie in [0, 1], got {self.lambda_ratio}")
        if not 0.0 <= self.adv_ratio_alpha <= 1.0:
            raise ValueError(f"adv_ratio_alpha must lie in [0, 1], got {self.adv_ratio_alpha}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.batch_size < 1 or self.epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("batch_size and epochs must be >= 1, warmup_epochs >= 0")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @classmethod
    def fast(cls, **kw) -> "TrainConfig":
        attack = kw.pop("attack", AttackConfig(steps=1))
        return cls(adv_ratio_alpha=0.25, attack=attack, **kw)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, store: ParamStore) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in store.items()},
                   {k: np.zeros_like(v) for k, v in store.items()}, 0)


@dataclass
class StepMetrics:
    step: int
    L_c: float
    L_a: float
    total: float
    lr: float
    attack_Ladv: float
    n_adv: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def select_adversarial_subset(batch_size: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    k = int(math.floor(alpha * batch_size + 0.5))
    return np.sort(rng.choice(batch_size, size=k, replace=False))


def combine_losses(L_c: Tensor, L_a: Tensor | None, lam: float) -> Tensor:
    """``lam * L_c + (1 - lam) * L_a``; a missing ``L_a`` counts as zero."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if L_a is None:
        if lam < 1.0:
            log.warning("empty adversarial subset with lambda=%s; L_a taken as 0", lam)
        return L_c if lam == 1.0 else T.scale(L_c, lam)
    if lam == 1.0:
        return L_c
    if lam == 0.0:
        return L_a
    return T.add(T.scale(L_c, lam), T.scale(L_a, 1.0 - lam))


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine down to ``min_lr``."""
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(store: ParamStore, grads: Mapping[str, np.ndarray], state: OptimizerState, lr,
               weight_decay: float, betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
               keys=None, no_decay: frozenset = frozenset()) -> OptimizerState:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place.

    ``lr`` is a float or a per-key mapping.  ``keys`` restricts the update to a
    subset of the store; missing grads count as zero.
    """
    keys = store.keys() if keys is None else list(keys)
    for k in keys:
        g = grads.get(k)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k} at optimizer step {state.step + 1}")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in keys:
        p = store.get(k)
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        dt = p.dtype.type
        lr_k = lr[k] if isinstance(lr, Mapping) else lr
        if weight_decay and k not in no_decay:
            p = p * dt(1.0 - lr_k * weight_decay)
        m = state.m[k] * dt(b1) + g * dt(1.0 - b1)
        v = state.v[k] * dt(b2) + g * g * dt(1.0 - b2)
        denom = np.sqrt(v / dt(c2)) + dt(eps)
        p = p - dt(lr_k / c1) * m / denom
        state.m[k], state.v[k] = m, v
        store.set(k, p)
    state.step = t
    return state


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    f = max_norm / (total + 1e-6)
    return {k: (g * f).astype(g.dtype) for k, g in grads.items()}


def _targets(images: np.ndarray, model_cfg: ModelConfig, cfg: TrainConfig, dtype) -> np.ndarray:
    return reconstruction_target(normalize_pixels(images), model_cfg.patch_size,
                                 cfg.normalize_target).astype(dtype)


def _bad_rows(pred: Tensor, target: np.ndarray, rows: np.ndarray) -> list[int]:
    ok = np.isfinite(pred.data).reshape(len(rows), -1).all(axis=1)
    ok &= np.isfinite(target).reshape(len(rows), -1).all(axis=1)
    return rows[~ok].tolist()


def _check_finite(value: float, what: str, bad: list[int]):
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is not finite; offending sample indices: {sorted(set(bad))}")


def train_step(batch: np.ndarray, store: ParamStore, opt: OptimizerState, cfg: TrainConfig,
               model_cfg: ModelConfig, rngs: Mapping[str, np.random.Generator], lr: float) -> StepMetrics:
    """One min-max step on a batch of raw 0-255 images; updates ``store``/``opt`` in place."""
    b = len(batch)
    dtype = next(iter(store.shared.values())).dtype
    masks = sample_masks(b, model_cfg.n_patches, cfg.mask_ratio, rngs["mask"])
    lam = cfg.lambda_ratio

    subset = np.zeros(0, dtype=np.int64)
    if lam < 1.0:
        subset = select_adversarial_subset(b, cfg.adv_ratio_alpha, rngs["subset"])
    attack_loss = float("nan")
    x_a = None
    if len(subset):
        adv_masks = [masks[i] for i in subset]
        x_sub = batch[subset]
        loss_fn = FeatureDistanceLoss(x_sub, adv_masks, store, model_cfg, cfg.attack.distance)
        trace: list = []
        x_a = sign_ascent(x_sub, loss_fn, cfg.attack.epsilon, cfg.attack.mu, cfg.attack.steps,
                          cfg.attack.init, rngs["attack"], trace)
        attack_loss = trace[-1][1]

    targets = _targets(batch, model_cfg, cfg, dtype)
    leaves = leaf_tensors(store)
    pred_c = forward(batch, masks, Domain.CLEAN, leaves, model_cfg)
    L_c = reconstruction_loss(pred_c, targets, masks)
    L_a = None
    if x_a is not None:
        pred_a = forward(x_a, adv_masks, Domain.ADVERSARIAL, leaves, model_cfg)
        # the adversarial branch reconstructs the clean images
        L_a = reconstruction_loss(pred_a, targets[subset], adv_masks)
    total = combine_losses(L_c, L_a, lam)
    if not math.isfinite(total.item()):
        bad = _bad_rows(pred_c, targets, np.arange(b))
        if L_a is not None:
            bad += _bad_rows(pred_a, targets[subset], subset)
        _check_finite(total.item(), "training loss", bad)
    grads = _clip(T.grad(total, leaves), cfg.grad_clip)
    no_decay = frozenset() if cfg.decay_adapters else frozenset(k for k in store.keys() if not k.startswith("shared/"))
    adamw_step(store, grads, opt, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps, no_decay=no_decay)
    lc = L_c.item()
    la = 0.0 if L_a is None else L_a.item()
    return StepMetrics(opt.step, lc, la, total.item(), lr, attack_loss, len(subset))


def baseline_mae_step(batch: np.ndarray, store: ParamStore, opt: OptimizerState, cfg: TrainConfig,
                      model_cfg: ModelConfig, rngs: Mapping[str, np.random.Generator], lr: float) -> float:
    """Plain MAE step: clean reconstruction only, updating shared weights and clean adapters."""
    dtype = next(iter(store.shared.values())).dtype
    masks = sample_masks(len(batch), model_cfg.n_patches, cfg.mask_ratio, rngs["mask"])
    targets = _targets(batch, model_cfg, cfg, dtype)
    keys = [k for k in store.keys() if not k.startswith("adv/")]
    leaves = leaf_tensors(store)
    params = {k: leaves[k] for k in keys}
    loss = reconstruction_loss(forward(batch, masks, Domain.CLEAN, params, model_cfg), targets, masks)
    grads = _clip(T.grad(loss, params), cfg.grad_clip)
    no_decay = frozenset() if cfg.decay_adapters else frozenset(k for k in keys if not k.startswith("shared/"))
    adamw_step(store, grads, opt, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps, keys=keys, no_decay=no_decay)
    return loss.item()


class Pretrainer:
    """Epoch/step bookkeeping around :func:`train_step`.

    Batches are drawn from a per-epoch permutation derived from ``(seed, epoch)``,
    so the whole run is a function of the stored step count, parameters,
    optimizer moments and rng stream states.  That makes resume exact.
    """

    def __init__(self, images: np.ndarray, model_cfg: ModelConfig, cfg: TrainConfig,
                 store: ParamStore | None = None, opt: OptimizerState | None = None,
                 rngs: dict | None = None, step: int = 0, baseline: bool = False):
        self.images = np.asarray(images)
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.store = store if store is not None else init_params(model_cfg, cfg.seed)
        self.opt = opt if opt is not None else OptimizerState.zeros_like(self.store)
        self.rngs = rngs if rngs is not None else make_rngs(cfg.seed)
        self.step = step
        self.baseline = baseline
        self.steps_per_epoch = len(self.images) // cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"{len(self.images)} images cannot fill a batch of {cfg.batch_size}")
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.warmup_steps = self.steps_per_epoch * cfg.warmup_epochs

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def batch_for(self, step: int) -> np.ndarray:
        epoch, i = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.images))
        idx = perm[i * self.cfg.batch_size:(i + 1) * self.cfg.batch_size]
        batch = self.images[idx].astype(np.float32)
        if self.cfg.augment:
            batch = augment_batch(batch, self.model_cfg.image_size, self.rngs["augment"])
        return batch

    def run(self, until: int | None = None, on_step: Callable | None = None) -> list:
        until = self.total_steps if until is None else min(until, self.total_steps)
        out = []
        while self.step < until:
            lr = lr_at(self.step, self.total_steps, self.warmup_steps, self.cfg.lr, self.cfg.min_lr)
            batch = self.batch_for(self.step)
            if self.baseline:
                loss = baseline_mae_step(batch, self.store, self.opt, self.cfg, self.model_cfg, self.rngs, lr)
                rec = StepMetrics(self.opt.step, loss, 0.0, loss, lr, float("nan"))
            else:
                rec = train_step(batch, self.store, self.opt, self.cfg, self.model_cfg, self.rngs, lr)
            self.step += 1
            out.append(rec)
            if on_step is not None:
                on_step(self, rec)
        return out
