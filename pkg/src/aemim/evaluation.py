"""Downstream evaluation: linear probe, fine-tuning, robustness curves."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .attack import project, random_init
from .data import Dataset, SplitDataset, augment_batch
from .mim import ConfigError
from .model import Domain, ModelConfig, ParamStore, pooled_features
from .tensor import Tensor
from .trainer import OptimizerState, adamw_step, lr_at

ATTACKERS = ("fgsm", "pgd")


@dataclass
class Classifier:
    """Frozen-or-tuned encoder, mean-pooled tokens, optional feature standardization, linear head."""

    encoder: dict[str, np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray
    cfg: ModelConfig
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        if self.feat_mean is not None:
            out["head.feat_mean"] = self.feat_mean
            out["head.feat_std"] = self.feat_std
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], cfg: ModelConfig) -> "Classifier":
        enc = {k: v for k, v in tensors.items() if not k.startswith("head.")}
        return cls(enc, tensors["head.w"], tensors["head.b"], cfg,
                   tensors.get("head.feat_mean"), tensors.get("head.feat_std"))

    def logits(self, images, params: Mapping[str, Tensor] | None = None) -> Tensor:
        p = params if params is not None else {k: Tensor(v) for k, v in self.tensors().items()}
        enc = {k: v for k, v in p.items() if not k.startswith("head.")}
        f = pooled_features(images, enc, self.cfg, Domain.CLEAN)
        if self.feat_mean is not None:
            f = T.mul(T.sub(f, self.feat_mean), 1.0 / self.feat_std)
        return T.linear(f, p["head.w"], p["head.b"])

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [np.argmax(self.logits(images[i:i + batch_size].astype(np.float32)).data, -1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, ds: Dataset, batch_size: int = 256) -> float:
        if len(ds) == 0:
            raise ConfigError("cannot score an empty dataset")
        return float(np.mean(self.predict(ds.images, batch_size) == ds.labels))

    def loss_and_grad(self, labels: np.ndarray):
        """``x -> (summed CE, dCE/dx)`` for sign-gradient attacks."""
        def fn(x: np.ndarray):
            xt = Tensor(x, requires_grad=True)
            loss = T.scale(T.cross_entropy(self.logits(xt), labels), float(len(labels)))
            return loss.item(), T.grad(loss, {"x": xt})["x"]
        return fn


def encoder_features(encoder: Mapping[str, np.ndarray], images: np.ndarray, cfg: ModelConfig,
                     batch_size: int = 256) -> np.ndarray:
    params = {k: Tensor(v) for k, v in encoder.items()}
    out = [pooled_features(images[i:i + batch_size].astype(np.float32), params, cfg).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 256
    seed: int = 0


@dataclass
class EvalResult:
    accuracy: float
    classifier: Classifier
    history: list = field(default_factory=list)


def _check_dataset(ds: SplitDataset):
    if len(ds.train) == 0 or len(ds.val) == 0:
        raise ConfigError("train and val splits must both be non-empty")


def linear_probe(encoder: Mapping[str, np.ndarray], dataset: SplitDataset, cfg: ModelConfig,
                 probe: ProbeConfig = ProbeConfig()) -> EvalResult:
    """Train a linear head on frozen, standardized, mean-pooled clean features."""
    _check_dataset(dataset)
    encoder = {k: np.asarray(v) for k, v in encoder.items()}
    ftr = encoder_features(encoder, dataset.train.images, cfg)
    mu = ftr.mean(0)
    sd = ftr.std(0) + 1e-6
    z = ((ftr - mu) / sd).astype(np.float32)
    k = dataset.train.num_classes
    store = ParamStore(shared={"head.w": np.zeros((z.shape[1], k), np.float32),
                               "head.b": np.zeros(k, np.float32)})
    opt = OptimizerState.zeros_like(store)
    rng = np.random.default_rng(probe.seed)
    y = dataset.train.labels
    steps_per_epoch = max(1, math.ceil(len(z) / probe.batch_size))
    total = steps_per_epoch * probe.epochs
    history = []
    for epoch in range(probe.epochs):
        order = rng.permutation(len(z))
        for i in range(steps_per_epoch):
            idx = order[i * probe.batch_size:(i + 1) * probe.batch_size]
            w = Tensor(store.shared["head.w"], requires_grad=True)
            b = Tensor(store.shared["head.b"], requires_grad=True)
            loss = T.cross_entropy(T.linear(Tensor(z[idx]), w, b), y[idx])
            g = T.grad(loss, {"shared/head.w": w, "shared/head.b": b})
            lr = lr_at(opt.step, total, 0, probe.lr)
            adamw_step(store, g, opt, lr, probe.weight_decay, (0.9, 0.999))
        history.append(loss.item())
    clf = Classifier(encoder, store.shared["head.w"], store.shared["head.b"], cfg,
                     mu.astype(np.float32), sd.astype(np.float32))
    return EvalResult(clf.accuracy(dataset.val), clf, history)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    base_lr: float = 1e-3
    layer_decay: float = 0.8
    weight_decay: float = 0.05
    batch_size: int = 64
    warmup_epochs: int = 1
    augment: bool = True
    seed: int = 0


def layer_id(name: str, depth: int) -> int:
    """0 for embeddings, i+1 for encoder block i, depth+1 for the final norm and head."""
    if name.startswith("enc.blocks."):
        return int(name.split(".")[2]) + 1
    if name.startswith(("enc.patch_embed", "enc.cls_token")):
        return 0
    return depth + 1


def layer_lr_scales(names: Sequence[str], depth: int, decay: float) -> dict[str, float]:
    return {n: decay ** (depth + 1 - layer_id(n, depth)) for n in names}


def finetune(encoder: Mapping[str, np.ndarray], dataset: SplitDataset, cfg: ModelConfig,
             ft: FinetuneConfig = FinetuneConfig(), lr_log: list | None = None) -> EvalResult:
    """End-to-end training of encoder + zero-initialized head with layer-wise lr decay."""
    _check_dataset(dataset)
    k = dataset.train.num_classes
    shared = {k_: np.array(v, dtype=np.float32) for k_, v in encoder.items()}
    shared["head.w"] = np.zeros((cfg.enc_dim, k), np.float32)
    shared["head.b"] = np.zeros(k, np.float32)
    store = ParamStore(shared=shared)
    opt = OptimizerState.zeros_like(store)
    scales = layer_lr_scales(list(shared), cfg.enc_depth, ft.layer_decay)
    no_decay = frozenset(f"shared/{n}" for n, v in shared.items() if v.ndim < 2)
    rng = np.random.default_rng(ft.seed)
    images, y = dataset.train.images, dataset.train.labels
    steps_per_epoch = max(1, len(images) // ft.batch_size)
    total = steps_per_epoch * ft.epochs
    warm = steps_per_epoch * ft.warmup_epochs
    peak = ft.base_lr * ft.batch_size / 256
    history = []
    for epoch in range(ft.epochs):
        order = rng.permutation(len(images))
        for i in range(steps_per_epoch):
            idx = order[i * ft.batch_size:(i + 1) * ft.batch_size]
            x = images[idx].astype(np.float32)
            if ft.augment:
                x = augment_batch(x, cfg.image_size, rng)
            leaves = {n: Tensor(v, requires_grad=True) for n, v in store.shared.items()}
            clf = Classifier({}, store.shared["head.w"], store.shared["head.b"], cfg)
            loss = T.cross_entropy(clf.logits(x, leaves), y[idx])
            g = T.grad(loss, {f"shared/{n}": t for n, t in leaves.items()})
            base = lr_at(opt.step, total, warm, peak)
            lrs = {f"shared/{n}": base * s for n, s in scales.items()}
            if lr_log is not None:
                lr_log.append(lrs)
            adamw_step(store, g, opt, lrs, ft.weight_decay, (0.9, 0.999), no_decay=no_decay)
        history.append(loss.item())
    enc = {n: v for n, v in store.shared.items() if not n.startswith("head.")}
    clf = Classifier(enc, store.shared["head.w"], store.shared["head.b"], cfg)
    return EvalResult(clf.accuracy(dataset.val), clf, history)


# ---------------------------------------------------------------- robustness


@dataclass
class RobustnessCurve:
    points: list[tuple[float, float]]
    attacker: str
    n_samples: int

    def as_rows(self) -> list[dict]:
        return [{"epsilon": e, "top1": a, "attacker": self.attacker, "n": self.n_samples}
                for e, a in self.points]


def fgsm_ce(clf: Classifier, x: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    """One signed step of size eps from the clean image, clipped to pixel range."""
    x = np.asarray(x, dtype=np.float64)
    _, g = clf.loss_and_grad(labels)(x)
    return np.clip(x + epsilon * np.sign(g), 0.0, 255.0)


def pgd_ce(clf: Classifier, x: np.ndarray, labels: np.ndarray, epsilon: float, steps: int = 20,
           step_size: float | None = None, init: str = "uniform",
           rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = 2.5 * epsilon / steps if step_size is None else step_size
    fn = clf.loss_and_grad(labels)
    x_a = random_init(x, epsilon, rng) if init == "uniform" else x.copy()
    for _ in range(steps):
        _, g = fn(x_a)
        x_a = project(x_a + mu * np.sign(g), x, epsilon)
    return x_a


def robustness_curve(clf: Classifier, dataset: Dataset, eps_list: Sequence[float], attacker: str = "pgd",
                     steps: int = 20, seed: int = 0, batch_size: int = 128) -> RobustnessCurve:
    """Top-1 accuracy under a cross-entropy attack for each budget (0-255 scale)."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list or eps_list[0] != 0.0 or any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError(f"eps_list must start at 0 and strictly increase, got {eps_list}")
    if attacker not in ATTACKERS:
        raise ConfigError(f"attacker must be one of {ATTACKERS}, got {attacker!r}")
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    points = [(0.0, clf.accuracy(dataset, batch_size))]
    for eps in eps_list[1:]:
        rng = np.random.default_rng([seed, int(round(eps * 1000))])
        correct = 0
        for i in range(0, len(dataset), batch_size):
            x = dataset.images[i:i + batch_size].astype(np.float64)
            y = dataset.labels[i:i + batch_size]
            if attacker == "fgsm":
                x_a = fgsm_ce(clf, x, y, eps)
            else:
                x_a = pgd_ce(clf, x, y, eps, steps, rng=rng)
            correct += int((clf.predict(x_a.astype(np.float32), batch_size) == y).sum())
        points.append((eps, correct / len(dataset)))
    return RobustnessCurve(points, "fgsm" if attacker == "fgsm" else f"pgd-{steps}", len(dataset))
