"""Datasets: procedural synthetic images, an image-folder loader, augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle", "ring")
LAYOUTS = ("tiled", "single")
# base RGB per color family
HUES = ((220, 60, 40), (40, 90, 220), (50, 190, 70), (230, 200, 40))
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # [C, H, W], 0-255
    label: int


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    samples_per_class: int = 256
    image_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    layout: str = "tiled"  # lattice of the class shape, or one large shape

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if not 1 <= self.num_classes <= len(SHAPES) * len(HUES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES) * len(HUES)}]")
        if self.samples_per_class < 1 or self.image_size < 8:
            raise ValueError("samples_per_class must be >= 1 and image_size >= 8")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def digest(self) -> bytes:
        return self.images.tobytes() + self.labels.tobytes()


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        # upward triangle in the rotated frame
        return (v <= r * 0.7) & (v >= -r) & (np.abs(u) <= (v + r) * 0.62)
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def _background(size: int, rng: np.random.Generator):
    """Low-saturation background with a random linear gradient, plus pixel grids."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = rng.uniform(60, 190) + rng.uniform(-25, 25, size=3)
    gdir = rng.uniform(0, 2 * math.pi)
    grad = (math.cos(gdir) * (xx - size / 2) + math.sin(gdir) * (yy - size / 2)) / size
    return bg[:, None, None] + rng.uniform(10, 40) * grad[None], yy, xx


def _render_single(shape: str, hue, size: int, rng: np.random.Generator) -> np.ndarray:
    img, yy, xx = _background(size, rng)
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(-0.35, 0.35))
    color = np.clip(hue + rng.normal(0, 18, size=3), 0, 255)
    shade = 1.0 + 0.15 * ((yy - cy) / size)
    return np.where(mask[None], color[:, None, None] * shade[None], img)


def _render_tiled(shape: str, hue, size: int, rng: np.random.Generator) -> np.ndarray:
    # rotated lattice with random period and phase; one shape per cell
    img, yy, xx = _background(size, rng)
    period = rng.uniform(7.0, 10.0) * size / 32
    ang = rng.uniform(-0.35, 0.35)
    ca, sa = math.cos(ang), math.sin(ang)
    u = ca * xx + sa * yy + rng.uniform(0, period)
    v = -sa * xx + ca * yy + rng.uniform(0, period)
    cu = np.mod(u, period) - period / 2
    cv = np.mod(v, period) - period / 2
    mask = _shape_mask(shape, cv, cu, 0.0, 0.0, period * rng.uniform(0.34, 0.42), 0.0)
    color = np.clip(hue + rng.normal(0, 18, size=3), 0, 255)
    return np.where(mask[None], color[:, None, None], img)


def _render(label: int, size: int, rng: np.random.Generator, layout: str = "tiled") -> np.ndarray:
    # shapes cycle fastest, so 8 classes = 4 shapes x 2 hues
    shape = SHAPES[label % len(SHAPES)]
    hue = np.array(HUES[label // len(SHAPES)], dtype=np.float64)
    draw = _render_tiled if layout == "tiled" else _render_single
    img = draw(shape, hue, size, rng)
    img += rng.normal(0, 6, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_dataset(spec: SynthSpec) -> SplitDataset:
    """Deterministic procedural images with a stratified train/val split."""
    rng = np.random.default_rng(spec.seed)
    n_val = int(math.floor(spec.samples_per_class * spec.val_fraction + 0.5))
    tr_img, tr_lab, va_img, va_lab = [], [], [], []
    for c in range(spec.num_classes):
        imgs = np.stack([_render(c, spec.image_size, rng, spec.layout) for _ in range(spec.samples_per_class)])
        order = rng.permutation(spec.samples_per_class)
        va_img.append(imgs[order[:n_val]])
        tr_img.append(imgs[order[n_val:]])
        va_lab += [c] * n_val
        tr_lab += [c] * (spec.samples_per_class - n_val)
    train = Dataset(np.concatenate(tr_img), np.array(tr_lab, dtype=np.int64), spec.num_classes)
    val = Dataset(np.concatenate(va_img), np.array(va_lab, dtype=np.int64), spec.num_classes)
    return SplitDataset(train, val)


def load_image_folder(root, image_size: int, val_fraction: float = 0.1, seed: int = 0) -> SplitDataset:
    """Load ``root/<class>/<image>`` 8-bit RGB files, resized to ``image_size``."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class directories under {root}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [], [])
    for c, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        imgs = []
        for f in files:
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                imgs.append(np.asarray(im, dtype=np.uint8).transpose(2, 0, 1))
        if not imgs:
            continue
        order = rng.permutation(len(imgs))
        n_val = int(math.floor(len(imgs) * val_fraction + 0.5))
        for j, i in enumerate(order):
            dst = 2 if j < n_val else 0
            parts[dst].append(imgs[i])
            parts[dst + 1].append(c)
    if not parts[0]:
        raise ValueError(f"no images found under {root}")

    def mk(imgs, labs):
        if not imgs:
            return Dataset(np.zeros((0, 3, image_size, image_size), np.uint8), np.zeros(0, np.int64), len(classes))
        return Dataset(np.stack(imgs), np.array(labs, dtype=np.int64), len(classes))

    return SplitDataset(mk(parts[0], parts[1]), mk(parts[2], parts[3]))


# --------------------------------------------------------------- augmentation


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[C, H, W]``."""
    c, h, w = img.shape
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


def random_resized_crop_box(h: int, w: int, rng: np.random.Generator, scale=(0.2, 1.0),
                            ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def augment(image: np.ndarray, rng: np.random.Generator, out_size: int | None = None,
            force_flip: bool | None = None) -> np.ndarray:
    """Random resized crop (area 0.2-1.0) then a coin-flip horizontal mirror."""
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    out_size = h if out_size is None else out_size
    top, left, ch, cw = random_resized_crop_box(h, w, rng)
    out = resize_bilinear(img[:, top:top + ch, left:left + cw], out_size, out_size)
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    if do_flip:
        out = flip(out)
    return np.ascontiguousarray(np.clip(out, 0, 255), dtype=np.float32)


def augment_batch(images: np.ndarray, out_size: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, rng, out_size) for im in images])
