"""Masking, per-patch targets and the masked-only reconstruction loss on one batch."""
import numpy as np

from aemim import mim
from aemim.data import SynthSpec, synth_dataset
from aemim.model import Domain, ModelConfig, forward, init_params

cfg = ModelConfig()  # 32x32 images, 4x4 patches -> 64 tokens
ds = synth_dataset(SynthSpec(samples_per_class=16))
pick = np.arange(0, len(ds.train), len(ds.train) // 4)[:4]
images = ds.train.images[pick].astype(np.float32)
print("images", images.shape, images.dtype, "labels", ds.train.labels[pick])

rng = np.random.default_rng(0)
masks = mim.sample_masks(len(images), cfg.n_patches, cfg.mask_ratio, rng)
m = masks[0]
print(f"{len(m.masked)} of {cfg.n_patches} patches hidden; visible ids {m.visible[:8]}...")

# the grid of one mask, 1 = hidden
grid = np.zeros(cfg.n_patches, int)
grid[list(m.masked)] = 1
print(grid.reshape(cfg.grid, cfg.grid))

patches = mim.patchify_array(images / 255.0, cfg.patch_size)
target = mim.reconstruction_target(images / 255.0, cfg.patch_size)
print("patch dim", patches.shape[-1], "target mean/std of patch 0:",
      target[0, 0].mean().round(6), target[0, 0].std().round(3))

store = init_params(cfg, seed=0)
pred = forward(images, masks, Domain.CLEAN, store, cfg)
loss = mim.reconstruction_loss(pred, target, masks)
print("untrained loss", round(loss.item(), 4), "(about 1 + prediction variance)")

# visible patches do not count: corrupting them leaves the loss alone
pred2 = pred.data.copy()
pred2[0, m.visible] = 1e3
print("loss with garbage on visible patches",
      round(mim.reconstruction_loss(pred2, target, masks).item(), 4))
