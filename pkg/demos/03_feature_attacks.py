"""Attacking the encoder: PGD on the feature distance vs random noise at the same budget."""
import numpy as np

from aemim import mim
from aemim.attack import AttackConfig, attack_effectiveness_report, fgsm_attack, pgd_attack
from aemim.data import SynthSpec, synth_dataset
from aemim.model import ModelConfig, init_params

cfg = ModelConfig()
ds = synth_dataset(SynthSpec(samples_per_class=16))
x = ds.train.images[:32].astype(np.float64)
rng = np.random.default_rng(1)
store = init_params(cfg, seed=0)
# perturb the init a little so the two adapter sets disagree, as after some training
for k, v in store.items():
    store.set(k, (v + rng.normal(0, 0.02, v.shape)).astype(v.dtype))
masks = mim.sample_masks(len(x), cfg.n_patches, cfg.mask_ratio, rng)

for eps in (1.0, 2.0, 4.0, 8.0):
    rep = attack_effectiveness_report(x, masks, store, AttackConfig(epsilon=eps), cfg, seed=0)
    print(f"eps={eps:>3}: none {rep['none']:.4f}  random {rep['random']:.4f}  pgd-{rep['steps']} {rep['pgd']:.4f}")

# every iterate stays inside the box
trace = []
xa = pgd_attack(x, masks, store, AttackConfig(epsilon=2.0, steps=5), rng, cfg, trace)
print("max |x_a - x| per iterate:", [float(np.abs(t[0] - x).max()) for t in trace], float(np.abs(xa - x).max()))

# one step from the same start is FGSM
ac = AttackConfig(epsilon=2.0, steps=1)
a = pgd_attack(x, masks, store, ac, np.random.default_rng(5), cfg)
b = fgsm_attack(x, masks, store, ac, np.random.default_rng(5), cfg)
print("FGSM == PGD(T=1):", a.tobytes() == b.tobytes())
