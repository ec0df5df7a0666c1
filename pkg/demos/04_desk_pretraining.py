"""Short dual-loss pre-training run, then a linear probe and a robustness curve.

Usage: python3 demos/04_desk_pretraining.py [epochs]   (default 3; the desk config uses 20)
"""
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from aemim.config import parse_config
from aemim.data import synth_dataset
from aemim.evaluation import ProbeConfig, linear_probe, robustness_curve
from aemim.model import extract_finetune_params, init_params
from aemim.trainer import Pretrainer

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
run = parse_config(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
train = replace(run.train, epochs=epochs, warmup_epochs=min(run.train.warmup_epochs, epochs))
ds = synth_dataset(run.data.synth)
print(f"{len(ds.train)} train / {len(ds.val)} val images, {ds.train.num_classes} classes")

tr = Pretrainer(ds.train.images, run.model, train)
t0 = time.time()
recs = tr.run()
print(f"{len(recs)} steps in {time.time() - t0:.0f}s")
spe = tr.steps_per_epoch
for e in range(epochs):
    chunk = recs[e * spe:(e + 1) * spe]
    print(f"epoch {e + 1:>2}  L_c {np.mean([r.L_c for r in chunk]):.4f}  L_a {np.mean([r.L_a for r in chunk]):.4f}")

probe = ProbeConfig(epochs=50)
res = linear_probe(extract_finetune_params(tr.store), ds, run.model, probe)
base = linear_probe(extract_finetune_params(init_params(run.model, train.seed)), ds, run.model, probe)
print(f"probe top-1: pretrained {res.accuracy:.3f}, random init {base.accuracy:.3f}")

val = ds.val.subset(np.arange(64))
curve = robustness_curve(res.classifier, val, [0, 1, 2, 4, 8], "pgd", steps=5)
for eps, acc in curve.points:
    print(f"  eps {eps:>3g}: {acc:.3f}")
