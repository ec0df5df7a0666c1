"""Command line: pretrain, probe, finetune, attack-eval, export-encoder."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import (Checkpoint, CheckpointError, TrainingState, load_checkpoint, read_archive,
                         save_checkpoint, store_from_checkpoint, write_archive)
from .config import RunConfig, build, config_hash, parse_config, serialize, to_dict
from .data import load_image_folder, synth_dataset
from .evaluation import Classifier, finetune, linear_probe, robustness_curve
from .metrics import MetricsSink
from .mim import ConfigError
from .model import ModelConfig, extract_finetune_params, init_params
from .trainer import Pretrainer

log = logging.getLogger("aemim")


class UsageError(Exception):
    pass


def load_dataset(cfg: RunConfig):
    if cfg.data.kind == "synth":
        return synth_dataset(cfg.data.synth)
    folder = Path(cfg.data.folder)
    if not folder.is_dir():
        raise UsageError(f"dataset folder {folder} does not exist")
    return load_image_folder(folder, cfg.model.image_size, seed=cfg.data.synth.seed)


def resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config(text="")
    changes = {}
    if args.output is not None:
        changes["output_dir"] = str(args.output)
    if args.run_id is not None:
        changes["run_id"] = args.run_id
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required (--checkpoint)")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _model_from(ckpt: Checkpoint, fallback: ModelConfig) -> ModelConfig:
    if "model" in ckpt.extra:
        return build(ModelConfig, ckpt.extra["model"], "model")
    return fallback


def encoder_from(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Fine-tune extract from either a pre-training checkpoint or an exported encoder."""
    if any(label == "adv" or label.startswith("opt") for label in ckpt.labels.values()):
        return extract_finetune_params(store_from_checkpoint(ckpt))
    return {k: v for k, v in ckpt.tensors.items() if ckpt.labels[k] in ("shared", "clean")}


def _encoder_labels(enc: dict, ckpt: Checkpoint | None) -> dict[str, str]:
    if ckpt is None:
        return {k: "shared" for k in enc}
    clean = set()
    for key, label in ckpt.labels.items():
        if label == "clean":
            clean.add(key.split("/", 1)[1] if "/" in key else key)
    return {k: "clean" if k in clean else "shared" for k in enc}


# ------------------------------------------------------------------ commands


def cmd_pretrain(args, cfg: RunConfig) -> int:
    run_dir = cfg.run_dir
    chash = config_hash(cfg)
    ckpt_path = run_dir / "checkpoint.ckpt"
    if args.dry_run:
        store = init_params(cfg.model, cfg.train.seed)
        n_train = None
        if cfg.data.kind == "synth":
            sp = cfg.data.synth
            n_train = sp.num_classes * (sp.samples_per_class - math.floor(sp.samples_per_class * sp.val_fraction + 0.5))
        plan = {
            "run_dir": str(run_dir),
            "config_hash": chash,
            "parameters": int(sum(v.size for _, v in store.items())),
            "partitions": {p: len(store.partition(p)) for p in store.PARTITIONS},
            "approx_train_images": n_train,
            "effective_lr": cfg.train.lr,
            "resume": str(args.resume) if args.resume else None,
        }
        print(serialize(cfg))
        print(json.dumps(plan, indent=2))
        return 0
    if args.resume is None and ckpt_path.exists():
        raise UsageError(f"run {cfg.run_id!r} already exists in {cfg.output_dir}; use --resume or a new --run-id")
    data = load_dataset(cfg)
    trainer = Pretrainer(data.train.images, cfg.model, cfg.train)
    if args.resume is not None:
        store, state = load_checkpoint(_require(args.resume, "resume checkpoint"), expected_hash=chash)
        trainer.store, trainer.opt, trainer.rngs, trainer.step = store, state.opt, state.rngs, state.step
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(serialize(cfg))
    sink = MetricsSink(run_dir / "metrics.jsonl", cfg.run_id)

    def state_of(tr):
        return TrainingState(tr.opt, tr.rngs, tr.step, tr.epoch, chash, {"model": to_dict(cfg.model)})

    def on_step(tr, rec):
        sink.log(rec.step, {"L_c": rec.L_c, "L_a": rec.L_a, "total": rec.total, "lr": rec.lr,
                            "attack_Ladv": rec.attack_Ladv})
        if cfg.checkpoint_every and tr.step % cfg.checkpoint_every == 0:
            save_checkpoint(tr.store, state_of(tr), run_dir / f"checkpoint_{tr.step:06d}.ckpt")

    t0 = time.time()
    until = None if args.max_steps is None else args.max_steps
    recs = trainer.run(until, on_step)
    save_checkpoint(trainer.store, state_of(trainer), ckpt_path)
    last = recs[-1] if recs else None
    print(json.dumps({"checkpoint": str(ckpt_path), "step": trainer.step, "total_steps": trainer.total_steps,
                      "seconds": round(time.time() - t0, 2),
                      "last_L_c": None if last is None else last.L_c,
                      "last_L_a": None if last is None else last.L_a}))
    return 0


def cmd_export_encoder(args, cfg: RunConfig) -> int:
    ckpt = read_archive(_require(args.checkpoint, "pre-training checkpoint"))
    enc = encoder_from(ckpt)
    out = Path(args.out) if args.out else cfg.run_dir / "encoder.ckpt"
    model = _model_from(ckpt, cfg.model)
    write_archive(out, Checkpoint(enc, _encoder_labels(enc, ckpt), ckpt.config_hash, ckpt.step, ckpt.epoch,
                                  {}, {"model": to_dict(model)}))
    print(json.dumps({"encoder": str(out), "tensors": len(enc)}))
    return 0


def _downstream(args, cfg: RunConfig, mode: str) -> int:
    if args.random_init:
        model = cfg.model
        ckpt = None
        enc = extract_finetune_params(init_params(model, cfg.train.seed))
    else:
        ckpt = read_archive(_require(args.checkpoint, "encoder checkpoint"))
        model = _model_from(ckpt, cfg.model)
        enc = encoder_from(ckpt)
    data = load_dataset(cfg)
    if mode == "probe":
        res = linear_probe(enc, data, model, cfg.eval.probe)
    else:
        res = finetune(enc, data, model, cfg.eval.finetune)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    clf = res.classifier
    tensors = clf.tensors()
    labels = _encoder_labels(clf.encoder, ckpt)
    labels.update({k: "head" for k in tensors if k.startswith("head.")})
    out = run_dir / f"classifier_{mode}.ckpt"
    write_archive(out, Checkpoint({k: np.asarray(v, np.float32) for k, v in tensors.items()}, labels,
                                  config_hash(cfg), 0, 0, {}, {"model": to_dict(model), "mode": mode}))
    MetricsSink(run_dir / "metrics.jsonl", cfg.run_id).log(0, {f"{mode}_top1": res.accuracy})
    print(json.dumps({"classifier": str(out), "top1": res.accuracy}))
    return 0


def cmd_attack_eval(args, cfg: RunConfig) -> int:
    ckpt = read_archive(_require(args.checkpoint, "classifier checkpoint"))
    if "head.w" not in ckpt.tensors:
        raise UsageError(f"{args.checkpoint} has no classifier head; run probe or finetune first")
    model = _model_from(ckpt, cfg.model)
    clf = Classifier.from_tensors(ckpt.tensors, model)
    data = load_dataset(cfg)
    val = data.val
    if cfg.eval.max_samples is not None:
        val = val.subset(np.arange(min(len(val), cfg.eval.max_samples)))
    attacker = args.attacker or cfg.eval.attacker
    curve = robustness_curve(clf, val, cfg.eval.eps_list, attacker, cfg.eval.pgd_steps, cfg.train.seed)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = curve.as_rows()
    with open(run_dir / f"robustness_{attacker}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (run_dir / f"robustness_{attacker}.json").write_text(json.dumps(rows, indent=2))
    sink = MetricsSink(run_dir / "metrics.jsonl", cfg.run_id)
    sink.log(0, {f"{curve.attacker}_top1@eps={e:g}": a for e, a in curve.points})
    print(json.dumps({"attacker": curve.attacker, "points": curve.points}))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": lambda a, c: _downstream(a, c, "probe"),
    "finetune": lambda a, c: _downstream(a, c, "finetune"),
    "attack-eval": cmd_attack_eval,
    "export-encoder": cmd_export_encoder,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aemim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("--output", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--run-id", help="run id (overrides run_id)")
        p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
        p.add_argument("--resume", type=Path, help="checkpoint to resume from")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        p.add_argument("--checkpoint", type=Path, help="input checkpoint")
        if name == "pretrain":
            p.add_argument("--max-steps", type=int, help="stop after this global step")
        if name in ("probe", "finetune"):
            p.add_argument("--random-init", action="store_true", help="use a freshly initialized encoder")
        if name == "attack-eval":
            p.add_argument("--attacker", choices=("fgsm", "pgd"))
        if name == "export-encoder":
            p.add_argument("--out", type=Path, help="destination file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.dry_run and args.command != "pretrain":
            print(serialize(cfg))
            return 0
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, UsageError, OSError) as e:
        print(f"aemim {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
