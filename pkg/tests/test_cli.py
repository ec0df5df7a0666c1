import csv
import json

import pytest

from aemim.checkpoint import read_archive
from aemim.cli import main
from aemim.metrics import read_metrics

TINY_YAML = """\
model:
  image_size: 16
  enc_dim: 16
  enc_depth: 1
  enc_heads: 2
  dec_dim: 16
  dec_depth: 1
  dec_heads: 2
data:
  synth:
    num_classes: 4
    samples_per_class: 20
train:
  batch_size: 8
  epochs: 2
  warmup_epochs: 1
  base_lr: 0.01
eval:
  eps_list: [0, 2, 8]
  pgd_steps: 2
  probe:
    epochs: 3
  finetune:
    epochs: 1
    batch_size: 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return p


def run(cfg_file, out, *args):
    return main([args[0], "--config", str(cfg_file), "--output", str(out), *args[1:]])


@pytest.fixture
def pretrained(cfg_file, tmp_path):
    out = tmp_path / "runs"
    assert run(cfg_file, out, "pretrain", "--run-id", "base") == 0
    return out, out / "base" / "checkpoint.ckpt"


def test_dry_run_writes_nothing(cfg_file, tmp_path, capsys):
    out = tmp_path / "runs"
    assert run(cfg_file, out, "pretrain", "--dry-run") == 0
    text = capsys.readouterr().out
    assert "config_hash" in text and "enc_dim: 16" in text
    assert not out.exists()


def test_pretrain_outputs(pretrained):
    out, ckpt = pretrained
    run_dir = ckpt.parent
    assert (run_dir / "config.yaml").exists()
    recs = read_metrics(run_dir / "metrics.jsonl")
    names = {r["metric"] for r in recs}
    assert {"L_c", "L_a", "total", "lr"} <= names
    assert {r["run_id"] for r in recs} == {"base"}
    c = read_archive(ckpt)
    assert c.step == 2 * (72 // 8)
    assert {"shared", "clean", "adv", "opt_m", "opt_v"} == set(c.labels.values())


def test_pretrain_refuses_existing_run(pretrained, cfg_file, capsys):
    out, _ = pretrained
    assert run(cfg_file, out, "pretrain", "--run-id", "base") == 1
    assert "already exists" in capsys.readouterr().err


def test_resume_matches_uninterrupted(pretrained, cfg_file):
    out, full = pretrained
    assert run(cfg_file, out, "pretrain", "--run-id", "part", "--max-steps", "7") == 0
    part = out / "part" / "checkpoint.ckpt"
    assert read_archive(part).step == 7
    assert run(cfg_file, out, "pretrain", "--run-id", "part", "--resume", str(part)) == 0
    assert part.read_bytes() == full.read_bytes()


def test_periodic_checkpoints(cfg_file, tmp_path):
    out = tmp_path / "runs"
    cfg_file.write_text(TINY_YAML + "checkpoint_every: 4\n")
    assert run(cfg_file, out, "pretrain", "--run-id", "p", "--max-steps", "9") == 0
    names = sorted(p.name for p in (out / "p").glob("checkpoint_*.ckpt"))
    assert names == ["checkpoint_000004.ckpt", "checkpoint_000008.ckpt"]


def test_resume_with_changed_config_rejected(pretrained, cfg_file, capsys):
    out, ckpt = pretrained
    cfg_file.write_text(TINY_YAML.replace("base_lr: 0.01", "base_lr: 0.02"))
    assert run(cfg_file, out, "pretrain", "--run-id", "other", "--resume", str(ckpt)) == 1
    assert "config" in capsys.readouterr().err


def test_export_probe_attack_eval(pretrained, cfg_file, capsys):
    out, ckpt = pretrained
    enc_path = out / "enc.ckpt"
    assert run(cfg_file, out, "export-encoder", "--checkpoint", str(ckpt), "--out", str(enc_path)) == 0
    enc = read_archive(enc_path)
    assert enc.tensors and all(k.startswith("enc.") for k in enc.tensors)
    assert set(enc.labels.values()) <= {"shared", "clean"}

    capsys.readouterr()
    assert run(cfg_file, out, "probe", "--run-id", "ev", "--checkpoint", str(enc_path)) == 0
    top1 = json.loads(capsys.readouterr().out)["top1"]
    clf = out / "ev" / "classifier_probe.ckpt"
    assert "head.w" in read_archive(clf).tensors

    assert run(cfg_file, out, "attack-eval", "--run-id", "ev", "--checkpoint", str(clf)) == 0
    with open(out / "ev" / "robustness_pgd.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["epsilon"]) for r in rows] == [0.0, 2.0, 8.0]
    assert float(rows[0]["top1"]) == top1
    data = json.loads((out / "ev" / "robustness_pgd.json").read_text())
    assert len(data) == 3

    assert run(cfg_file, out, "attack-eval", "--run-id", "ev", "--checkpoint", str(clf), "--attacker", "fgsm") == 0
    assert (out / "ev" / "robustness_fgsm.csv").exists()


def test_probe_straight_from_pretrain_checkpoint(pretrained, cfg_file):
    out, ckpt = pretrained
    assert run(cfg_file, out, "finetune", "--run-id", "ft", "--checkpoint", str(ckpt)) == 0
    assert (out / "ft" / "classifier_finetune.ckpt").exists()


def test_probe_random_init(cfg_file, tmp_path):
    out = tmp_path / "runs"
    assert run(cfg_file, out, "probe", "--run-id", "r", "--random-init") == 0
    assert (out / "r" / "classifier_probe.ckpt").exists()


def test_attack_eval_needs_head(pretrained, cfg_file, capsys):
    out, ckpt = pretrained
    assert run(cfg_file, out, "attack-eval", "--checkpoint", str(ckpt)) == 1
    assert "no classifier head" in capsys.readouterr().err


def test_missing_checkpoint(cfg_file, tmp_path, capsys):
    assert run(cfg_file, tmp_path, "probe", "--checkpoint", str(tmp_path / "nope.ckpt")) == 1
    assert "does not exist" in capsys.readouterr().err
    assert run(cfg_file, tmp_path, "export-encoder") == 1


def test_bad_config_reports_key(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  lambda_ratio: 1.5\n")
    assert main(["pretrain", "--config", str(p), "--dry-run"]) == 1
    assert "lambda_ratio" in capsys.readouterr().err


def test_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["explode"])
    assert e.value.code == 2
