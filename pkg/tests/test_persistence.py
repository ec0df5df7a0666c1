import json
import struct
import threading

import numpy as np
import pytest

from aemim.checkpoint import (Checkpoint, CheckpointError, CheckpointFormatError, CheckpointIntegrityError,
                              CheckpointTruncatedError, CheckpointVersionError, ConfigHashMismatchError,
                              TrainingState, load_checkpoint, read_archive, save_checkpoint, write_archive)
from aemim.config import RunConfig, config_hash, parse_config, serialize
from aemim.metrics import FIELDS, MetricsIOError, MetricsSink, export_metrics, read_metrics
from aemim.mim import ConfigError
from aemim.model import init_params
from aemim.trainer import OptimizerState, make_rngs
from conftest import SMALL


# ------------------------------------------------------------------ metrics


def _records(run, n):
    return [{"run_id": run, "step": i, "metric": "L_c", "value": 1.0 / (i + 1), "wall_clock": 0.5 * i}
            for i in range(n)]


def test_metrics_roundtrip(tmp_path):
    recs = _records("a", 5) + [{"run_id": "a", "step": 9, "metric": "L_a", "value": float("nan"), "wall_clock": 1.0}]
    path = export_metrics(recs, tmp_path / "m.jsonl")
    back = read_metrics(path)
    assert back[:5] == recs[:5]
    assert np.isnan(back[5]["value"])
    assert all(list(r) == list(FIELDS) for r in back)


def test_metrics_empty_creates_file(tmp_path):
    path = export_metrics([], tmp_path / "e.jsonl")
    assert path.exists() and path.read_text() == ""
    assert read_metrics(path) == []


def test_metrics_appends(tmp_path):
    p = tmp_path / "m.jsonl"
    export_metrics(_records("a", 2), p)
    export_metrics(_records("a", 3), p)
    assert len(read_metrics(p)) == 5


def test_metrics_missing_field(tmp_path):
    with pytest.raises(ValueError, match="missing"):
        export_metrics([{"run_id": "a", "step": 1}], tmp_path / "m.jsonl")


def test_metrics_io_error_names_path(tmp_path):
    bad = tmp_path / "no_such_dir" / "m.jsonl"
    with pytest.raises(MetricsIOError, match="no_such_dir"):
        export_metrics(_records("a", 1), bad)


def test_concurrent_writers(tmp_path):
    """Threads hammering distinct files and one shared file: every line parses whole."""
    shared = tmp_path / "shared.jsonl"

    def work(i):
        own = tmp_path / f"run{i}.jsonl"
        for j in range(50):
            batch = _records(f"r{i}", 20)
            export_metrics(batch, own)
            export_metrics(batch, shared)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(6):
        recs = read_metrics(tmp_path / f"run{i}.jsonl")
        assert len(recs) == 1000 and {r["run_id"] for r in recs} == {f"r{i}"}
    lines = shared.read_text().splitlines()
    assert len(lines) == 6000
    for line in lines:
        json.loads(line)


def test_sink_expands_dict(tmp_path):
    sink = MetricsSink(tmp_path / "sub" / "m.jsonl", "run7")
    sink.log(3, {"L_c": 0.5, "L_a": 0.7})
    recs = read_metrics(tmp_path / "sub" / "m.jsonl")
    assert [(r["run_id"], r["step"], r["metric"], r["value"]) for r in recs] == \
        [("run7", 3, "L_c", 0.5), ("run7", 3, "L_a", 0.7)]


# ------------------------------------------------------------------- config


def test_empty_config_defaults():
    cfg = parse_config(text="", environ={})
    assert cfg == RunConfig()
    assert cfg.train.lambda_ratio == 0.5 and cfg.train.attack.epsilon == 2.0 and cfg.model.mask_ratio == 0.75


def test_lambda_out_of_range():
    with pytest.raises(ConfigError, match="lambda_ratio"):
        parse_config(text="train:\n  lambda_ratio: 1.5\n", environ={})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="train.lamda_ratio"):
        parse_config(text="train:\n  lamda_ratio: 0.5\n", environ={})


def test_type_errors_named():
    with pytest.raises(ConfigError, match="model.enc_dim"):
        parse_config(text="model:\n  enc_dim: sixty\n", environ={})
    with pytest.raises(ConfigError, match=r"model: .*enc_heads"):
        parse_config(text="model:\n  enc_heads: 5\n", environ={})


def test_roundtrip(tmp_path):
    text = ("model:\n  enc_depth: 2\n  adapter: both\n  mask_ratio: 0.6\ntrain:\n  lambda_ratio: 0.3\n"
            "  attack:\n    epsilon: 4\n    distance: kl\n  betas: [0.9, 0.99]\n"
            "eval:\n  eps_list: [0, 2, 8]\n  attacker: fgsm\nrun_id: x\n")
    cfg = parse_config(text=text, environ={})
    assert cfg.train.mask_ratio == 0.6 and cfg.train.attack.distance == "kl" and cfg.eval.eps_list == (0, 2, 8)
    again = parse_config(text=serialize(cfg), environ={})
    assert again == cfg
    f = tmp_path / "c.yaml"
    f.write_text(serialize(cfg))
    assert parse_config(f, environ={}) == cfg


def test_env_override():
    cfg = parse_config(text="train:\n  lambda_ratio: 0.5\n",
                       environ={"AEMIM__TRAIN__LAMBDA_RATIO": "0.25", "AEMIM__TRAIN__ATTACK__STEPS": "3",
                                "OTHER": "x"})
    assert cfg.train.lambda_ratio == 0.25 and cfg.train.attack.steps == 3


def test_bad_yaml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(text="train: [1, 2\n", environ={})
    with pytest.raises(ConfigError):
        parse_config(text="- a\n- b\n", environ={})
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.yaml", environ={})


def test_mismatched_mask_ratio():
    with pytest.raises(ConfigError, match="mask_ratio"):
        parse_config(text="model:\n  mask_ratio: 0.5\ntrain:\n  mask_ratio: 0.75\n", environ={})


def test_config_hash_ignores_location():
    a = parse_config(text="run_id: a\noutput_dir: /x\n", environ={})
    b = parse_config(text="run_id: b\noutput_dir: /y\ncheckpoint_every: 5\n", environ={})
    c = parse_config(text="train:\n  seed: 3\n", environ={})
    assert config_hash(a) == config_hash(b) != config_hash(c)


# --------------------------------------------------------------- checkpoint


def _state(store, step=3, chash="abc"):
    opt = OptimizerState.zeros_like(store)
    rng = np.random.default_rng(0)
    for k in opt.m:
        opt.m[k] = rng.normal(size=opt.m[k].shape).astype(np.float32)
        opt.v[k] = rng.uniform(size=opt.v[k].shape).astype(np.float32)
    opt.step = step
    rngs = make_rngs(5)
    for g in rngs.values():
        g.random(3)
    return TrainingState(opt, rngs, step, 1, chash, {"note": "x"})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = init_params(SMALL, 0)
    state = _state(store)
    p1 = save_checkpoint(store, state, tmp_path / "a.ckpt")
    st2, state2 = load_checkpoint(p1, expected_hash="abc")
    for (k, a), (k2, b) in zip(store.items(), st2.items()):
        assert k == k2 and a.tobytes() == b.tobytes() and a.shape == b.shape
    for k in store.keys():
        assert state.opt.m[k].tobytes() == state2.opt.m[k].tobytes()
        assert state.opt.v[k].tobytes() == state2.opt.v[k].tobytes()
    assert state2.opt.step == 3 and state2.step == 3 and state2.epoch == 1 and state2.extra == {"note": "x"}
    for name, g in state.rngs.items():
        assert g.random(4).tobytes() == state2.rngs[name].random(4).tobytes()


def test_save_load_save_identical_bytes(tmp_path):
    store = init_params(SMALL, 0)
    p1 = save_checkpoint(store, _state(store), tmp_path / "a.ckpt")
    st2, s2 = load_checkpoint(p1)
    p2 = save_checkpoint(st2, s2, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


@pytest.fixture
def ckpt_file(tmp_path):
    store = init_params(SMALL, 0)
    return save_checkpoint(store, _state(store), tmp_path / "c.ckpt")


def test_truncated(ckpt_file, tmp_path):
    blob = ckpt_file.read_bytes()
    for cut in (5, 40, len(blob) - 7):
        p = tmp_path / f"t{cut}.ckpt"
        p.write_bytes(blob[:cut])
        with pytest.raises(CheckpointTruncatedError):
            read_archive(p)


def test_bad_magic(ckpt_file):
    blob = bytearray(ckpt_file.read_bytes())
    blob[0:3] = b"XYZ"
    ckpt_file.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        read_archive(ckpt_file)


def test_version_mismatch(ckpt_file):
    blob = bytearray(ckpt_file.read_bytes())
    blob[9:13] = struct.pack("<I", 99)
    ckpt_file.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        read_archive(ckpt_file)


def test_corrupt_payload(ckpt_file):
    blob = bytearray(ckpt_file.read_bytes())
    blob[-3] ^= 0xFF
    ckpt_file.write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError):
        read_archive(ckpt_file)


def test_hash_mismatch(ckpt_file):
    with pytest.raises(ConfigHashMismatchError):
        load_checkpoint(ckpt_file, expected_hash="different")


def test_error_kinds_distinct():
    kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, CheckpointIntegrityError,
             ConfigHashMismatchError}
    assert all(issubclass(k, CheckpointError) for k in kinds)
    assert len(kinds) == 5


def test_archive_rejects_bad_input(tmp_path):
    with pytest.raises(TypeError):
        write_archive(tmp_path / "x", Checkpoint({"a": np.zeros(2)}, {"a": "shared"}))
    with pytest.raises(CheckpointError):
        write_archive(tmp_path / "x", Checkpoint({"a": np.zeros(2, np.float32)}, {"a": "misc"}))
    assert not list(tmp_path.iterdir())


def test_scalar_tensor_roundtrip(tmp_path):
    p = write_archive(tmp_path / "s", Checkpoint({"a": np.array(3.5, np.float32)}, {"a": "head"}))
    assert read_archive(p).tensors["a"].shape == ()
