"""Tests for persistence: configs, JSONL logs, tensor stores, checkpoints."""

import dataclasses
import json
import os

import numpy as np
import pytest

from cooptrack import io, training
from cooptrack.covnet import CovNetParams
from cooptrack.geometry import Box7, PoseYawT
from cooptrack.io import (Checkpoint, ConfigError, LogFormatError, NetSettings,
                          RunConfig, ScenarioConfig, TensorStore, TrainSettings,
                          TrackerSettings)


def small_config(**kw) -> RunConfig:
    defaults = dict(covnet=NetSettings(conv_channels=(4, 8), pos_hidden=8,
                                       pos_out=32, head_hidden=8))
    defaults.update(kw)
    return RunConfig(**defaults)


# --- canonical JSON --------------------------------------------------------------


def test_canonical_json_is_sorted_and_compact():
    s = io.canonical_json({"b": 1, "a": [1.5, 2]})
    assert s == '{"a":[1.5,2],"b":1}'


def test_canonical_json_round_trips_floats_exactly():
    values = [0.1, 1 / 3, 1e-300, 123456.789, float(np.float64(np.pi))]
    for v in values:
        assert json.loads(io.canonical_json({"v": v}))["v"] == v


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        io.canonical_json({"v": float("nan")})


# --- config round trip -----------------------------------------------------------


def test_config_round_trip_preserves_everything(tmp_path):
    cfg = RunConfig(
        seed=7, num_cavs=3, eval_iou_threshold=0.3,
        scenario=ScenarioConfig(duration=50, noise_multiplier=1.5),
        tracker=TrackerSettings(min_hits=2, score_decay=0.8),
        covnet=NetSettings(conv_channels=(8, 16), pos_out=64, use_appearance=True),
        train=TrainSettings(epochs=5, lr=3e-4))
    path = tmp_path / "config.json"
    io.save_config(str(path), cfg)
    loaded = io.load_config(str(path))
    assert loaded == cfg
    # tuples must come back as tuples, not lists
    assert isinstance(loaded.covnet.conv_channels, tuple)
    assert isinstance(loaded.normalization_bounds[0], tuple)


def test_config_defaults_from_empty_dict():
    cfg = io.config_from_dict({})
    assert cfg == RunConfig()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        io.config_from_dict({"sede": 1})
    with pytest.raises(ConfigError, match=r"tracker: unknown key.*min_hitz"):
        io.config_from_dict({"tracker": {"min_hitz": 3}})


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        io.config_from_dict({"num_cavs": 0})
    with pytest.raises(ConfigError):
        io.config_from_dict({"tracker": {"assoc_iou_threshold": 1.5}})
    with pytest.raises(ConfigError):
        io.config_from_dict({"scenario": {"preset": "highway_mega"}})
    with pytest.raises(ConfigError):
        io.config_from_dict({"train": {"center_distance": "4d"}})
    with pytest.raises(ConfigError):
        io.config_from_dict({"normalization_bounds": [[0, 1]]})


def test_config_hash_stable_and_sensitive():
    a = io.config_hash(RunConfig())
    b = io.config_hash(RunConfig())
    c = io.config_hash(RunConfig(seed=1))
    assert a == b
    assert a != c
    assert len(a) == 64


def test_run_metadata_written(tmp_path):
    path = io.write_run_metadata(str(tmp_path), RunConfig(seed=4), {"note": "x"})
    with open(path) as fh:
        meta = json.loads(fh.read())
    assert meta["seed"] == 4
    assert meta["note"] == "x"
    assert meta["config_sha256"] == io.config_hash(RunConfig(seed=4))


# --- JSONL logs ------------------------------------------------------------------


BOX = Box7(1.0, 2.0, 0.5, 0.1, 4.2, 1.9, 1.6)
POSE = PoseYawT(0.0, 0.0, 1.2, 0.05)


def test_track_log_round_trip_byte_identical(tmp_path):
    records = [io.track_record(t, tid, BOX, 0.5 + 0.01 * t)
               for t in range(3) for tid in (1, 2)]
    path = tmp_path / "tracks.jsonl"
    io.write_log(str(path), io.FORMAT_TRACKS, records, meta={"run": "a"})
    meta, loaded = io.read_log(str(path), io.FORMAT_TRACKS)
    assert meta == {"run": "a"}
    assert loaded == records
    # re-serializing what we read reproduces the file exactly
    path2 = tmp_path / "again.jsonl"
    io.write_log(str(path2), io.FORMAT_TRACKS, loaded, meta=meta)
    assert path.read_bytes() == path2.read_bytes()


def test_detection_log_round_trip(tmp_path):
    rec = io.detection_record(0, 1, BOX, 0.9, POSE, sigma=list(range(10)), app_index=3)
    path = tmp_path / "dets.jsonl"
    io.write_log(str(path), io.FORMAT_DETECTIONS, [rec])
    _, loaded = io.read_log(str(path), io.FORMAT_DETECTIONS)
    assert loaded == [rec]
    assert io.record_box(rec).to_vector() == pytest.approx(BOX.to_vector())
    assert io.record_pose(rec) == POSE


def test_log_rejects_wrong_format_and_version(tmp_path):
    path = tmp_path / "log.jsonl"
    io.write_log(str(path), io.FORMAT_TRACKS, [])
    with pytest.raises(LogFormatError, match="expected"):
        io.read_log(str(path), io.FORMAT_GROUNDTRUTH)
    bad = tmp_path / "bad.jsonl"
    bad.write_text(io.canonical_json({"format": io.FORMAT_TRACKS, "version": 99}) + "\n")
    with pytest.raises(LogFormatError, match="version"):
        io.read_log(str(bad), io.FORMAT_TRACKS)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(LogFormatError, match="empty"):
        io.read_log(str(empty), io.FORMAT_TRACKS)


def test_log_error_reports_line_number(tmp_path):
    path = tmp_path / "log.jsonl"
    lines = [io.canonical_json({"format": io.FORMAT_TRACKS, "version": 1}),
             io.canonical_json(io.track_record(0, 1, BOX, 0.5)),
             "{not json"]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match="line 3"):
        io.read_log(str(path), io.FORMAT_TRACKS)


def test_log_validates_record_fields(tmp_path):
    path = tmp_path / "log.jsonl"
    with pytest.raises(LogFormatError, match="missing field"):
        io.write_log(str(path), io.FORMAT_TRACKS, [{"t": 0, "id": 1}])
    bad_box = io.track_record(0, 1, BOX, 0.5)
    bad_box["box"] = bad_box["box"][:5]
    with pytest.raises(LogFormatError, match="7-element"):
        io.write_log(str(path), io.FORMAT_TRACKS, [bad_box])
    neg_extent = io.track_record(0, 1, BOX, 0.5)
    neg_extent["box"][4] = -1.0
    with pytest.raises(LogFormatError, match="extents"):
        io.write_log(str(path), io.FORMAT_TRACKS, [neg_extent])
    bad_conf = io.detection_record(0, 0, BOX, 0.9, POSE)
    bad_conf["conf"] = 1.5
    with pytest.raises(LogFormatError, match="confidence"):
        io.write_log(str(path), io.FORMAT_DETECTIONS, [bad_conf])


def test_gt_log_round_trip(tmp_path):
    records = [io.gt_record(t, obj, BOX) for t in range(2) for obj in range(3)]
    path = tmp_path / "gt.jsonl"
    io.write_log(str(path), io.FORMAT_GROUNDTRUTH, records)
    _, loaded = io.read_log(str(path), io.FORMAT_GROUNDTRUTH)
    assert loaded == records


# --- tensor store ----------------------------------------------------------------


def test_tensor_store_round_trip(tmp_path):
    path = str(tmp_path / "app.bin")
    rng = np.random.default_rng(0)
    tensors = [rng.standard_normal((3, 4, 4)) for _ in range(5)]
    with TensorStore.create(path, (3, 4, 4)) as store:
        for i, t in enumerate(tensors):
            assert store.append(t) == i
    with TensorStore.open(path) as store:
        assert store.count == 5
        assert store.shape == (3, 4, 4)
        for i, t in enumerate(tensors):
            np.testing.assert_array_equal(store.read(i), t)
        # out of order read
        np.testing.assert_array_equal(store.read(2), tensors[2])


def test_tensor_store_rejects_bad_shapes_and_indices(tmp_path):
    path = str(tmp_path / "app.bin")
    with TensorStore.create(path, (2, 2)) as store:
        store.append(np.zeros((2, 2)))
        with pytest.raises(LogFormatError, match="shape"):
            store.append(np.zeros((2, 3)))
    with TensorStore.open(path) as store:
        with pytest.raises(LogFormatError, match="out of range"):
            store.read(1)


def test_tensor_store_detects_truncation(tmp_path):
    path = str(tmp_path / "app.bin")
    with TensorStore.create(path, (2, 2)) as store:
        store.append(np.ones((2, 2)))
    with open(path, "rb") as fh:
        data = fh.read()
    with open(path, "wb") as fh:
        fh.write(data[:-5])
    with pytest.raises(LogFormatError, match="truncated"):
        TensorStore.open(path)


# --- checkpoints -----------------------------------------------------------------


def make_params(cfg: RunConfig, seed=0):
    rng = np.random.default_rng(seed)
    return training.init_params_for_run(cfg, rng)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = make_params(cfg)
    path = str(tmp_path / "ckpt.bin")
    io.save_checkpoint(path, Checkpoint(params_by_cav=params, config=cfg, seed=9))
    loaded = io.load_checkpoint(path)
    assert loaded.seed == 9
    assert loaded.epochs_done == 0
    assert loaded.adam_state is None
    assert loaded.config == cfg
    for cav in range(cfg.num_cavs):
        for name, arr in params[cav].arrays.items():
            np.testing.assert_array_equal(loaded.params_by_cav[cav].arrays[name], arr)


def test_checkpoint_round_trip_with_adam_state(tmp_path):
    cfg = small_config()
    params = make_params(cfg)
    sets = {c: p for c, p in params.items()}
    state = training.AdamState.init(sets)
    rng = np.random.default_rng(1)
    grads = {key: rng.standard_normal(m.shape) for key, m in state.m.items()}
    training.adam_step(sets, grads, state, 1e-3, 1e-5)
    path = str(tmp_path / "ckpt.bin")
    io.save_checkpoint(path, Checkpoint(
        params_by_cav=params, config=cfg, seed=0, epochs_done=3,
        adam_state={"step": state.step, "m": state.m, "v": state.v}))
    loaded = io.load_checkpoint(path)
    assert loaded.epochs_done == 3
    assert loaded.adam_state["step"] == 1
    for key in state.m:
        np.testing.assert_array_equal(loaded.adam_state["m"][key], state.m[key])
        np.testing.assert_array_equal(loaded.adam_state["v"][key], state.v[key])


def test_checkpoint_save_is_deterministic(tmp_path):
    cfg = small_config()
    params = make_params(cfg)
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    io.save_checkpoint(p1, Checkpoint(params_by_cav=params, config=cfg, seed=0))
    io.save_checkpoint(p2, Checkpoint(params_by_cav=params, config=cfg, seed=0))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_shared_weights_stores_one_set(tmp_path):
    cfg = small_config(covnet=NetSettings(conv_channels=(4, 8), pos_hidden=8,
                                          pos_out=32, head_hidden=8,
                                          shared_weights=True))
    params = make_params(cfg)
    assert params[0] is params[1]
    path = str(tmp_path / "ckpt.bin")
    io.save_checkpoint(path, Checkpoint(params_by_cav=params, config=cfg, seed=0))
    loaded = io.load_checkpoint(path)
    assert loaded.params_by_cav[0] is loaded.params_by_cav[1]
    for name, arr in params[0].arrays.items():
        np.testing.assert_array_equal(loaded.params_by_cav[0].arrays[name], arr)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    cfg = small_config()
    params = make_params(cfg)
    params[0].arrays["head_w0"] = np.zeros((3, 3))
    path = str(tmp_path / "ckpt.bin")
    io.save_checkpoint(path, Checkpoint(params_by_cav=params, config=cfg, seed=0))
    with pytest.raises(LogFormatError, match="shape"):
        io.load_checkpoint(path)


def test_checkpoint_expect_config_guards(tmp_path):
    cfg = small_config()
    params = make_params(cfg)
    path = str(tmp_path / "ckpt.bin")
    io.save_checkpoint(path, Checkpoint(params_by_cav=params, config=cfg, seed=0))
    io.load_checkpoint(path, expect_config=cfg)  # matching config is fine
    other_cavs = dataclasses.replace(cfg, num_cavs=3)
    with pytest.raises(LogFormatError, match="vehicles"):
        io.load_checkpoint(path, expect_config=other_cavs)
    other_net = dataclasses.replace(cfg, covnet=NetSettings())
    with pytest.raises(LogFormatError, match="network settings"):
        io.load_checkpoint(path, expect_config=other_net)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "notckpt.bin"
    path.write_bytes(io.canonical_json({"format": "something-else", "version": 1})
                     .encode() + b"\n")
    with pytest.raises(LogFormatError, match="not a checkpoint"):
        io.load_checkpoint(str(path))
    trunc = tmp_path / "trunc.bin"
    cfg = small_config()
    io.save_checkpoint(str(tmp_path / "good.bin"),
                       Checkpoint(params_by_cav=make_params(cfg), config=cfg, seed=0))
    data = (tmp_path / "good.bin").read_bytes()
    trunc.write_bytes(data[:-16])
    with pytest.raises(LogFormatError, match="truncated"):
        io.load_checkpoint(str(trunc))
