"""File formats, configuration, and persistence.

All text artifacts are line-delimited JSON with a schema header line and
canonical serialization (sorted keys, compact separators, shortest
round-trip float repr), so re-serializing a parsed file is byte-identical
and replay is exact. Appearance tensors and checkpoints use a one-line JSON
header followed by raw little-endian float64 data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .covnet import CovNetConfig, CovNetParams, layer_shapes
from .features import DEFAULT_BOUNDS
from .geometry import Box7, PoseYawT

FORMAT_DETECTIONS = "cooptrack-detections"
FORMAT_TRACKS = "cooptrack-tracks"
FORMAT_GROUNDTRUTH = "cooptrack-groundtruth"
FORMAT_LOSSCURVE = "cooptrack-losscurve"
FORMAT_TENSORS = "cooptrack-tensors"
FORMAT_CHECKPOINT = "cooptrack-checkpoint"
SCHEMA_VERSION = 1


class LogFormatError(ValueError):
    """Malformed or wrong-version persisted data."""


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    preset: str = "v2v_mini"
    duration: int = 200
    noise_multiplier: float = 1.0
    miss_multiplier: float = 1.0
    fp_multiplier: float = 1.0

    def validate(self):
        if self.preset != "v2v_mini":
            raise ConfigError(f"unknown scenario preset {self.preset!r}")
        if self.duration < 1:
            raise ConfigError("scenario duration must be >= 1")
        for name in ("noise_multiplier", "miss_multiplier", "fp_multiplier"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class TrackerSettings:
    process_noise_velocity: float = 0.01
    assoc_iou_threshold: float = 0.1
    min_hits: int = 3
    max_age: int = 2
    score_decay: float = 0.9

    def validate(self):
        if self.process_noise_velocity < 0:
            raise ConfigError("process_noise_velocity must be >= 0")
        if not 0.0 < self.assoc_iou_threshold < 1.0:
            raise ConfigError("assoc_iou_threshold must be in (0,1)")
        if self.min_hits < 1 or self.max_age < 0:
            raise ConfigError("min_hits >= 1 and max_age >= 0 required")
        if not 0.0 < self.score_decay <= 1.0:
            raise ConfigError("score_decay must be in (0,1]")


@dataclass(frozen=True)
class NetSettings:
    app_shape: tuple = (8, 8, 8)
    conv_channels: tuple = (16, 32)
    kernel: int = 3
    stride: int = 2
    pad: int = 1
    pos_hidden: int = 64
    pos_out: int = 128
    head_hidden: int = 64
    use_appearance: bool = True
    use_positional: bool = True
    shared_weights: bool = False

    def covnet_config(self) -> CovNetConfig:
        return CovNetConfig(
            app_shape=tuple(self.app_shape), conv_channels=tuple(self.conv_channels),
            kernel=self.kernel, stride=self.stride, pad=self.pad,
            pos_hidden=self.pos_hidden, pos_out=self.pos_out,
            head_hidden=self.head_hidden, use_appearance=self.use_appearance,
            use_positional=self.use_positional)

    def validate(self):
        try:
            self.covnet_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class TrainSettings:
    window_length: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    epochs: int = 20
    gt_match_radius: float = 2.0
    center_distance: str = "3d"
    batch_windows: int = 1

    def validate(self):
        if self.window_length < 2:
            raise ConfigError("window_length must be >= 2")
        for name in ("lr", "weight_decay", "grad_clip_norm", "gt_match_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.center_distance not in ("3d", "2d"):
            raise ConfigError("center_distance must be '3d' or '2d'")
        if self.batch_windows != 1:
            raise ConfigError("only batch_windows = 1 is supported")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable constant in one schema-checked object."""

    seed: int = 0
    num_cavs: int = 2
    eval_iou_threshold: float = 0.25
    normalization_bounds: tuple = DEFAULT_BOUNDS
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    tracker: TrackerSettings = field(default_factory=TrackerSettings)
    covnet: NetSettings = field(default_factory=NetSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self):
        if self.num_cavs < 1:
            raise ConfigError("num_cavs must be >= 1")
        if not 0.0 < self.eval_iou_threshold < 1.0:
            raise ConfigError("eval_iou_threshold must be in (0,1)")
        bounds = self.normalization_bounds
        if len(bounds) != len(DEFAULT_BOUNDS):
            raise ConfigError(f"normalization_bounds needs {len(DEFAULT_BOUNDS)} pairs")
        for k, pair in enumerate(bounds):
            if len(pair) != 2 or not pair[0] < pair[1]:
                raise ConfigError(f"normalization_bounds[{k}] must be (min, max) with min < max")
        self.scenario.validate()
        self.tracker.validate()
        self.covnet.validate()
        self.train.validate()


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _SECTION_TYPES:
            kwargs[name] = _from_dict(_SECTION_TYPES[name], value, sub)
        elif isinstance(value, list):
            kwargs[name] = _tuplify(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTION_TYPES = {"scenario": ScenarioConfig, "tracker": TrackerSettings,
                  "covnet": NetSettings, "train": TrainSettings}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTION_TYPES:
            out[f.name] = {sf.name: _listify(getattr(value, sf.name))
                           for sf in dataclasses.fields(value)}
        else:
            out[f.name] = _listify(value)
    return out


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(path: str, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2))
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()


def write_run_metadata(out_dir: str, cfg: RunConfig, extra: dict = None):
    """Record enough to replay the run exactly: config, its hash, version."""
    meta = {"config": config_to_dict(cfg), "config_sha256": config_hash(cfg),
            "seed": cfg.seed, "package_version": __version__}
    if extra:
        meta.update(extra)
    path = os.path.join(out_dir, "run_meta.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(meta))
        fh.write("\n")
    return path


# --- line-delimited logs ------------------------------------------------------


def _validate_box(values, where):
    if not isinstance(values, list) or len(values) != 7:
        raise LogFormatError(f"{where}: box must be a 7-element list")
    if not all(isinstance(v, (int, float)) for v in values):
        raise LogFormatError(f"{where}: box entries must be numeric")
    if min(values[4:7]) <= 0:
        raise LogFormatError(f"{where}: box extents must be positive")


def _validate_detection(rec, where):
    for key in ("t", "cav", "box", "conf", "sigma", "pose"):
        if key not in rec:
            raise LogFormatError(f"{where}: missing field {key!r}")
    _validate_box(rec["box"], where)
    if not 0.0 < rec["conf"] <= 1.0:
        raise LogFormatError(f"{where}: confidence must be in (0,1], got {rec['conf']}")
    if len(rec["sigma"]) != 10:
        raise LogFormatError(f"{where}: sigma must have 10 entries")
    if len(rec["pose"]) != 4:
        raise LogFormatError(f"{where}: pose must have 4 entries")


def _validate_track(rec, where):
    for key in ("t", "id", "box", "score"):
        if key not in rec:
            raise LogFormatError(f"{where}: missing field {key!r}")
    _validate_box(rec["box"], where)


def _validate_gt(rec, where):
    for key in ("t", "obj", "box"):
        if key not in rec:
            raise LogFormatError(f"{where}: missing field {key!r}")
    _validate_box(rec["box"], where)


def _validate_loss(rec, where):
    for key in ("epoch", "window", "loss", "supervised"):
        if key not in rec:
            raise LogFormatError(f"{where}: missing field {key!r}")


_VALIDATORS = {FORMAT_DETECTIONS: _validate_detection, FORMAT_TRACKS: _validate_track,
               FORMAT_GROUNDTRUTH: _validate_gt, FORMAT_LOSSCURVE: _validate_loss}


def write_log(path: str, format_name: str, records, meta: dict = None):
    """Write a schema-headed JSONL file; every record is validated first."""
    validator = _VALIDATORS[format_name]
    header = {"format": format_name, "version": SCHEMA_VERSION}
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header))
        fh.write("\n")
        for i, rec in enumerate(records):
            validator(rec, f"record {i}")
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_log(path: str, format_name: str):
    """Read and validate a JSONL log; returns (header meta or {}, records)."""
    validator = _VALIDATORS[format_name]
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise LogFormatError(f"{path}: empty file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{path} line 1: invalid JSON ({exc})") from exc
    if header.get("format") != format_name:
        raise LogFormatError(
            f"{path}: format {header.get('format')!r}, expected {format_name!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise LogFormatError(
            f"{path}: schema version {header.get('version')!r} not supported "
            f"(expected {SCHEMA_VERSION})")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"{path} line {lineno}: invalid JSON ({exc})") from exc
        validator(rec, f"{path} line {lineno}")
        records.append(rec)
    return header.get("meta", {}), records


# conversions between log records and runtime objects


def detection_record(t: int, cav_id: int, box: Box7, conf: float, pose: PoseYawT,
                     sigma=None, app_index=None) -> dict:
    sigma = [0.0] * 10 if sigma is None else [float(s) for s in sigma]
    return {"t": int(t), "cav": int(cav_id), "box": [float(v) for v in box.to_vector()],
            "conf": float(conf), "sigma": sigma,
            "pose": [float(pose.t_x), float(pose.t_y), float(pose.t_z), float(pose.yaw)],
            "app": None if app_index is None else int(app_index)}


def track_record(t: int, track_id: int, box: Box7, score: float) -> dict:
    return {"t": int(t), "id": int(track_id),
            "box": [float(v) for v in box.to_vector()], "score": float(score)}


def gt_record(t: int, obj_id: int, box: Box7) -> dict:
    return {"t": int(t), "obj": int(obj_id), "box": [float(v) for v in box.to_vector()]}


def record_box(rec) -> Box7:
    return Box7.from_vector(np.array(rec["box"], dtype=float))


def record_pose(rec) -> PoseYawT:
    p = rec["pose"]
    return PoseYawT(p[0], p[1], p[2], p[3])


# --- tensor container ---------------------------------------------------------


class TensorStore:
    """Fixed-shape float64 tensors: one JSON header line + raw data.

    The element count is implied by file size, which keeps the format
    append-safe and byte-deterministic (no timestamps, no compression).
    """

    def __init__(self, path, shape, mode, fh, count=0):
        self.path = path
        self.shape = tuple(int(s) for s in shape)
        self._itemsize = int(np.prod(self.shape)) * 8
        self._mode = mode
        self._fh = fh
        self.count = count
        self._header_len = None

    @classmethod
    def create(cls, path: str, shape) -> "TensorStore":
        fh = open(path, "wb")
        header = canonical_json({"format": FORMAT_TENSORS, "version": SCHEMA_VERSION,
                                 "dtype": "<f8", "shape": list(shape)}) + "\n"
        fh.write(header.encode())
        return cls(path, shape, "w", fh)

    @classmethod
    def open(cls, path: str) -> "TensorStore":
        fh = open(path, "rb")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LogFormatError(f"{path}: invalid tensor header ({exc})") from exc
        if header.get("format") != FORMAT_TENSORS:
            raise LogFormatError(f"{path}: not a tensor container")
        if header.get("version") != SCHEMA_VERSION:
            raise LogFormatError(f"{path}: unsupported tensor version")
        shape = tuple(header["shape"])
        store = cls(path, shape, "r", fh)
        data_len = os.path.getsize(path) - len(header_line)
        if data_len % store._itemsize:
            raise LogFormatError(f"{path}: truncated tensor data")
        store.count = data_len // store._itemsize
        store._header_len = len(header_line)
        return store

    def append(self, arr: np.ndarray) -> int:
        if self._mode != "w":
            raise LogFormatError("store opened read-only")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        if arr.shape != self.shape:
            raise LogFormatError(f"tensor shape {arr.shape} != store shape {self.shape}")
        self._fh.write(arr.tobytes())
        idx = self.count
        self.count += 1
        return idx

    def read(self, index: int) -> np.ndarray:
        if self._mode != "r":
            raise LogFormatError("store opened write-only")
        if not 0 <= index < self.count:
            raise LogFormatError(f"tensor index {index} out of range [0,{self.count})")
        self._fh.seek(self._header_len + index * self._itemsize)
        buf = self._fh.read(self._itemsize)
        return np.frombuffer(buf, dtype="<f8").reshape(self.shape).copy()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    params_by_cav: dict
    config: RunConfig
    seed: int
    epochs_done: int = 0
    adam_state: dict = None  # {"step": int, "m": {(cav,name): arr}, "v": {...}}


def _param_cavs(cfg: RunConfig):
    return [0] if cfg.covnet.shared_weights else list(range(cfg.num_cavs))


def save_checkpoint(path: str, ckpt: Checkpoint):
    cfg = ckpt.config
    cavs = _param_cavs(cfg)
    manifest = []
    blobs = []

    def add(cav, name, arr, kind):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"cav": cav, "name": name, "kind": kind,
                         "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    for cav in cavs:
        params = ckpt.params_by_cav[cav]
        for name, arr in params.arrays.items():
            add(cav, name, arr, "param")
    if ckpt.adam_state is not None:
        for kind in ("m", "v"):
            table = ckpt.adam_state[kind]
            for cav in cavs:
                params = ckpt.params_by_cav[cav]
                for name in params.arrays:
                    add(cav, name, table[(cav, name)], f"adam_{kind}")
    header = {"format": FORMAT_CHECKPOINT, "version": SCHEMA_VERSION,
              "config": config_to_dict(cfg), "seed": int(ckpt.seed),
              "epochs_done": int(ckpt.epochs_done),
              "adam_step": (None if ckpt.adam_state is None
                            else int(ckpt.adam_state["step"])),
              "manifest": manifest}
    with open(path, "wb") as fh:
        fh.write((canonical_json(header) + "\n").encode())
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str, expect_config: RunConfig = None) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LogFormatError(f"{path}: invalid checkpoint header ({exc})") from exc
        if header.get("format") != FORMAT_CHECKPOINT:
            raise LogFormatError(f"{path}: not a checkpoint file")
        if header.get("version") != SCHEMA_VERSION:
            raise LogFormatError(f"{path}: unsupported checkpoint version")
        cfg = config_from_dict(header["config"])
        net_cfg = cfg.covnet.covnet_config()
        shapes = layer_shapes(net_cfg)
        arrays = {"param": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["manifest"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise LogFormatError(f"{path}: truncated checkpoint data")
            arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            key = (entry["cav"], entry["name"])
            if entry["kind"] == "param" and entry["name"] not in shapes:
                raise LogFormatError(f"{path}: unexpected parameter {entry['name']!r}")
            if entry["kind"] == "param" and shape != shapes[entry["name"]]:
                raise LogFormatError(
                    f"{path}: {entry['name']} has shape {shape}, config expects "
                    f"{shapes[entry['name']]}")
            arrays[entry["kind"]][key] = arr
    cavs = _param_cavs(cfg)
    params_by_cav = {}
    for cav in cavs:
        cav_arrays = {name: arr for (c, name), arr in arrays["param"].items() if c == cav}
        if set(cav_arrays) != set(shapes):
            raise LogFormatError(f"{path}: incomplete parameter set for vehicle {cav}")
        params = CovNetParams(net_cfg, {name: cav_arrays[name] for name in shapes})
        params.validate()
        params_by_cav[cav] = params
    if cfg.covnet.shared_weights:
        for cav in range(cfg.num_cavs):
            params_by_cav[cav] = params_by_cav[0]
    adam_state = None
    if header.get("adam_step") is not None:
        adam_state = {"step": int(header["adam_step"]),
                      "m": arrays["adam_m"], "v": arrays["adam_v"]}
    if expect_config is not None:
        if expect_config.num_cavs != cfg.num_cavs:
            raise LogFormatError(
                f"{path}: checkpoint is for {cfg.num_cavs} vehicles, run expects "
                f"{expect_config.num_cavs}")
        if expect_config.covnet != cfg.covnet:
            raise LogFormatError(f"{path}: checkpoint network settings differ from run config")
    return Checkpoint(params_by_cav=params_by_cav, config=cfg, seed=header["seed"],
                      epochs_done=header["epochs_done"], adam_state=adam_state)
